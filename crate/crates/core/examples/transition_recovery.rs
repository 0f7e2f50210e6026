//! Trains the full model from a random and from a corpus-estimated
//! transition initialisation and compares both learned matrices with the
//! generator's grammar. Writes CSV and SVG heat maps of each.
//!
//! ```text
//! cargo run --release --example transition_recovery -- [epochs] [out_dir]
//! ```

use tcca::crf::{action_row_argmax, heatmap_svg, row_argmax_agreement, CrfConfig, InitMode};
use tcca::datagen::{sample_dataset, GeneratorConfig};
use tcca::training::{segment_corpus, train, Model, ModelSpec, TrainConfig};

fn main() -> tcca::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(50, |a| a.parse().expect("epochs"));
    let out = args.next().map_or_else(|| std::env::temp_dir().join("tcca_transitions"), Into::into);
    std::fs::create_dir_all(&out)?;

    let gen = GeneratorConfig::default();
    let data = sample_dataset(&gen.build_spec()?, gen.n_train, gen.n_test)?;
    let corpus = segment_corpus(&data.train);
    let counts = data.train_transition_counts();
    let rows: Vec<usize> = (0..data.classes).filter(|&a| counts.row(a).iter().sum::<f64>() >= 20.0).collect();
    let gt: Vec<usize> = (0..data.classes)
        .map(|a| (0..data.classes).fold(0, |b, c| if data.gt_transitions.get(a, c) > data.gt_transitions.get(a, b) { c } else { b }))
        .collect();

    let cfg = TrainConfig { epochs, learning_rate: 2e-3, ..TrainConfig::default() };
    let mut learned = Vec::new();
    for mode in [InitMode::Random, InitMode::Precomputed] {
        let crf = CrfConfig { init_mode: mode, ..CrfConfig::default() };
        let spec = ModelSpec::new(data.classes, data.feature_dim, &Default::default(), &Default::default(), &crf, &cfg);
        let model = train(Model::new(&spec, Some(&corpus))?, &data, &cfg)?.model;
        let t = model.transition_matrix();
        let argmax = action_row_argmax(&t);
        let hits = rows.iter().filter(|&&r| argmax[r] == gt[r]).count();
        println!("{mode:?}: row argmax {argmax:?}, agrees with ground truth on {hits}/{} rows", rows.len());
        let name = format!("{mode:?}").to_lowercase();
        std::fs::write(out.join(format!("{name}.csv")), t.to_csv())?;
        std::fs::write(out.join(format!("{name}.svg")), heatmap_svg(&t.exp_normalized(), &t.label_names()))?;
        learned.push(t);
    }
    println!("ground-truth argmax {gt:?}");
    println!("random vs precomputed agreement: {:.2}", row_argmax_agreement(&learned[0], &learned[1], &rows));
    println!("heat maps in {}", out.display());
    Ok(())
}
