//! Generates the default synthetic dataset, trains the full model and
//! prints anticipation MoC over the evaluation grid.
//!
//! ```text
//! cargo run --release --example train_and_evaluate -- [epochs] [seed]
//! ```

use std::time::Instant;

use tcca::crf::CrfConfig;
use tcca::datagen::{sample_dataset, GeneratorConfig};
use tcca::decoder::DecoderConfig;
use tcca::encoder::EncoderConfig;
use tcca::training::eval::{evaluate, EvalConfig};
use tcca::training::{segment_corpus, train_with_progress, Model, ModelSpec, TrainConfig};

fn main() -> tcca::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(50, |a| a.parse().expect("epochs"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));

    let gen = GeneratorConfig::default();
    let data = sample_dataset(&gen.build_spec()?, gen.n_train, gen.n_test)?;
    let train = TrainConfig { epochs, seed, learning_rate: 2e-3, ..TrainConfig::default() };
    let spec = ModelSpec::new(
        data.classes,
        data.feature_dim,
        &EncoderConfig::default(),
        &DecoderConfig::default(),
        &CrfConfig::default(),
        &train,
    );
    let model = Model::new(&spec, Some(&segment_corpus(&data.train)))?;
    println!("{} parameters", model.store.total_elements());

    let start = Instant::now();
    let outcome = train_with_progress(model, &data, &train, |r| {
        println!("epoch {:>3}  loss {:.4}  ({:.1}s)", r.epoch, r.total(), start.elapsed().as_secs_f64());
    })?;
    if let Some(last) = outcome.log.last() {
        let terms: Vec<String> = last.values.iter().map(|(k, v)| format!("{k}={v:.3}")).collect();
        println!("final epoch: {}", terms.join(" "));
    }
    let eval = EvalConfig::default();
    let report = evaluate(&outcome.model, &data.test, data.classes, &eval, train.sample_rate, None)?;
    for e in &report.moc {
        println!("MoC alpha={:.1} beta={:.1}: {:.3}", e.alpha, e.beta, e.value);
    }
    println!("mean MoC {:.3}; encoder acc {:.3}, edit {:.3}", report.mean_moc(), report.seg_acc, report.edit);
    Ok(())
}
