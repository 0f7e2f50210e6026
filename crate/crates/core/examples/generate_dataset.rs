//! Samples the default synthetic dataset, prints its grammar and writes it
//! to disk in the on-disk dataset format.
//!
//! ```text
//! cargo run --release --example generate_dataset -- [out_dir]
//! ```

use tcca::datagen::{sample_dataset, GeneratorConfig};
use tcca::sequence::frames_to_segments;

fn main() -> tcca::Result<()> {
    let cfg = GeneratorConfig::default();
    let spec = cfg.build_spec()?;
    println!("{} classes, {} feature dims, noise sigma {}", spec.classes, spec.feature_dim, spec.noise_sigma);
    println!("ground-truth transitions:");
    for a in 0..spec.classes {
        let row: Vec<String> = (0..spec.classes).map(|b| format!("{:.3}", spec.gt_transitions.get(a, b))).collect();
        let (mean, std) = spec.duration_params[a];
        println!("  {a}: [{}]  duration {mean:.1} ± {std:.1}", row.join(" "));
    }

    let data = sample_dataset(&spec, cfg.n_train, cfg.n_test)?;
    let lengths: Vec<usize> = data.train.iter().map(|v| v.len()).collect();
    let mean_len = lengths.iter().sum::<usize>() as f64 / lengths.len() as f64;
    let first = frames_to_segments(&data.train[0].labels)?;
    println!("{} train / {} test videos, mean length {mean_len:.1} frames", data.train.len(), data.test.len());
    println!("train video 0: actions {:?} durations {:?}", first.actions, first.durations);

    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("tcca_dataset"), Into::into);
    let hash = data.save(&out)?;
    println!("wrote {} (manifest sha256 {hash})", out.display());
    Ok(())
}
