//! Verifies every loss term's analytic gradient against central finite
//! differences on a small model.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use tcca::datagen::{sample_video, stream_rng, GeneratorConfig};
use tcca::decoder::DecoderConfig;
use tcca::encoder::EncoderConfig;
use tcca::training::gradcheck::gradient_check;
use tcca::training::{subsample, LossTerm, Model, ModelSpec, TrainConfig, TrainingSample};

fn main() -> tcca::Result<()> {
    let gen = GeneratorConfig { classes: 4, feature_dim: 4, duration_mean_range: (4.0, 6.0), ..Default::default() };
    let spec = gen.build_spec()?;
    let video = subsample(&sample_video(&spec, &mut stream_rng(1, 0)), 2, 0);
    let enc = EncoderConfig { hidden_dim: 8, window: 4, global_stride: 2, ..Default::default() };
    let dec = DecoderConfig { hidden_dim: 8, queries: 4, layers: 1, max_positions: 64, ..Default::default() };
    let cfg = TrainConfig::default();
    let model = Model::new(&ModelSpec::new(4, 4, &enc, &dec, &Default::default(), &cfg), None)?;
    let sample = TrainingSample::from_video(&video, 0.3, 4, 4)?;
    println!("{} parameters, {} observed frames", model.store.total_elements(), sample.frame_labels.len());

    for term in LossTerm::ALL.into_iter().filter(|t| *t != LossTerm::MultiLabel) {
        let report = gradient_check(&model, &sample, &cfg, &[term], None, 6)?;
        println!("{:>6}: max relative error {:.2e} over {} coordinates", term.name(), report.max_rel_error, report.coordinates);
    }
    let all = [LossTerm::Segmentation, LossTerm::Smoothing, LossTerm::Duration, LossTerm::Future, LossTerm::Past, LossTerm::Sequence];
    let report = gradient_check(&model, &sample, &cfg, &all, None, 6)?;
    println!(" total: max relative error {:.2e} (worst at {:?})", report.max_rel_error, report.worst);
    Ok(())
}
