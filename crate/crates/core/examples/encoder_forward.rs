//! Runs the multi-stage windowed encoder on one synthetic video and prints
//! its per-stage logits, framewise predictions and encoder losses.
//!
//! ```text
//! cargo run --release --example encoder_forward
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tcca::datagen::{sample_video, stream_rng, GeneratorConfig};
use tcca::encoder::{build_seg_features, seg_loss, smooth_loss, Encoder, EncoderConfig};
use tcca::params::ParamStore;
use tcca::sequence::frames_to_segments;

fn main() -> tcca::Result<()> {
    let spec = GeneratorConfig::default().build_spec()?;
    let video = sample_video(&spec, &mut stream_rng(7, 0));
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::default();
    let encoder = Encoder::new(&mut store, &cfg, spec.feature_dim, spec.classes, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("{} frames, {} encoder parameters", video.len(), store.total_elements());

    let logits = encoder.encode(&store, &video.features)?;
    for s in 0..logits.num_stages() {
        let stage = logits.stage(s);
        println!("stage {s}: {} × {} logits", stage.rows(), stage.cols());
    }
    let predicted = logits.predicted_labels();
    let correct = predicted.iter().zip(&video.labels).filter(|(p, g)| p == g).count();
    println!("untrained framewise accuracy {:.3}", correct as f64 / video.len() as f64);
    println!("predicted segments: {}", frames_to_segments(&predicted)?.len());
    println!("segmentation loss {:.4}, smoothing loss {:.4}", seg_loss(&logits, &video.labels)?, smooth_loss(&logits));
    let f_seg = build_seg_features(&logits);
    println!("decoder input: {} × {}", f_seg.rows(), f_seg.cols());
    Ok(())
}
