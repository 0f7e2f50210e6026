//! Feeds encoder features of an observed prefix through the query decoder
//! and prints the present, future and past action heads, the durations and
//! the bi-directional regularization losses against real targets.
//!
//! ```text
//! cargo run --release --example decoder_heads
//! ```

use tcca::datagen::{sample_video, stream_rng, GeneratorConfig};
use tcca::decoder::loss_bacr;
use tcca::encoder::build_seg_features;
use tcca::training::{subsample, Model, ModelSpec, TrainConfig, TrainingSample};

fn main() -> tcca::Result<()> {
    let gen = GeneratorConfig::default();
    let spec = gen.build_spec()?;
    let train = TrainConfig::default();
    let model_spec =
        ModelSpec::new(spec.classes, spec.feature_dim, &Default::default(), &Default::default(), &Default::default(), &train);
    let model = Model::new(&model_spec, None)?;

    let video = subsample(&sample_video(&spec, &mut stream_rng(3, 0)), train.sample_rate, 0);
    let sample = TrainingSample::from_video(&video, 0.3, model_spec.queries(), spec.classes)?;
    println!("observed {} of {} frames; targets {:?}", sample.frame_labels.len(), video.len(), sample.query_targets);

    let logits = model.encoder.encode(&model.store, &sample.features)?;
    let out = model.decoder.decode(&model.store, &build_seg_features(&logits))?;
    for (name, head) in [("present", &out.a_pres), ("future", &out.a_fut), ("past", &out.a_past)] {
        println!("{name} head: {} × {}", head.rows(), head.cols());
    }
    let d: Vec<String> = out.d_hat.iter().map(|v| format!("{v:.3}")).collect();
    println!("durations [{}] sum {:.6}", d.join(" "), out.d_hat.iter().sum::<f64>());
    let target: Vec<String> = sample.durations.iter().map(|v| format!("{v:.3}")).collect();
    println!("target    [{}]", target.join(" "));
    let (l_fut, l_past) = loss_bacr(&out.a_fut, &out.a_past, &out.a_pres, logits.last().row(logits.frames() - 1))?;
    println!("untrained BACR losses: future {l_fut:.4}, past {l_past:.4}");
    Ok(())
}
