//! Scores a forecast with the anticipation and segmentation metrics.
//!
//! ```text
//! cargo run --example metrics
//! ```

use tcca::metrics::{average_precision, decode_to_frames, edit_score, f1_at, frame_acc, moc, spans_of, F1_THRESHOLDS};

fn main() -> tcca::Result<()> {
    let gt = [vec![0; 6], vec![2; 10], vec![1; 4]].concat();
    // Predicted actions with normalized durations, expanded to the horizon.
    let pred = decode_to_frames(&[0, 2, 3], &[0.2, 0.5, 0.3], gt.len(), 0);
    println!("gt   {gt:?}\npred {pred:?}");
    println!("MoC {:.3}, frame accuracy {:.3}", moc(&pred, &gt, 4)?, frame_acc(&pred, &gt)?);
    println!("Edit {:.3}", edit_score(&[0, 2, 3], &[0, 2, 1]));
    for tau in F1_THRESHOLDS {
        println!("F1@{tau:.2} {:.3}", f1_at(&spans_of(&pred), &spans_of(&gt), tau));
    }
    let ap = average_precision(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]);
    println!("AP {:.3}", ap.unwrap_or(f64::NAN));
    Ok(())
}
