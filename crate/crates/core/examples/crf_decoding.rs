//! Scores, normalizes and decodes query emissions with the transition CRF,
//! and shows how the transition weight changes the decoded sequence.
//!
//! ```text
//! cargo run --example crf_decoding
//! ```

use tcca::crf::{
    crf_log_partition, crf_nll_with_grad, greedy_decode, truncate_at_eos, viterbi_decode, TransitionMatrix,
};
use tcca::tensor::Matrix;

fn main() -> tcca::Result<()> {
    // Two actions plus EOS, four queries. Query 1 is ambiguous between 0 and 1.
    let classes = 2;
    let emissions = Matrix::from_rows(&[
        vec![2.0, 0.0, -1.0],
        vec![0.9, 1.0, -1.0],
        vec![-1.0, 0.5, 1.0],
        vec![-2.0, -2.0, 2.0],
    ])?;
    let mut trans = TransitionMatrix::zeros(classes);
    // Action 0 is usually followed by action 1, never by itself.
    trans.set(0, 1, 1.5);
    trans.set(0, 0, -2.0);
    trans.set(1, trans.eos(), 1.0);

    println!("label names: {:?}", trans.label_names());
    println!("greedy: {:?}", greedy_decode(&emissions));
    for omega in [0.0, 0.5, 1.0, 2.0] {
        let (path, score) = viterbi_decode(&emissions, &trans, omega)?;
        let z = crf_log_partition(&emissions, &trans, omega)?;
        println!(
            "omega {omega}: viterbi {path:?} score {score:.3}, p(path) = {:.3}, actions {:?}",
            (score - z).exp(),
            truncate_at_eos(&path, classes)
        );
    }

    let gt = [0, 1, 2, 2];
    let out = crf_nll_with_grad(&emissions, &gt, &trans, 1.0)?;
    println!("NLL of {gt:?}: {:.4}", out.nll);
    println!("d NLL / d emissions:");
    for r in 0..out.d_emissions.rows() {
        let row: Vec<String> = out.d_emissions.row(r).iter().map(|v| format!("{v:+.3}")).collect();
        println!("  [{}]", row.join(" "));
    }
    println!("exp-normalized transitions:\n{}", trans.to_csv());
    Ok(())
}
