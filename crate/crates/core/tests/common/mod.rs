//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tcca::crf::TransitionMatrix;
use tcca::metrics::Span;
use tcca::tensor::Matrix;

/// Every label sequence of length `k` over `labels` symbols.
pub fn all_paths(k: usize, labels: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..k {
        out = out.into_iter().flat_map(|p| (0..labels).map(move |y| [p.clone(), vec![y]].concat())).collect();
    }
    out
}

/// Direct evaluation of the chain score with START/END boundaries.
pub fn path_score(emissions: &Matrix, path: &[usize], m: &TransitionMatrix, omega: f64) -> f64 {
    let c = m.classes();
    let (start, end) = (c + 1, c + 2);
    let mut labels = vec![start];
    labels.extend_from_slice(path);
    labels.push(end);
    let trans: f64 = labels.windows(2).map(|w| m.scores().get(w[0], w[1])).sum();
    path.iter().enumerate().map(|(i, &y)| emissions.get(i, y)).sum::<f64>() + omega * trans
}

pub struct Enumeration {
    pub log_partition: f64,
    pub best_score: f64,
    /// Paths attaining the maximum score (within 1e-12).
    pub argmax: Vec<Vec<usize>>,
}

pub fn enumerate_crf(emissions: &Matrix, m: &TransitionMatrix, omega: f64) -> Enumeration {
    let scores: Vec<(Vec<usize>, f64)> = all_paths(emissions.rows(), emissions.cols())
        .into_iter()
        .map(|p| {
            let s = path_score(emissions, &p, m, omega);
            (p, s)
        })
        .collect();
    let best_score = scores.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let log_partition = best_score + scores.iter().map(|(_, s)| (s - best_score).exp()).sum::<f64>().ln();
    let argmax = scores.iter().filter(|(_, s)| best_score - s < 1e-12).map(|(p, _)| p.clone()).collect();
    Enumeration { log_partition, best_score, argmax }
}

/// Random emissions and learnable transitions for `classes` actions.
pub fn random_crf_instance(rng: &mut ChaCha8Rng, k: usize, classes: usize) -> (Matrix, TransitionMatrix) {
    let labels = classes + 1;
    let emissions =
        Matrix::from_vec(k, labels, (0..k * labels).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    let mut m = TransitionMatrix::zeros(classes);
    let n = classes + 3;
    for a in 0..n {
        for b in 0..n {
            m.set(a, b, rng.random_range(-2.0..2.0));
        }
    }
    (emissions, m)
}

/// Textbook full-table Levenshtein distance.
pub fn reference_levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

fn overlap_ratio(a: &Span, b: &Span) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = hi.saturating_sub(lo);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    inter as f64 / union as f64
}

/// Largest number of one-to-one same-label pairs with IoU ≥ `tau`, by
/// exhaustive search over assignments.
pub fn exhaustive_true_positives(pred: &[Span], gt: &[Span], tau: f64) -> usize {
    fn go(i: usize, pred: &[Span], gt: &[Span], tau: f64, used: &mut Vec<bool>) -> usize {
        if i == pred.len() {
            return 0;
        }
        let mut best = go(i + 1, pred, gt, tau, used);
        for j in 0..gt.len() {
            if !used[j] && pred[i].label == gt[j].label && overlap_ratio(&pred[i], &gt[j]) >= tau {
                used[j] = true;
                best = best.max(1 + go(i + 1, pred, gt, tau, used));
                used[j] = false;
            }
        }
        best
    }
    go(0, pred, gt, tau, &mut vec![false; gt.len()])
}

/// AP by counting, for each positive, how many items rank at or above it.
pub fn quadratic_ap(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut total = 0.0;
    for i in (0..scores.len()).filter(|&i| positives[i]) {
        let ranked = (0..scores.len()).filter(|&j| above(i, j)).count();
        let hits = (0..scores.len()).filter(|&j| positives[j] && above(i, j)).count();
        total += hits as f64 / ranked as f64;
    }
    Some(total / n_pos as f64)
}

/// A frame track with between 1 and `max_segments` segments.
pub fn random_track(rng: &mut ChaCha8Rng, max_segments: usize, labels: usize, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_segments);
    let mut track = Vec::new();
    let mut last = usize::MAX;
    for _ in 0..n {
        let mut l = rng.random_range(0..labels);
        if l == last {
            l = (l + 1) % labels;
        }
        let len = rng.random_range(1..=max_len);
        track.extend(std::iter::repeat_n(l, len));
        last = l;
    }
    track
}
