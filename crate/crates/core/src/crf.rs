//! Linear-chain CRF over the decoder's query emissions.
//!
//! Emissions are `K × (C+1)` (actions plus EOS). Transitions live on an
//! augmented label set of size `C+3`: actions `0..C`, EOS `= C`,
//! START `= C+1`, END `= C+2`. A path `y_1..y_K` scores
//!
//! ```text
//! Σ_i e[i, y_i] + ω (M[START, y_1] + Σ_i M[y_i, y_{i+1}] + M[y_K, END])
//! ```
//!
//! Entries into START and out of END are pinned to [`FORBIDDEN`] and never
//! trained.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sequence::{eos_label, ActionLabel};
use crate::tensor::{argmax, log_sum_exp, Matrix};

/// Log-score of transitions that can never be taken.
pub const FORBIDDEN: f64 = -1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Random,
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfConfig {
    /// Weight of the transition term.
    pub omega: f64,
    pub init_mode: InitMode,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self { omega: 1.0, init_mode: InitMode::Random }
    }
}

/// `(C+3) × (C+3)` transition log-scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    classes: usize,
    scores: Matrix,
}

impl TransitionMatrix {
    /// All learnable entries zero.
    pub fn zeros(classes: usize) -> Self {
        let n = classes + 3;
        let mut m = Self { classes, scores: Matrix::zeros(n, n) };
        m.pin_forbidden();
        m
    }

    /// Wraps a raw matrix, re-pinning the forbidden entries.
    pub fn from_matrix(classes: usize, scores: Matrix) -> Result<Self> {
        let n = classes + 3;
        if scores.shape() != (n, n) {
            return Err(Error::Shape(format!("transition matrix must be {n}x{n}, got {:?}", scores.shape())));
        }
        let mut m = Self { classes, scores };
        m.pin_forbidden();
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Emission label count, `C + 1`.
    pub fn labels(&self) -> usize {
        self.classes + 1
    }

    pub fn eos(&self) -> usize {
        eos_label(self.classes)
    }

    pub fn start(&self) -> usize {
        self.classes + 1
    }

    pub fn end(&self) -> usize {
        self.classes + 2
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn into_matrix(self) -> Matrix {
        self.scores
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.scores.get(from, to)
    }

    pub fn set(&mut self, from: usize, to: usize, value: f64) {
        if is_learnable(self.classes, from, to) {
            self.scores.set(from, to, value);
        }
    }

    fn pin_forbidden(&mut self) {
        let (start, end) = (self.start(), self.end());
        for i in 0..self.classes + 3 {
            self.scores.set(i, start, FORBIDDEN);
            self.scores.set(end, i, FORBIDDEN);
        }
    }

    /// Row-wise softmax over the permitted entries; fully forbidden rows are zero.
    pub fn exp_normalized(&self) -> Matrix {
        let n = self.classes + 3;
        let mut out = Matrix::zeros(n, n);
        for r in 0..n {
            let allowed: Vec<usize> = (0..n).filter(|&c| is_learnable(self.classes, r, c)).collect();
            if allowed.is_empty() {
                continue;
            }
            let vals: Vec<f64> = allowed.iter().map(|&c| self.scores.get(r, c)).collect();
            let lse = log_sum_exp(&vals);
            for (&c, v) in allowed.iter().zip(vals) {
                out.set(r, c, (v - lse).exp());
            }
        }
        out
    }

    /// Display names: action ids, then `EOS`, `START`, `END`.
    pub fn label_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.classes).map(|c| c.to_string()).collect();
        names.extend(["EOS".to_string(), "START".to_string(), "END".to_string()]);
        names
    }

    /// CSV of [`TransitionMatrix::exp_normalized`] with a header row of label names.
    pub fn to_csv(&self) -> String {
        let names = self.label_names();
        let probs = self.exp_normalized();
        let mut out = String::from("from");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (r, name) in names.iter().enumerate() {
            out.push_str(name);
            for &v in probs.row(r) {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Whether `M[from, to]` is trained (everything except into START and out of END).
pub fn is_learnable(classes: usize, from: usize, to: usize) -> bool {
    to != classes + 1 && from != classes + 2
}

/// 1 for learnable entries, 0 for pinned ones.
pub fn learnable_mask(classes: usize) -> Matrix {
    let n = classes + 3;
    let mut m = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            if is_learnable(classes, r, c) {
                m.set(r, c, 1.0);
            }
        }
    }
    m
}

fn check_emissions(emissions: &Matrix, trans: &TransitionMatrix) -> Result<()> {
    if emissions.rows() == 0 {
        return Err(Error::Shape("emissions need at least one position".into()));
    }
    if emissions.cols() != trans.labels() {
        return Err(Error::Shape(format!(
            "emissions have {} labels, transitions expect {}",
            emissions.cols(),
            trans.labels()
        )));
    }
    Ok(())
}

fn check_path(path: &[ActionLabel], emissions: &Matrix, trans: &TransitionMatrix) -> Result<()> {
    check_emissions(emissions, trans)?;
    if path.len() != emissions.rows() {
        return Err(Error::Shape(format!("path of length {} for {} positions", path.len(), emissions.rows())));
    }
    if let Some(&label) = path.iter().find(|&&l| l >= trans.labels()) {
        return Err(Error::InvalidLabel { label, classes: trans.labels() });
    }
    Ok(())
}

pub fn crf_score(emissions: &Matrix, path: &[ActionLabel], trans: &TransitionMatrix, omega: f64) -> Result<f64> {
    check_path(path, emissions, trans)?;
    let emission: f64 = path.iter().enumerate().map(|(i, &y)| emissions.get(i, y)).sum();
    let mut transition = trans.get(trans.start(), path[0]) + trans.get(path[path.len() - 1], trans.end());
    for w in path.windows(2) {
        transition += trans.get(w[0], w[1]);
    }
    Ok(emission + omega * transition)
}

/// Forward recursion; `alpha[i][y]` is the log-sum of all prefixes ending in `y` at `i`.
fn forward(emissions: &Matrix, trans: &TransitionMatrix, omega: f64) -> Vec<Vec<f64>> {
    let (k, l) = emissions.shape();
    let mut alpha = vec![vec![0.0; l]; k];
    for y in 0..l {
        alpha[0][y] = emissions.get(0, y) + omega * trans.get(trans.start(), y);
    }
    let mut buf = vec![0.0; l];
    for i in 1..k {
        for y in 0..l {
            for (prev, slot) in buf.iter_mut().enumerate() {
                *slot = alpha[i - 1][prev] + omega * trans.get(prev, y);
            }
            alpha[i][y] = emissions.get(i, y) + log_sum_exp(&buf);
        }
    }
    alpha
}

fn backward(emissions: &Matrix, trans: &TransitionMatrix, omega: f64) -> Vec<Vec<f64>> {
    let (k, l) = emissions.shape();
    let mut beta = vec![vec![0.0; l]; k];
    for y in 0..l {
        beta[k - 1][y] = omega * trans.get(y, trans.end());
    }
    let mut buf = vec![0.0; l];
    for i in (0..k - 1).rev() {
        for y in 0..l {
            for (next, slot) in buf.iter_mut().enumerate() {
                *slot = omega * trans.get(y, next) + emissions.get(i + 1, next) + beta[i + 1][next];
            }
            beta[i][y] = log_sum_exp(&buf);
        }
    }
    beta
}

fn log_partition_from_alpha(alpha: &[Vec<f64>], trans: &TransitionMatrix, omega: f64) -> f64 {
    let last = alpha.last().expect("non-empty");
    let terminal: Vec<f64> = last.iter().enumerate().map(|(y, a)| a + omega * trans.get(y, trans.end())).collect();
    log_sum_exp(&terminal)
}

/// `log Σ_paths exp(score)` by the forward algorithm.
pub fn crf_log_partition(emissions: &Matrix, trans: &TransitionMatrix, omega: f64) -> Result<f64> {
    check_emissions(emissions, trans)?;
    let alpha = forward(emissions, trans, omega);
    Ok(log_partition_from_alpha(&alpha, trans, omega))
}

/// Negative log-likelihood of `gt_path`; non-negative.
pub fn crf_nll(emissions: &Matrix, gt_path: &[ActionLabel], trans: &TransitionMatrix, omega: f64) -> Result<f64> {
    let score = crf_score(emissions, gt_path, trans, omega)?;
    let log_z = crf_log_partition(emissions, trans, omega)?;
    Ok((log_z - score).max(0.0))
}

/// NLL together with its gradients with respect to the emissions and the
/// transition scores. Pinned transition entries get zero gradient.
#[derive(Clone, Debug)]
pub struct NllWithGrad {
    pub nll: f64,
    pub d_emissions: Matrix,
    pub d_transitions: Matrix,
}

pub fn crf_nll_with_grad(
    emissions: &Matrix,
    gt_path: &[ActionLabel],
    trans: &TransitionMatrix,
    omega: f64,
) -> Result<NllWithGrad> {
    check_path(gt_path, emissions, trans)?;
    let (k, l) = emissions.shape();
    let alpha = forward(emissions, trans, omega);
    let beta = backward(emissions, trans, omega);
    let log_z = log_partition_from_alpha(&alpha, trans, omega);
    let score = crf_score(emissions, gt_path, trans, omega)?;
    let n = trans.classes() + 3;

    // Expected minus observed sufficient statistics.
    let mut d_emissions = Matrix::zeros(k, l);
    let mut d_transitions = Matrix::zeros(n, n);
    for i in 0..k {
        for y in 0..l {
            let marginal = (alpha[i][y] + beta[i][y] - log_z).exp();
            d_emissions.set(i, y, marginal);
            if i == 0 {
                let v = d_transitions.get(trans.start(), y);
                d_transitions.set(trans.start(), y, v + marginal);
            }
            if i == k - 1 {
                let v = d_transitions.get(y, trans.end());
                d_transitions.set(y, trans.end(), v + marginal);
            }
        }
        if i + 1 < k {
            for a in 0..l {
                for b in 0..l {
                    let pair = (alpha[i][a] + omega * trans.get(a, b) + emissions.get(i + 1, b) + beta[i + 1][b]
                        - log_z)
                        .exp();
                    let v = d_transitions.get(a, b);
                    d_transitions.set(a, b, v + pair);
                }
            }
        }
    }
    for (i, &y) in gt_path.iter().enumerate() {
        let v = d_emissions.get(i, y);
        d_emissions.set(i, y, v - 1.0);
    }
    let mut observed = vec![(trans.start(), gt_path[0]), (gt_path[k - 1], trans.end())];
    observed.extend(gt_path.windows(2).map(|w| (w[0], w[1])));
    for (a, b) in observed {
        let v = d_transitions.get(a, b);
        d_transitions.set(a, b, v - 1.0);
    }
    for r in 0..n {
        for c in 0..n {
            let v = if is_learnable(trans.classes(), r, c) { omega * d_transitions.get(r, c) } else { 0.0 };
            d_transitions.set(r, c, v);
        }
    }
    Ok(NllWithGrad { nll: (log_z - score).max(0.0), d_emissions, d_transitions })
}

/// Highest-scoring path and its score. Ties go to the lower label id at
/// every backtracking decision.
pub fn viterbi_decode(emissions: &Matrix, trans: &TransitionMatrix, omega: f64) -> Result<(Vec<ActionLabel>, f64)> {
    check_emissions(emissions, trans)?;
    let (k, l) = emissions.shape();
    let mut delta: Vec<f64> = (0..l).map(|y| emissions.get(0, y) + omega * trans.get(trans.start(), y)).collect();
    let mut backptr = vec![vec![0usize; l]; k];
    let mut next = vec![0.0; l];
    for i in 1..k {
        for y in 0..l {
            let mut best = 0;
            let mut best_score = delta[0] + omega * trans.get(0, y);
            for prev in 1..l {
                let s = delta[prev] + omega * trans.get(prev, y);
                if s > best_score {
                    best_score = s;
                    best = prev;
                }
            }
            backptr[i][y] = best;
            next[y] = best_score + emissions.get(i, y);
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let terminal: Vec<f64> = delta.iter().enumerate().map(|(y, d)| d + omega * trans.get(y, trans.end())).collect();
    let mut y = argmax(&terminal);
    let best = terminal[y];
    let mut path = vec![0; k];
    for i in (0..k).rev() {
        path[i] = y;
        y = backptr[i][y];
    }
    Ok((path, best))
}

/// Labels strictly before the first EOS; the whole path if none.
pub fn truncate_at_eos(path: &[ActionLabel], classes: usize) -> Vec<ActionLabel> {
    let eos = eos_label(classes);
    path.iter().take_while(|&&l| l != eos).copied().collect()
}

/// Per-position argmax, the decoding used when the CRF is disabled.
pub fn greedy_decode(emissions: &Matrix) -> Vec<ActionLabel> {
    (0..emissions.rows()).map(|r| emissions.argmax_row(r)).collect()
}

/// Laplace-smoothed (`ε = 1`) log conditional probabilities counted over
/// action sequences, each closed by a transition into EOS. The START row
/// is the smoothed first-action distribution; the EOS row, never observed,
/// comes out uniform. Transitions into END are neutral (0).
pub fn init_transitions_precomputed(corpora: &[Vec<ActionLabel>], classes: usize) -> Result<TransitionMatrix> {
    const SMOOTHING: f64 = 1.0;
    let l = classes + 1;
    let eos = eos_label(classes);
    let start = classes + 1;
    let mut counts = Matrix::zeros(classes + 2, l);
    let mut observed = 0usize;
    for seq in corpora {
        if seq.is_empty() {
            continue;
        }
        if let Some(&label) = seq.iter().find(|&&a| a >= classes) {
            return Err(Error::InvalidLabel { label, classes });
        }
        let mut bump = |from: usize, to: usize| {
            let v = counts.get(from, to);
            counts.set(from, to, v + 1.0);
        };
        bump(start, seq[0]);
        for w in seq.windows(2) {
            bump(w[0], w[1]);
        }
        bump(seq[seq.len() - 1], eos);
        observed += seq.len();
    }
    if observed == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut m = TransitionMatrix::zeros(classes);
    for from in 0..classes + 2 {
        let total: f64 = counts.row(from).iter().sum();
        for to in 0..l {
            let p = (counts.get(from, to) + SMOOTHING) / (total + SMOOTHING * l as f64);
            m.set(from, to, p.ln());
        }
    }
    Ok(m)
}

/// Learnable entries i.i.d. uniform in `[-scale, scale]`.
pub fn init_transitions_random(seed: u64, classes: usize, scale: f64) -> TransitionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TransitionMatrix::zeros(classes);
    let n = classes + 3;
    for r in 0..n {
        for c in 0..n {
            let v = if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 };
            m.set(r, c, v);
        }
    }
    m
}

/// For each action row, the most likely next action (lowest index on ties).
pub fn action_row_argmax(t: &TransitionMatrix) -> Vec<usize> {
    let c = t.classes();
    (0..c)
        .map(|from| (0..c).fold(0, |best, to| if t.get(from, to) > t.get(from, best) { to } else { best }))
        .collect()
}

/// Fraction of `rows` whose action argmax agrees between `a` and `b`.
pub fn row_argmax_agreement(a: &TransitionMatrix, b: &TransitionMatrix, rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let (x, y) = (action_row_argmax(a), action_row_argmax(b));
    rows.iter().filter(|&&r| x[r] == y[r]).count() as f64 / rows.len() as f64
}

/// Deterministic SVG heat map of a matrix with entries in `[0, 1]`: one
/// `rect` per cell on a fixed white-to-navy ramp.
pub fn heatmap_svg(values: &Matrix, names: &[String]) -> String {
    const CELL: usize = 28;
    const MARGIN: usize = 56;
    let (rows, cols) = values.shape();
    let width = MARGIN + cols * CELL + 8;
    let height = MARGIN + rows * CELL + 8;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )
    .unwrap();
    for (c, name) in names.iter().enumerate().take(cols) {
        let x = MARGIN + c * CELL + CELL / 2;
        writeln!(svg, r#"<text x="{x}" y="{}" font-size="9" text-anchor="middle">{name}</text>"#, MARGIN - 6)
            .unwrap();
    }
    for r in 0..rows {
        let y = MARGIN + r * CELL;
        if let Some(name) = names.get(r) {
            writeln!(svg, r#"<text x="{}" y="{}" font-size="9" text-anchor="end">{name}</text>"#, MARGIN - 4, y + 18)
                .unwrap();
        }
        for c in 0..cols {
            let v = values.get(r, c).clamp(0.0, 1.0);
            let channel = |full: f64, dark: f64| (full + (dark - full) * v).round() as u8;
            let (red, green, blue) = (channel(255.0, 8.0), channel(255.0, 48.0), channel(255.0, 107.0));
            writeln!(
                svg,
                r##"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="#{red:02x}{green:02x}{blue:02x}"><title>{v:.4}</title></rect>"##,
                MARGIN + c * CELL
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}
