//! Multi-stage temporal encoder producing framewise action logits.
//!
//! Each stage projects its input to `hidden_dim`, runs a stack of layers
//! (windowed attention, strided-global attention, feed-forward), and maps
//! back to `C` logits. Stage `s > 1` reads the softmax of stage `s − 1`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, MASKED};
use crate::params::ParamStore;
use crate::sequence::ActionLabel;
use crate::tensor::Matrix;

/// Truncation threshold of the smoothing loss.
pub const SMOOTH_TAU: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stages: usize,
    pub layers_per_stage: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    /// Width of the non-overlapping local attention windows.
    pub window: usize,
    /// Frames attend globally to frames with the same index modulo this stride.
    pub global_stride: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { stages: 2, layers_per_stage: 1, heads: 2, hidden_dim: 32, window: 16, global_stride: 8, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.layers_per_stage == 0 {
            return Err(Error::Config("encoder needs at least one stage and one layer".into()));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.window < 2 || self.global_stride == 0 {
            return Err(Error::Config("encoder window must be >= 2 and global_stride >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-stage `T_obs × C` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct StageLogits {
    stages: Vec<Matrix>,
}

impl StageLogits {
    pub fn new(stages: Vec<Matrix>) -> Result<Self> {
        let Some(first) = stages.first() else {
            return Err(Error::Shape("stage logits need at least one stage".into()));
        };
        if stages.iter().any(|s| s.shape() != first.shape()) {
            return Err(Error::Shape("stage logits disagree in shape".into()));
        }
        Ok(Self { stages })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn frames(&self) -> usize {
        self.stages[0].rows()
    }

    pub fn classes(&self) -> usize {
        self.stages[0].cols()
    }

    pub fn stage(&self, s: usize) -> &Matrix {
        &self.stages[s]
    }

    pub fn last(&self) -> &Matrix {
        self.stages.last().expect("non-empty")
    }

    /// Framewise argmax of the final stage.
    pub fn predicted_labels(&self) -> Vec<ActionLabel> {
        let last = self.last();
        (0..last.rows()).map(|r| last.argmax_row(r)).collect()
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    local: MultiHeadAttention,
    local_norm: LayerNorm,
    global: MultiHeadAttention,
    global_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

#[derive(Clone, Debug)]
struct Stage {
    input: Linear,
    layers: Vec<EncoderLayer>,
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub input_dim: usize,
    pub classes: usize,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        config: &EncoderConfig,
        input_dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let stages = (0..config.stages)
            .map(|s| {
                let name = format!("encoder.stage{s}");
                let in_dim = if s == 0 { input_dim } else { classes };
                let layers = (0..config.layers_per_stage)
                    .map(|l| {
                        let name = format!("{name}.layer{l}");
                        EncoderLayer {
                            local: MultiHeadAttention::new(store, &format!("{name}.local"), h, config.heads, rng),
                            local_norm: LayerNorm::new(store, &format!("{name}.local_norm"), h),
                            global: MultiHeadAttention::new(store, &format!("{name}.global"), h, config.heads, rng),
                            global_norm: LayerNorm::new(store, &format!("{name}.global_norm"), h),
                            ffn: FeedForward::new(store, &format!("{name}.ffn"), h, 2 * h, rng),
                            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), h),
                        }
                    })
                    .collect();
                Stage {
                    input: Linear::new(store, &format!("{name}.input"), in_dim, h, rng),
                    layers,
                    output: Linear::new(store, &format!("{name}.output"), h, classes, rng),
                }
            })
            .collect();
        Ok(Self { config: config.clone(), input_dim, classes, stages })
    }

    /// Records the forward pass on `g`; returns one `T × C` logit node per stage.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &Matrix) -> Result<Vec<Var>> {
        if features.rows() == 0 {
            return Err(Error::Shape("encoder needs at least one frame".into()));
        }
        if features.cols() != self.input_dim {
            return Err(Error::Shape(format!("expected {} feature columns, got {}", self.input_dim, features.cols())));
        }
        if !features.is_finite() {
            return Err(Error::NonFiniteFeatures);
        }
        let t = features.rows();
        let local_mask = block_mask(t, |a, b| a / self.config.window == b / self.config.window);
        let global_mask = block_mask(t, |a, b| a % self.config.global_stride == b % self.config.global_stride);
        let mut input = g.constant(features.clone());
        let mut outputs = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                input = g.softmax(input);
            }
            let mut x = stage.input.forward(g, store, input);
            for layer in &stage.layers {
                x = layer.forward(g, store, x, local_mask.as_ref(), global_mask.as_ref(), self.config.dropout);
            }
            let logits = stage.output.forward(g, store, x);
            outputs.push(logits);
            input = logits;
        }
        Ok(outputs)
    }

    /// Inference-only forward pass.
    pub fn encode(&self, store: &ParamStore, features: &Matrix) -> Result<StageLogits> {
        let mut g = Graph::new();
        let vars = self.forward(&mut g, store, features)?;
        StageLogits::new(vars.iter().map(|&v| g.value(v).clone()).collect())
    }
}

impl EncoderLayer {
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        local_mask: Option<&Matrix>,
        global_mask: Option<&Matrix>,
        dropout: f64,
    ) -> Var {
        let a = self.local.forward(g, store, x, x, local_mask);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let x = self.local_norm.forward(g, store, x);
        let a = self.global.forward(g, store, x, x, global_mask);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let x = self.global_norm.forward(g, store, x);
        let f = self.ffn.forward(g, store, x, dropout);
        let x = g.add(x, f);
        self.ffn_norm.forward(g, store, x)
    }
}

/// Additive attention mask; `None` when every pair is allowed.
fn block_mask(t: usize, allowed: impl Fn(usize, usize) -> bool) -> Option<Matrix> {
    let mut m = Matrix::zeros(t, t);
    let mut any_masked = false;
    for a in 0..t {
        for b in 0..t {
            if !allowed(a, b) {
                m.set(a, b, MASKED);
                any_masked = true;
            }
        }
    }
    any_masked.then_some(m)
}

fn check_labels(labels: &[ActionLabel], frames: usize, classes: usize) -> Result<()> {
    if labels.len() != frames {
        return Err(Error::Shape(format!("{} labels for {frames} frames", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    Ok(())
}

/// Mean over stages of framewise cross-entropy.
pub fn seg_loss_graph(g: &mut Graph, stages: &[Var], labels: &[ActionLabel]) -> Result<Var> {
    let (frames, classes) = g.value(stages[0]).shape();
    check_labels(labels, frames, classes)?;
    let mut total = g.cross_entropy(stages[0], labels);
    for &s in &stages[1..] {
        let l = g.cross_entropy(s, labels);
        total = g.add(total, l);
    }
    Ok(g.scale(total, 1.0 / stages.len() as f64))
}

/// Mean over stages, frames and classes of `min(|Δ log p|, τ)²`, with the
/// previous frame treated as a constant. Zero for fewer than two frames.
pub fn smooth_loss_graph(g: &mut Graph, stages: &[Var]) -> Var {
    let frames = g.value(stages[0]).rows();
    if frames < 2 {
        return g.constant(Matrix::scalar(0.0));
    }
    let mut total: Option<Var> = None;
    for &s in stages {
        let ls = g.log_softmax(s);
        let cur = g.slice_rows(ls, 1, frames - 1);
        let prev = g.slice_rows(ls, 0, frames - 1);
        let prev = g.detach(prev);
        let d = g.sub(cur, prev);
        let sq = g.trunc_square(d, SMOOTH_TAU);
        let m = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, m),
            None => m,
        });
    }
    g.scale(total.expect("at least one stage"), 1.0 / stages.len() as f64)
}

/// Per-frame concatenation of stage logits in stage order.
pub fn seg_features_graph(g: &mut Graph, stages: &[Var]) -> Var {
    if stages.len() == 1 {
        stages[0]
    } else {
        g.concat_cols(stages)
    }
}

fn constants(g: &mut Graph, logits: &StageLogits) -> Vec<Var> {
    (0..logits.num_stages()).map(|s| g.constant(logits.stage(s).clone())).collect()
}

pub fn seg_loss(logits: &StageLogits, labels: &[ActionLabel]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = constants(&mut g, logits);
    let loss = seg_loss_graph(&mut g, &vars, labels)?;
    Ok(g.value(loss).item())
}

pub fn smooth_loss(logits: &StageLogits) -> f64 {
    let mut g = Graph::new();
    let vars = constants(&mut g, logits);
    let loss = smooth_loss_graph(&mut g, &vars);
    g.value(loss).item()
}

/// `T_obs × (S·C)` decoder input.
pub fn build_seg_features(logits: &StageLogits) -> Matrix {
    let (t, c) = (logits.frames(), logits.classes());
    let s = logits.num_stages();
    let mut out = Matrix::zeros(t, s * c);
    for stage in 0..s {
        for r in 0..t {
            out.row_mut(r)[stage * c..(stage + 1) * c].copy_from_slice(logits.stage(stage).row(r));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn small_config() -> EncoderConfig {
        EncoderConfig { stages: 2, layers_per_stage: 1, heads: 2, hidden_dim: 8, window: 4, global_stride: 2, dropout: 0.0 }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_finiteness_over_random_draws() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::default();
            let enc = Encoder::new(&mut store, &small_config(), 5, 3, &mut rng).unwrap();
            let x = random_matrix(&mut rng, 16, 5, 2.0);
            let out = enc.encode(&store, &x).unwrap();
            assert_eq!((out.num_stages(), out.frames(), out.classes()), (2, 16, 3));
            assert!((0..2).all(|s| out.stage(s).is_finite()));
        }
    }

    #[test]
    fn single_frame_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let enc = Encoder::new(&mut store, &small_config(), 5, 3, &mut rng).unwrap();
        let out = enc.encode(&store, &random_matrix(&mut rng, 1, 5, 1.0)).unwrap();
        assert_eq!((out.num_stages(), out.frames(), out.classes()), (2, 1, 3));
    }

    #[test]
    fn zero_parameters_yield_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let enc = Encoder::new(&mut store, &small_config(), 5, 3, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).scale_assign(0.0);
        }
        let bias = [0.3, -1.0, 2.0];
        for stage in &enc.stages {
            store.value_mut(stage.output.bias).as_mut_slice().copy_from_slice(&bias);
        }
        let out = enc.encode(&store, &random_matrix(&mut rng, 7, 5, 3.0)).unwrap();
        for s in 0..2 {
            for r in 0..7 {
                assert_eq!(out.stage(s).row(r), &bias);
            }
        }
    }

    #[test]
    fn rejects_non_finite_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::default();
        let enc = Encoder::new(&mut store, &small_config(), 2, 3, &mut rng).unwrap();
        let x = Matrix::from_vec(2, 2, vec![0.0, f64::NAN, 1.0, 1.0]).unwrap();
        let err = enc.encode(&store, &x).unwrap_err();
        assert_eq!(err.to_string(), "non-finite features");
    }

    #[test]
    fn seg_loss_closed_forms() {
        let uniform = StageLogits::new(vec![Matrix::zeros(5, 4)]).unwrap();
        assert!((seg_loss(&uniform, &[0, 1, 2, 3, 0]).unwrap() - 4f64.ln()).abs() < 1e-12);

        let labels = [2, 0, 1];
        let mut saturated = Matrix::zeros(3, 3);
        for (r, &l) in labels.iter().enumerate() {
            saturated.set(r, l, 1e4);
        }
        let two = StageLogits::new(vec![saturated.clone(), saturated]).unwrap();
        assert!(seg_loss(&two, &labels).unwrap() < 1e-3);
        assert!(matches!(seg_loss(&two, &[0, 3, 1]), Err(Error::InvalidLabel { .. })));
    }

    #[test]
    fn seg_loss_averages_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 6, 3, 2.0);
        let b = random_matrix(&mut rng, 6, 3, 2.0);
        let labels = [0, 1, 2, 2, 1, 0];
        let l1 = seg_loss(&StageLogits::new(vec![a.clone()]).unwrap(), &labels).unwrap();
        let l2 = seg_loss(&StageLogits::new(vec![b.clone()]).unwrap(), &labels).unwrap();
        let both = seg_loss(&StageLogits::new(vec![a, b]).unwrap(), &labels).unwrap();
        assert!((both - (l1 + l2) / 2.0).abs() < 1e-12);
    }

    fn log_softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.iter().map(|v| v - z).collect()
    }

    #[test]
    fn smooth_loss_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let stages: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, 6, 4, 6.0)).collect();
            let mut expected = 0.0;
            for s in &stages {
                for t in 1..6 {
                    let (cur, prev) = (log_softmax(s.row(t)), log_softmax(s.row(t - 1)));
                    for c in 0..4 {
                        expected += (cur[c] - prev[c]).abs().min(SMOOTH_TAU).powi(2);
                    }
                }
            }
            expected /= (2 * 5 * 4) as f64;
            let got = smooth_loss(&StageLogits::new(stages).unwrap());
            assert!((got - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_loss_degenerate_cases() {
        let constant = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(smooth_loss(&StageLogits::new(vec![constant]).unwrap()), 0.0);
        assert_eq!(smooth_loss(&StageLogits::new(vec![Matrix::zeros(1, 3)]).unwrap()), 0.0);
        let jump = Matrix::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]).unwrap();
        assert!((smooth_loss(&StageLogits::new(vec![jump]).unwrap()) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn seg_features_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 4, 3, 1.0);
        let b = random_matrix(&mut rng, 4, 3, 1.0);
        let single = build_seg_features(&StageLogits::new(vec![a.clone()]).unwrap());
        assert_eq!(single, a);
        let f = build_seg_features(&StageLogits::new(vec![a.clone(), b.clone()]).unwrap());
        assert_eq!(f.cols(), 6);
        assert_eq!(f.slice_cols(0, 3), a);
        assert_eq!(f.slice_cols(3, 3), b);
    }

    fn changed_frames(config: EncoderConfig, edited: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::default();
        let enc = Encoder::new(&mut store, &config, 3, 2, &mut rng).unwrap();
        let x = random_matrix(&mut rng, 8, 3, 1.0);
        let base = enc.encode(&store, &x).unwrap();
        let mut y = x.clone();
        y.row_mut(edited).copy_from_slice(&[9.0, -9.0, 4.0]);
        let changed = enc.encode(&store, &y).unwrap();
        (0..8).filter(|&r| base.stage(0).row(r) != changed.stage(0).row(r)).collect()
    }

    #[test]
    fn attention_reach_follows_window_and_stride() {
        let base = EncoderConfig { stages: 1, ..small_config() };
        // A stride covering the whole clip leaves only the local window.
        assert_eq!(changed_frames(EncoderConfig { window: 4, global_stride: 8, ..base.clone() }, 5), vec![4, 5, 6, 7]);
        // Window {4, 5}, then residues 0 and 1 modulo 4.
        assert_eq!(changed_frames(EncoderConfig { window: 2, global_stride: 4, ..base }, 5), vec![0, 1, 4, 5]);
    }
}
