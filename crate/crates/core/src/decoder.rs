//! Query-based parallel decoder.
//!
//! `K` learnable queries attend to the projected encoder features and are
//! read out by independent linear heads: present actions, the next and
//! previous action of each query (bi-directional context), and durations.
//! All label heads emit `C + 1` logits with EOS at index `C`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::sequence::ActionLabel;
use crate::tensor::{softmax_rows, Matrix};

/// Floor applied to target probabilities inside KL terms.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationMode {
    /// Reads the query and the softmax of its present-action logits.
    Dependent,
    /// Reads the query only.
    Independent,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Number of anticipation queries `K`.
    pub queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    /// Rows of the learned positional table; later frames reuse the last row.
    pub max_positions: usize,
    pub duration_mode: DurationMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            queries: 8,
            layers: 2,
            heads: 2,
            hidden_dim: 64,
            dropout: 0.1,
            max_positions: 256,
            duration_mode: DurationMode::Dependent,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries < 2 {
            return Err(Error::Config(format!("decoder needs at least 2 queries, got {}", self.queries)));
        }
        if self.layers == 0 || self.max_positions == 0 {
            return Err(Error::Config("decoder needs at least one layer and one position".into()));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("decoder dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
}

/// Graph nodes of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    /// `K × D_dec` decoded queries.
    pub queries: Var,
    pub present: Var,
    pub future: Var,
    pub past: Var,
    /// `1 × K` normalized durations.
    pub durations: Var,
    /// `1 × C` set-prediction logits (max over queries), when enabled.
    pub multilabel: Option<Var>,
}

/// Plain-value counterpart of [`DecoderVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutputs {
    pub q_prime: Matrix,
    pub a_pres: Matrix,
    pub a_fut: Matrix,
    pub a_past: Matrix,
    pub d_hat: Vec<f64>,
    pub multilabel: Option<Vec<f64>>,
}

impl DecoderOutputs {
    pub fn from_graph(g: &Graph, v: &DecoderVars) -> Self {
        Self {
            q_prime: g.value(v.queries).clone(),
            a_pres: g.value(v.present).clone(),
            a_fut: g.value(v.future).clone(),
            a_past: g.value(v.past).clone(),
            d_hat: g.value(v.durations).as_slice().to_vec(),
            multilabel: v.multilabel.map(|m| g.value(m).as_slice().to_vec()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub classes: usize,
    /// Width of the encoder features, `S · C`.
    pub seg_dim: usize,
    pub positions: ParamId,
    pub enc2dec: Linear,
    pub queries: ParamId,
    layers: Vec<DecoderLayer>,
    pub present: Linear,
    pub future: Linear,
    pub past: Linear,
    pub duration: Linear,
    pub multilabel: Option<Linear>,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        config: &DecoderConfig,
        seg_dim: usize,
        classes: usize,
        multilabel: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let labels = classes + 1;
        let pos_values = (0..config.max_positions * seg_dim).map(|_| rng.random_range(-0.02..0.02)).collect();
        let positions =
            store.add("decoder.positions", Matrix::from_vec(config.max_positions, seg_dim, pos_values)?, false);
        let enc2dec = Linear::new(store, "decoder.enc2dec", seg_dim, h, rng);
        let queries = store.add_uniform("decoder.queries", config.queries, h, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("decoder.layer{l}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), h, config.heads, rng),
                    self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), h),
                    cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), h, config.heads, rng),
                    cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), h),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), h, 2 * h, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), h),
                }
            })
            .collect();
        let present = Linear::new(store, "decoder.present", h, labels, rng);
        let future = Linear::new(store, "decoder.future", h, labels, rng);
        let past = Linear::new(store, "decoder.past", h, labels, rng);
        let duration_in = match config.duration_mode {
            DurationMode::Dependent => h + labels,
            DurationMode::Independent => h,
        };
        let duration = Linear::new(store, "decoder.duration", duration_in, 1, rng);
        let multilabel = multilabel.then(|| Linear::new(store, "decoder.multilabel", h, classes, rng));
        Ok(Self {
            config: config.clone(),
            classes,
            seg_dim,
            positions,
            enc2dec,
            queries,
            layers,
            present,
            future,
            past,
            duration,
            multilabel,
        })
    }

    /// `Linear(F_seg + P)` with positions clamped to the table.
    pub fn project_encoder(&self, g: &mut Graph, store: &ParamStore, f_seg: Var) -> Result<Var> {
        let (t, width) = g.value(f_seg).shape();
        if width != self.seg_dim {
            return Err(Error::Shape(format!("encoder features have width {width}, decoder expects {}", self.seg_dim)));
        }
        let last = self.config.max_positions - 1;
        let idx: Vec<usize> = (0..t).map(|i| i.min(last)).collect();
        let table = g.param(store, self.positions);
        let pos = g.gather_rows(table, &idx);
        let x = g.add(f_seg, pos);
        Ok(self.enc2dec.forward(g, store, x))
    }

    /// Runs the query stack against projected features `f_prime`.
    pub fn decode_queries(&self, g: &mut Graph, store: &ParamStore, f_prime: Var) -> Var {
        let mut q = g.param(store, self.queries);
        let dropout = self.config.dropout;
        for layer in &self.layers {
            let a = layer.self_attn.forward(g, store, q, q, None);
            let a = g.dropout(a, dropout);
            let x = g.add(q, a);
            let x = layer.self_norm.forward(g, store, x);
            let c = layer.cross_attn.forward(g, store, x, f_prime, None);
            let c = g.dropout(c, dropout);
            let x = g.add(x, c);
            let x = layer.cross_norm.forward(g, store, x);
            let f = layer.ffn.forward(g, store, x, dropout);
            let x = g.add(x, f);
            q = layer.ffn_norm.forward(g, store, x);
        }
        q
    }

    /// `1 × K` durations: per-query scalar, exp-normalized across queries.
    pub fn head_duration(&self, g: &mut Graph, store: &ParamStore, q_prime: Var, present: Var) -> Var {
        let input = match self.config.duration_mode {
            DurationMode::Dependent => {
                let p = g.softmax(present);
                g.concat_cols(&[q_prime, p])
            }
            DurationMode::Independent => q_prime,
        };
        let raw = self.duration.forward(g, store, input);
        let raw = g.transpose(raw);
        g.softmax(raw)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_seg: Var) -> Result<DecoderVars> {
        let f_prime = self.project_encoder(g, store, f_seg)?;
        let queries = self.decode_queries(g, store, f_prime);
        let present = self.present.forward(g, store, queries);
        let future = self.future.forward(g, store, queries);
        let past = self.past.forward(g, store, queries);
        let durations = self.head_duration(g, store, queries, present);
        let multilabel = self.multilabel.as_ref().map(|head| {
            let logits = head.forward(g, store, queries);
            g.col_max(logits)
        });
        Ok(DecoderVars { queries, present, future, past, durations, multilabel })
    }

    /// Inference-only pass over plain encoder features.
    pub fn decode(&self, store: &ParamStore, f_seg: &Matrix) -> Result<DecoderOutputs> {
        let mut g = Graph::new();
        let f = g.constant(f_seg.clone());
        let vars = self.forward(&mut g, store, f)?;
        Ok(DecoderOutputs::from_graph(&g, &vars))
    }
}

/// `(1/K) Σ (d_i − d̂_i)²` against zero-padded targets.
pub fn loss_duration_graph(g: &mut Graph, d_hat: Var, d_gt: &[f64]) -> Result<Var> {
    let k = g.value(d_hat).len();
    if d_gt.len() != k {
        return Err(Error::Shape(format!("{} duration targets for {k} queries", d_gt.len())));
    }
    let target = g.constant(Matrix::row_vector(d_gt.to_vec()));
    let diff = g.sub(d_hat, target);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Log-probabilities of a fixed target distribution, floored at [`KL_EPS`].
fn target_log_probs(logits: &Matrix) -> Matrix {
    softmax_rows(logits).map(|p| p.max(KL_EPS).ln())
}

/// `Σ_rows KL(softmax(logits) ∥ target)` with `target` given as constant log-probabilities.
fn kl_to_constant(g: &mut Graph, logits: Var, target_log: Matrix) -> Var {
    let lp = g.log_softmax(logits);
    let p = g.softmax(logits);
    let t = g.stop_gradient(target_log);
    let diff = g.sub(lp, t);
    let terms = g.mul(p, diff);
    g.sum(terms)
}

/// Appends a `-∞` EOS logit to the encoder's last-frame logits.
pub fn extend_with_eos(last_frame: &[f64]) -> Matrix {
    let mut row = last_frame.to_vec();
    row.push(f64::NEG_INFINITY);
    Matrix::row_vector(row)
}

/// Bi-directional context losses `(L_fut, L_past)`. Targets come from the
/// neighbouring present-action logits and from `last_frame_logits`
/// (`1 × C`, final encoder stage at the last observed frame); they carry no
/// gradient.
pub fn loss_bacr_graph(
    g: &mut Graph,
    future: Var,
    past: Var,
    present: Var,
    last_frame_logits: &[f64],
) -> Result<(Var, Var)> {
    let pres = g.value(present).clone();
    let (k, labels) = pres.shape();
    if k < 2 {
        return Err(Error::Shape("context losses need at least 2 queries".into()));
    }
    if last_frame_logits.len() + 1 != labels {
        return Err(Error::Shape(format!(
            "last-frame logits have {} classes, heads have {labels} labels",
            last_frame_logits.len()
        )));
    }
    let fut_rows = g.slice_rows(future, 0, k - 1);
    let fut_target = target_log_probs(&pres.select_rows(&(1..k).collect::<Vec<_>>()));
    let l_fut = kl_to_constant(g, fut_rows, fut_target);

    let first = g.slice_rows(past, 0, 1);
    let first_target = target_log_probs(&extend_with_eos(last_frame_logits));
    let l_first = kl_to_constant(g, first, first_target);
    let rest = g.slice_rows(past, 1, k - 1);
    let rest_target = target_log_probs(&pres.select_rows(&(0..k - 1).collect::<Vec<_>>()));
    let l_rest = kl_to_constant(g, rest, rest_target);
    let l_past = g.add(l_first, l_rest);
    Ok((l_fut, l_past))
}

/// Mean cross-entropy of each query against its positional target.
pub fn loss_per_query_ce_graph(g: &mut Graph, present: Var, targets: &[ActionLabel]) -> Result<Var> {
    let (k, labels) = g.value(present).shape();
    if targets.len() != k {
        return Err(Error::Shape(format!("{} targets for {k} queries", targets.len())));
    }
    if let Some(&label) = targets.iter().find(|&&t| t >= labels) {
        return Err(Error::InvalidLabel { label, classes: labels });
    }
    Ok(g.cross_entropy(present, targets))
}

pub fn loss_duration(d_hat: &[f64], d_gt: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let d = g.constant(Matrix::row_vector(d_hat.to_vec()));
    let l = loss_duration_graph(&mut g, d, d_gt)?;
    Ok(g.value(l).item())
}

pub fn loss_bacr(a_fut: &Matrix, a_past: &Matrix, a_pres: &Matrix, last_frame_logits: &[f64]) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let (f, p, q) = (g.constant(a_fut.clone()), g.constant(a_past.clone()), g.constant(a_pres.clone()));
    let (l_fut, l_past) = loss_bacr_graph(&mut g, f, p, q, last_frame_logits)?;
    Ok((g.value(l_fut).item(), g.value(l_past).item()))
}

pub fn loss_per_query_ce(a_pres: &Matrix, targets: &[ActionLabel]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(a_pres.clone());
    let l = loss_per_query_ce_graph(&mut g, p, targets)?;
    Ok(g.value(l).item())
}

/// Plain-value KL divergence in nats, with the target floored at [`KL_EPS`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_EPS).ln())).sum()
}
