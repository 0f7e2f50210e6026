//! Model assembly, the combined training objective and the optimisation loop.

pub mod checkpoint;
pub mod eval;
pub mod gradcheck;
pub mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::crf::{
    crf_nll_with_grad, init_transitions_precomputed, init_transitions_random, CrfConfig, InitMode, TransitionMatrix,
};
use crate::datagen::Dataset;
use crate::decoder::{loss_bacr_graph, loss_duration_graph, loss_per_query_ce_graph, Decoder, DecoderConfig};
use crate::encoder::{seg_features_graph, seg_loss_graph, smooth_loss_graph, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::sequence::{eos_label, frames_to_segments, observed_len, ActionLabel, FrameSequence};
use crate::tensor::Matrix;

use self::optim::{AdamW, LrSchedule};

/// Half-width of the uniform random transition initialisation.
pub const RANDOM_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the smoothing loss.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Keep one frame in `sample_rate`, with a random phase per sample.
    pub sample_rate: usize,
    /// Observation ratios drawn uniformly per training sample.
    pub alpha_set: Vec<f64>,
    pub seed: u64,
    pub grad_clip: f64,
    /// CRF negative log-likelihood instead of per-query cross-entropy.
    pub use_crf: bool,
    pub use_bacr_past: bool,
    pub use_bacr_fut: bool,
    pub use_smooth: bool,
    /// Adds a multi-label head over future actions and drops durations.
    pub set_prediction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            warmup_epochs: 10,
            weight_decay: 1e-2,
            sample_rate: 3,
            alpha_set: vec![0.2, 0.3, 0.5],
            seed: 0,
            grad_clip: 10.0,
            use_crf: true,
            use_bacr_past: true,
            use_bacr_fut: true,
            use_smooth: true,
            set_prediction: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.sample_rate == 0 {
            return bad("batch_size and sample_rate must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.alpha_set.is_empty() || self.alpha_set.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return bad(format!("alpha_set must be a non-empty subset of (0, 1), got {:?}", self.alpha_set));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return bad("grad_clip must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub crf: CrfConfig,
    pub use_crf: bool,
    pub set_prediction: bool,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(
        classes: usize,
        feature_dim: usize,
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
        crf: &CrfConfig,
        train: &TrainConfig,
    ) -> Self {
        Self {
            classes,
            feature_dim,
            encoder: encoder.clone(),
            decoder: decoder.clone(),
            crf: *crf,
            use_crf: train.use_crf,
            set_prediction: train.set_prediction,
            seed: train.seed,
        }
    }

    pub fn queries(&self) -> usize {
        self.decoder.queries
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub transitions: ParamId,
}

impl Model {
    /// Fresh parameters. `corpus` (segment label sequences of the training
    /// videos) is required for the precomputed transition initialisation.
    pub fn new(spec: &ModelSpec, corpus: Option<&[Vec<ActionLabel>]>) -> Result<Self> {
        if spec.classes < 1 || spec.feature_dim < 1 {
            return Err(Error::Config("classes and feature_dim must be >= 1".into()));
        }
        if !spec.crf.omega.is_finite() || spec.crf.omega < 0.0 {
            return Err(Error::Config(format!("omega must be finite and >= 0, got {}", spec.crf.omega)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::default();
        let encoder = Encoder::new(&mut store, &spec.encoder, spec.feature_dim, spec.classes, &mut rng)?;
        let seg_dim = spec.encoder.stages * spec.classes;
        let decoder = Decoder::new(&mut store, &spec.decoder, seg_dim, spec.classes, spec.set_prediction, &mut rng)?;
        let init = match spec.crf.init_mode {
            InitMode::Random => init_transitions_random(rng.random(), spec.classes, RANDOM_INIT_SCALE),
            InitMode::Precomputed => {
                let corpus = corpus
                    .ok_or_else(|| Error::Config("precomputed transitions need the training corpus".into()))?;
                init_transitions_precomputed(corpus, spec.classes)?
            }
        };
        let transitions = store.add("crf.transitions", init.into_matrix(), false);
        Ok(Self { spec: spec.clone(), store, encoder, decoder, transitions })
    }

    pub fn transition_matrix(&self) -> TransitionMatrix {
        TransitionMatrix::from_matrix(self.spec.classes, self.store.value(self.transitions).clone())
            .expect("transition parameter keeps its shape")
    }
}

/// Segment label sequences of every training video.
pub fn segment_corpus(videos: &[FrameSequence]) -> Vec<Vec<ActionLabel>> {
    videos.iter().filter_map(|v| frames_to_segments(&v.labels).ok()).map(|s| s.actions).collect()
}

/// Every `rate`-th frame starting at `phase`.
pub fn subsample(video: &FrameSequence, rate: usize, phase: usize) -> FrameSequence {
    let rate = rate.max(1);
    let phase = if video.is_empty() { 0 } else { phase.min(video.len() - 1) };
    let idx: Vec<usize> = (phase..video.len()).step_by(rate).collect();
    FrameSequence {
        features: video.features.select_rows(&idx),
        labels: idx.iter().map(|&i| video.labels[i]).collect(),
    }
}

/// One supervised example: an observed prefix and positional query targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub features: Matrix,
    pub frame_labels: Vec<ActionLabel>,
    /// Future segment labels, first `K − 1`, padded with EOS to `K`.
    pub query_targets: Vec<ActionLabel>,
    /// Matching durations normalized over the retained segments, zero-padded.
    pub durations: Vec<f64>,
    /// Whether each class occurs anywhere in the future.
    pub future_set: Vec<bool>,
}

impl TrainingSample {
    /// Builds targets from an already subsampled video observed up to `floor(alpha · T)`.
    pub fn from_video(video: &FrameSequence, alpha: f64, queries: usize, classes: usize) -> Result<Self> {
        if video.is_empty() {
            return Err(Error::EmptyTrack);
        }
        let obs = observed_len(alpha, video.len()).clamp(1, video.len());
        let mut query_targets = vec![eos_label(classes); queries];
        let mut durations = vec![0.0; queries];
        let mut future_set = vec![false; classes];
        if obs < video.len() {
            let future = frames_to_segments(&video.labels[obs..])?;
            for &a in &future.actions {
                future_set[a] = true;
            }
            let keep = future.len().min(queries - 1);
            let total: usize = future.durations[..keep].iter().sum();
            for i in 0..keep {
                query_targets[i] = future.actions[i];
                durations[i] = future.durations[i] as f64 / total as f64;
            }
        }
        Ok(Self {
            features: video.features.select_rows(&(0..obs).collect::<Vec<_>>()),
            frame_labels: video.labels[..obs].to_vec(),
            query_targets,
            durations,
            future_set,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Segmentation,
    Smoothing,
    Duration,
    Future,
    Past,
    /// CRF negative log-likelihood, or per-query cross-entropy without the CRF.
    Sequence,
    MultiLabel,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Segmentation,
        LossTerm::Smoothing,
        LossTerm::Duration,
        LossTerm::Future,
        LossTerm::Past,
        LossTerm::Sequence,
        LossTerm::MultiLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Segmentation => "seg",
            LossTerm::Smoothing => "smooth",
            LossTerm::Duration => "dur",
            LossTerm::Future => "fut",
            LossTerm::Past => "past",
            LossTerm::Sequence => "crf",
            LossTerm::MultiLabel => "multilabel",
        }
    }
}

/// Terms switched on by a configuration.
pub fn active_terms(cfg: &TrainConfig) -> Vec<LossTerm> {
    LossTerm::ALL
        .into_iter()
        .filter(|t| match t {
            LossTerm::Segmentation | LossTerm::Sequence => true,
            LossTerm::Smoothing => cfg.use_smooth && cfg.lambda > 0.0,
            LossTerm::Duration => !cfg.set_prediction,
            LossTerm::Future => cfg.use_bacr_fut,
            LossTerm::Past => cfg.use_bacr_past,
            LossTerm::MultiLabel => cfg.set_prediction,
        })
        .collect()
}

/// Per-term contributions (already weighted) and their sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: Vec<(LossTerm, f64)>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|&(_, v)| v)
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        self.terms.iter().find(|(_, v)| !v.is_finite()).map(|(t, _)| t.name())
    }
}

/// Records the objective restricted to `terms` on `g`.
pub fn loss_graph(
    model: &Model,
    g: &mut Graph,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    terms: &[LossTerm],
) -> Result<(Var, LossBreakdown)> {
    let store = &model.store;
    let on = |t: LossTerm| terms.contains(&t);
    let stages = model.encoder.forward(g, store, &sample.features)?;
    let f_seg = seg_features_graph(g, &stages);
    let dec = model.decoder.forward(g, store, f_seg)?;
    let mut parts: Vec<(LossTerm, Var)> = Vec::new();
    if on(LossTerm::Segmentation) {
        parts.push((LossTerm::Segmentation, seg_loss_graph(g, &stages, &sample.frame_labels)?));
    }
    if on(LossTerm::Smoothing) {
        let s = smooth_loss_graph(g, &stages);
        parts.push((LossTerm::Smoothing, g.scale(s, cfg.lambda)));
    }
    if on(LossTerm::Duration) {
        parts.push((LossTerm::Duration, loss_duration_graph(g, dec.durations, &sample.durations)?));
    }
    if on(LossTerm::Future) || on(LossTerm::Past) {
        let last_stage = *stages.last().expect("at least one stage");
        let logits = g.value(last_stage);
        let last_frame = logits.row(logits.rows() - 1).to_vec();
        let (l_fut, l_past) = loss_bacr_graph(g, dec.future, dec.past, dec.present, &last_frame)?;
        if on(LossTerm::Future) {
            parts.push((LossTerm::Future, l_fut));
        }
        if on(LossTerm::Past) {
            parts.push((LossTerm::Past, l_past));
        }
    }
    if on(LossTerm::Sequence) {
        let term = if model.spec.use_crf {
            let emissions = g.value(dec.present).clone();
            let trans = model.transition_matrix();
            let r = crf_nll_with_grad(&emissions, &sample.query_targets, &trans, model.spec.crf.omega)?;
            let trans_var = g.param(store, model.transitions);
            g.precomputed(r.nll, &[dec.present, trans_var], vec![r.d_emissions, r.d_transitions])
        } else {
            loss_per_query_ce_graph(g, dec.present, &sample.query_targets)?
        };
        parts.push((LossTerm::Sequence, term));
    }
    if on(LossTerm::MultiLabel) {
        let logits = dec.multilabel.ok_or_else(|| Error::Mode("multi-label loss needs set_prediction".into()))?;
        let targets = Matrix::row_vector(sample.future_set.iter().map(|&b| f64::from(u8::from(b))).collect());
        parts.push((LossTerm::MultiLabel, g.bce_with_logits(logits, targets)));
    }
    let Some(&(_, mut total)) = parts.first() else {
        return Err(Error::Config("no loss terms selected".into()));
    };
    for &(_, v) in &parts[1..] {
        total = g.add(total, v);
    }
    let breakdown = LossBreakdown {
        terms: parts.iter().map(|&(t, v)| (t, g.value(v).item())).collect(),
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Objective value and breakdown, without dropout or gradients.
pub fn total_loss(model: &Model, sample: &TrainingSample, cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    Ok(loss_graph(model, &mut g, sample, cfg, &active_terms(cfg))?.1)
}

/// Objective and parameter gradients. `dropout` enables training-mode dropout.
pub fn loss_and_grads(
    model: &Model,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    terms: &[LossTerm],
    dropout: Option<ChaCha8Rng>,
) -> Result<(LossBreakdown, Vec<(ParamId, Matrix)>)> {
    let mut g = match dropout {
        Some(rng) => Graph::training(rng),
        None => Graph::new(),
    };
    let (loss, breakdown) = loss_graph(model, &mut g, sample, cfg, terms)?;
    g.backward(loss);
    Ok((breakdown, g.param_grads()))
}

/// Mean of each logged quantity over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub values: Vec<(String, f64)>,
}

impl EpochRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn total(&self) -> f64 {
        self.get("total").unwrap_or(f64::NAN)
    }
}

/// `epoch,term,value` rows.
pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,term,value\n");
    for r in records {
        for (name, v) in &r.values {
            writeln!(out, "{},{name},{v:.9}", r.epoch).unwrap();
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamW,
    pub log: Vec<EpochRecord>,
}

const STREAM_SHUFFLE: u64 = 1 << 40;

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Draws alpha and phase for one video and returns the sample plus a dropout stream.
fn draw_sample(
    video: &FrameSequence,
    cfg: &TrainConfig,
    spec: &ModelSpec,
    epoch: usize,
    index: usize,
) -> Result<(TrainingSample, ChaCha8Rng)> {
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let alpha = cfg.alpha_set[rng.random_range(0..cfg.alpha_set.len())];
    let phase = rng.random_range(0..cfg.sample_rate);
    let sub = subsample(video, cfg.sample_rate, phase);
    let sample = TrainingSample::from_video(&sub, alpha, spec.queries(), spec.classes)?;
    let dropout = ChaCha8Rng::from_rng(&mut rng);
    Ok((sample, dropout))
}

fn mean_record(epoch: usize, breakdowns: &[LossBreakdown], extra: &[(&str, f64)]) -> EpochRecord {
    let n = breakdowns.len().max(1) as f64;
    let mut values: Vec<(String, f64)> = Vec::new();
    if let Some(first) = breakdowns.first() {
        for (i, (term, _)) in first.terms.iter().enumerate() {
            values.push((term.name().to_string(), breakdowns.iter().map(|b| b.terms[i].1).sum::<f64>() / n));
        }
    }
    values.push(("total".into(), breakdowns.iter().map(|b| b.total).sum::<f64>() / n));
    values.extend(extra.iter().map(|&(k, v)| (k.to_string(), v)));
    EpochRecord { epoch, values }
}

pub fn train(model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, dataset, cfg, |_| {})
}

/// Runs `cfg.epochs` epochs of mini-batch AdamW. Epoch 0 of the log holds
/// the loss of the initial parameters. `progress` sees every record as it
/// is produced.
pub fn train_with_progress(
    mut model: Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let videos = &dataset.train;
    if videos.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let terms = active_terms(cfg);
    let spec = model.spec.clone();
    let steps_per_epoch = videos.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        peak: cfg.learning_rate,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut optimizer = AdamW::new(&model.store, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs + 1);

    let initial: Vec<LossBreakdown> = (0..videos.len())
        .into_par_iter()
        .map(|i| {
            let (sample, _) = draw_sample(&videos[i], cfg, &spec, 0, i)?;
            let mut g = Graph::new();
            Ok(loss_graph(&model, &mut g, &sample, cfg, &terms)?.1)
        })
        .collect::<Result<_>>()?;
    if let Some((i, term)) = initial.iter().enumerate().find_map(|(i, b)| b.first_non_finite().map(|t| (i, t))) {
        return Err(Error::NonFiniteLoss { term: term.into(), epoch: 0, step: i });
    }
    let record = mean_record(0, &initial, &[("lr", 0.0)]);
    progress(&record);
    log.push(record);

    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..videos.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(STREAM_SHUFFLE + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_losses = Vec::with_capacity(videos.len());
        let mut norm_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(LossBreakdown, Vec<(ParamId, Matrix)>)> = batch
                .par_iter()
                .map(|&i| {
                    let (sample, dropout) = draw_sample(&videos[i], cfg, &spec, epoch, i)?;
                    loss_and_grads(&model, &sample, cfg, &terms, Some(dropout))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(&model.store);
            for (breakdown, g) in &results {
                if let Some(term) = breakdown.first_non_finite() {
                    return Err(Error::NonFiniteLoss { term: term.into(), epoch, step });
                }
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            norm_sum += grads.clip_global_norm(cfg.grad_clip);
            lr = schedule.at(step);
            optimizer.update(&mut model.store, &grads, lr);
            step += 1;
            epoch_losses.extend(results.into_iter().map(|(b, _)| b));
        }
        let record = mean_record(epoch, &epoch_losses, &[("lr", lr), ("grad_norm", norm_sum / steps_per_epoch as f64)]);
        progress(&record);
        log.push(record);
    }
    Ok(TrainOutcome { model, optimizer, log })
}
