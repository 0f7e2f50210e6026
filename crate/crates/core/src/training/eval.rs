//! Anticipation protocol over a grid of observation and prediction ratios.
//!
//! Videos are subsampled at the training rate (phase 0). For each `alpha`
//! the predictor sees the first `floor(alpha · T)` frames; its action list
//! is expanded over the whole remaining video and the first
//! `ceil(beta · T)` frames are scored against the ground truth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crf::{greedy_decode, truncate_at_eos, viterbi_decode};
use crate::encoder::build_seg_features;
use crate::error::{Error, Result};
use crate::metrics::{
    decode_to_frames, map_multilabel, ClassAccuracy, ClassGroup, MetricsReport, MocEntry, SegmentationAccumulator,
};
use crate::sequence::{frames_to_segments, ActionLabel, FrameSequence, WindowSpec};

use super::{subsample, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha_set: Vec<f64>,
    pub beta_set: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha_set: vec![0.2, 0.3], beta_set: vec![0.1, 0.2, 0.3, 0.5] }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_set.is_empty() || self.beta_set.is_empty() {
            return Err(Error::Config("alpha_set and beta_set must be non-empty".into()));
        }
        for &a in &self.alpha_set {
            for &b in &self.beta_set {
                // Any positive length checks the ratio bounds.
                WindowSpec { alpha: a, beta: b, total_frames: 1000 }.validate()?;
            }
        }
        Ok(())
    }
}

/// A forecast from one observed prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Future actions up to (excluding) the first EOS.
    pub actions: Vec<ActionLabel>,
    /// One weight per action; renormalized during expansion.
    pub durations: Vec<f64>,
    /// Label used when `actions` is empty.
    pub fallback: ActionLabel,
    /// Framewise segmentation of the observed prefix.
    pub observed: Vec<ActionLabel>,
    /// Per-class scores for set prediction.
    pub class_scores: Option<Vec<f64>>,
}

/// Anything that forecasts from the first `observed` frames of a video.
/// Implementations must not read labels or features past `observed`,
/// except for deliberate oracles in tests.
pub trait Predictor: Sync {
    fn predict(&self, video: &FrameSequence, observed: usize) -> Result<Prediction>;
}

impl Model {
    /// Forecast from an observed feature window.
    pub fn predict_window(&self, features: &crate::tensor::Matrix) -> Result<Prediction> {
        let logits = self.encoder.encode(&self.store, features)?;
        let observed = logits.predicted_labels();
        let out = self.decoder.decode(&self.store, &build_seg_features(&logits))?;
        let path = if self.spec.use_crf {
            viterbi_decode(&out.a_pres, &self.transition_matrix(), self.spec.crf.omega)?.0
        } else {
            greedy_decode(&out.a_pres)
        };
        let actions = truncate_at_eos(&path, self.spec.classes);
        let durations = if self.spec.set_prediction {
            vec![1.0; actions.len()]
        } else {
            out.d_hat[..actions.len()].to_vec()
        };
        let class_scores = out.multilabel.map(|v| v.into_iter().map(crate::autograd::sigmoid).collect());
        Ok(Prediction { actions, durations, fallback: *observed.last().expect("non-empty"), observed, class_scores })
    }
}

impl Predictor for Model {
    fn predict(&self, video: &FrameSequence, observed: usize) -> Result<Prediction> {
        self.predict_window(&video.slice(0, observed).features)
    }
}

#[derive(Clone, Debug)]
struct VideoScores {
    moc: Vec<ClassAccuracy>,
    seg: SegmentationAccumulator,
    set: Option<(Vec<f64>, Vec<bool>)>,
}

fn score_video(
    predictor: &dyn Predictor,
    video: &FrameSequence,
    classes: usize,
    cfg: &EvalConfig,
    sample_rate: usize,
) -> Result<VideoScores> {
    let sub = subsample(video, sample_rate, 0);
    let t = sub.len();
    let mut moc = vec![ClassAccuracy::new(classes); cfg.alpha_set.len() * cfg.beta_set.len()];
    let mut seg = SegmentationAccumulator::default();
    let mut set = None;
    for (ai, &alpha) in cfg.alpha_set.iter().enumerate() {
        let obs = WindowSpec::new(alpha, cfg.beta_set[0], t)?.observed_len();
        let pred = predictor.predict(&sub, obs)?;
        if pred.observed.len() != obs {
            return Err(Error::Shape(format!("segmentation of {} frames for {obs} observed", pred.observed.len())));
        }
        seg.add(&pred.observed, &sub.labels[..obs])?;
        let track = decode_to_frames(&pred.actions, &pred.durations, t - obs, pred.fallback);
        for (bi, &beta) in cfg.beta_set.iter().enumerate() {
            let fut = WindowSpec::new(alpha, beta, t)?.future_len();
            moc[ai * cfg.beta_set.len() + bi].add(&track[..fut], &sub.labels[obs..obs + fut])?;
        }
        if ai == 0 {
            if let Some(scores) = pred.class_scores {
                let mut present = vec![false; classes];
                for a in frames_to_segments(&sub.labels[obs..])?.actions {
                    present[a] = true;
                }
                set = Some((scores, present));
            }
        }
    }
    Ok(VideoScores { moc, seg, set })
}

/// Scores `predictor` on `videos`. MoC counts are pooled over videos per
/// `(alpha, beta)`; segmentation scores pool every observed window.
/// `groups` enables mAP for predictors that emit class scores.
pub fn evaluate(
    predictor: &dyn Predictor,
    videos: &[FrameSequence],
    classes: usize,
    cfg: &EvalConfig,
    sample_rate: usize,
    groups: Option<&[ClassGroup]>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Config("no videos to evaluate".into()));
    }
    let per_video: Vec<VideoScores> = videos
        .par_iter()
        .map(|v| score_video(predictor, v, classes, cfg, sample_rate))
        .collect::<Result<_>>()?;
    let mut moc = vec![ClassAccuracy::new(classes); cfg.alpha_set.len() * cfg.beta_set.len()];
    let mut seg = SegmentationAccumulator::default();
    let mut scores = Vec::new();
    let mut sets = Vec::new();
    for v in &per_video {
        for (acc, other) in moc.iter_mut().zip(&v.moc) {
            acc.merge(other);
        }
        seg.merge(&v.seg);
        if let Some((s, p)) = &v.set {
            scores.push(s.clone());
            sets.push(p.clone());
        }
    }
    let mut report = MetricsReport {
        moc: Vec::with_capacity(moc.len()),
        seg_acc: seg.accuracy(),
        edit: seg.edit(),
        ..Default::default()
    };
    [report.f1_10, report.f1_25, report.f1_50] = seg.f1();
    for (ai, &alpha) in cfg.alpha_set.iter().enumerate() {
        for (bi, &beta) in cfg.beta_set.iter().enumerate() {
            report.moc.push(MocEntry { alpha, beta, value: moc[ai * cfg.beta_set.len() + bi].mean() });
        }
    }
    if let Some(groups) = groups {
        if scores.len() == videos.len() {
            let (all, freq, rare) = map_multilabel(&scores, &sets, groups)?;
            (report.map_all, report.map_freq, report.map_rare) = (all, freq, rare);
        }
    }
    Ok(report)
}

/// Splits classes at the median of their segment counts in `videos`:
/// classes at or above the median are frequent.
pub fn frequency_groups(videos: &[FrameSequence], classes: usize) -> Vec<ClassGroup> {
    let mut counts = vec![0usize; classes];
    for v in videos {
        if let Ok(seq) = frames_to_segments(&v.labels) {
            for a in seq.actions {
                counts[a] += 1;
            }
        }
    }
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let median = sorted[classes / 2];
    counts.iter().map(|&c| if c >= median { ClassGroup::Frequent } else { ClassGroup::Rare }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    /// Reads the future labels straight from the video.
    struct Oracle;

    impl Predictor for Oracle {
        fn predict(&self, video: &FrameSequence, observed: usize) -> Result<Prediction> {
            let future = frames_to_segments(&video.labels[observed..])?;
            Ok(Prediction {
                actions: future.actions.clone(),
                durations: future.durations.iter().map(|&d| d as f64).collect(),
                fallback: 0,
                observed: video.labels[..observed].to_vec(),
                class_scores: None,
            })
        }
    }

    fn videos() -> Vec<FrameSequence> {
        (0..3)
            .map(|k| {
                let labels: Vec<usize> = (0..90).map(|i| (i / (10 + 5 * k) + k) % 4).collect();
                FrameSequence::new(Matrix::zeros(90, 2), labels, 4).unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let cfg = EvalConfig::default();
        let report = evaluate(&Oracle, &videos(), 4, &cfg, 3, None).unwrap();
        assert_eq!(report.moc.len(), 8);
        assert!(report.moc.iter().all(|e| e.value == 1.0));
        assert_eq!((report.seg_acc, report.edit, report.f1_50), (1.0, 1.0, 1.0));
        assert_eq!(report.to_csv().lines().count(), 1 + 8 + 5);
    }

    #[test]
    fn frequency_split() {
        let groups = frequency_groups(&videos(), 4);
        assert_eq!(groups.len(), 4);
        assert!(groups.contains(&ClassGroup::Frequent));
    }
}
