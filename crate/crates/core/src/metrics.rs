//! Anticipation and segmentation metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::{frames_to_segments, ActionLabel};

/// IoU thresholds of the segmental F1 scores.
pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

/// Expands normalized durations into exactly `horizon` frame labels by
/// cumulative rounding. Durations are renormalized over `actions`; an empty
/// action list fills the horizon with `fallback`.
pub fn decode_to_frames(
    actions: &[ActionLabel],
    durations: &[f64],
    horizon: usize,
    fallback: ActionLabel,
) -> Vec<ActionLabel> {
    if actions.is_empty() || horizon == 0 {
        return vec![fallback; horizon];
    }
    let weights: Vec<f64> = durations.iter().take(actions.len()).map(|d| d.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    let uniform = !(total > 0.0 && total.is_finite()) || weights.len() < actions.len();
    let mut out = Vec::with_capacity(horizon);
    let mut cumulative = 0.0;
    for (i, &action) in actions.iter().enumerate() {
        cumulative += if uniform { 1.0 / actions.len() as f64 } else { weights[i] / total };
        let boundary =
            if i + 1 == actions.len() { horizon } else { ((horizon as f64) * cumulative).round() as usize };
        let boundary = boundary.clamp(out.len(), horizon);
        out.resize(boundary, action);
    }
    out
}

fn check_lengths(pred: &[ActionLabel], gt: &[ActionLabel]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("prediction has {} frames, ground truth {}", pred.len(), gt.len())));
    }
    Ok(())
}

/// Per-class frame counts, pooled over any number of windows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassAccuracy {
    correct: Vec<u64>,
    total: Vec<u64>,
}

impl ClassAccuracy {
    pub fn new(classes: usize) -> Self {
        Self { correct: vec![0; classes], total: vec![0; classes] }
    }

    pub fn add(&mut self, pred: &[ActionLabel], gt: &[ActionLabel]) -> Result<()> {
        check_lengths(pred, gt)?;
        for (&p, &g) in pred.iter().zip(gt) {
            if g >= self.total.len() {
                return Err(Error::InvalidLabel { label: g, classes: self.total.len() });
            }
            self.total[g] += 1;
            if p == g {
                self.correct[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassAccuracy) {
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().zip(&other.total) {
            *a += b;
        }
    }

    /// Mean over classes with at least one ground-truth frame; 0 if none.
    pub fn mean(&self) -> f64 {
        let accs: Vec<f64> = self
            .correct
            .iter()
            .zip(&self.total)
            .filter(|(_, &t)| t > 0)
            .map(|(&c, &t)| c as f64 / t as f64)
            .collect();
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    }
}

/// Mean over ground-truth classes of per-class frame accuracy.
pub fn moc(pred: &[ActionLabel], gt: &[ActionLabel], classes: usize) -> Result<f64> {
    let mut acc = ClassAccuracy::new(classes);
    acc.add(pred, gt)?;
    Ok(acc.mean())
}

pub fn frame_acc(pred: &[ActionLabel], gt: &[ActionLabel]) -> Result<f64> {
    check_lengths(pred, gt)?;
    if gt.is_empty() {
        return Ok(1.0);
    }
    Ok(pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64 / gt.len() as f64)
}

pub fn levenshtein(a: &[ActionLabel], b: &[ActionLabel]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 − Levenshtein / max(len)`; 1 when both lists are empty.
pub fn edit_score(pred: &[ActionLabel], gt: &[ActionLabel]) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, gt) as f64 / longest as f64
}

/// Labelled half-open frame interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub label: ActionLabel,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn iou(&self, other: &Span) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Segments of a frame track as spans.
pub fn spans_of(track: &[ActionLabel]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=track.len() {
        if i == track.len() || track[i] != track[start] {
            out.push(Span { label: track[start], start, end: i });
            start = i;
        }
    }
    out
}

/// True-positive, false-positive and false-negative counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn add(&mut self, other: MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `2PR / (P + R)`, 0 when undefined.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 || denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Greedy same-label matching at IoU threshold `tau`. Predictions are
/// visited in temporal order and each takes the earliest unmatched
/// ground-truth segment it overlaps by at least `tau`.
pub fn match_segments(pred: &[Span], gt: &[Span], tau: f64) -> MatchCounts {
    let mut pred_order: Vec<&Span> = pred.iter().collect();
    pred_order.sort_by_key(|s| (s.start, s.end));
    let mut gt_order: Vec<usize> = (0..gt.len()).collect();
    gt_order.sort_by_key(|&i| (gt[i].start, gt[i].end));
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for p in pred_order {
        let hit = gt_order.iter().copied().find(|&j| !used[j] && gt[j].label == p.label && p.iou(&gt[j]) >= tau);
        if let Some(j) = hit {
            used[j] = true;
            tp += 1;
        }
    }
    MatchCounts { tp, fp: pred.len() - tp, fn_: gt.len() - tp }
}

pub fn f1_at(pred: &[Span], gt: &[Span], tau: f64) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    match_segments(pred, gt, tau).f1()
}

/// Membership of a class in the frequent or rare half of the label set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Frequent,
    Rare,
}

/// Average precision of one class: precision at each positive, in
/// descending score order with ties broken by lower video index.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

/// Mean average precision over all, frequent and rare classes. `scores[v][c]`
/// is the score of class `c` in video `v`; classes without positives are
/// skipped, and an empty group yields `None`.
pub fn map_multilabel(
    scores: &[Vec<f64>],
    gt_sets: &[Vec<bool>],
    groups: &[ClassGroup],
) -> Result<(Option<f64>, Option<f64>, Option<f64>)> {
    if scores.len() != gt_sets.len() {
        return Err(Error::Shape(format!("{} score rows for {} label sets", scores.len(), gt_sets.len())));
    }
    let classes = groups.len();
    if scores.iter().any(|s| s.len() != classes) || gt_sets.iter().any(|s| s.len() != classes) {
        return Err(Error::Shape(format!("expected {classes} classes per video")));
    }
    let mut per_group: [Vec<f64>; 3] = Default::default();
    for c in 0..classes {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let pos: Vec<bool> = gt_sets.iter().map(|s| s[c]).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            per_group[0].push(ap);
            per_group[if groups[c] == ClassGroup::Frequent { 1 } else { 2 }].push(ap);
        }
    }
    let mean = |v: &Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok((mean(&per_group[0]), mean(&per_group[1]), mean(&per_group[2])))
}

/// Pooled segmentation scores of the encoder on observed windows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentationAccumulator {
    correct: usize,
    frames: usize,
    edit_sum: f64,
    windows: usize,
    matches: [MatchCounts; 3],
}

impl SegmentationAccumulator {
    pub fn add(&mut self, pred: &[ActionLabel], gt: &[ActionLabel]) -> Result<()> {
        check_lengths(pred, gt)?;
        self.correct += pred.iter().zip(gt).filter(|(p, g)| p == g).count();
        self.frames += gt.len();
        let (ps, gs) = (spans_of(pred), spans_of(gt));
        let pl: Vec<ActionLabel> = ps.iter().map(|s| s.label).collect();
        let gl: Vec<ActionLabel> = gs.iter().map(|s| s.label).collect();
        self.edit_sum += edit_score(&pl, &gl);
        self.windows += 1;
        for (m, &tau) in self.matches.iter_mut().zip(&F1_THRESHOLDS) {
            m.add(match_segments(&ps, &gs, tau));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SegmentationAccumulator) {
        self.correct += other.correct;
        self.frames += other.frames;
        self.edit_sum += other.edit_sum;
        self.windows += other.windows;
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            a.add(*b);
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            self.correct as f64 / self.frames as f64
        }
    }

    pub fn edit(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.edit_sum / self.windows as f64
        }
    }

    pub fn f1(&self) -> [f64; 3] {
        self.matches.map(|m| m.f1())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MocEntry {
    pub alpha: f64,
    pub beta: f64,
    pub value: f64,
}

/// All scores of one evaluation run, as fractions in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub moc: Vec<MocEntry>,
    pub seg_acc: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_all: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_freq: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_rare: Option<f64>,
}

impl MetricsReport {
    pub fn moc_at(&self, alpha: f64, beta: f64) -> Option<f64> {
        self.moc.iter().find(|e| (e.alpha - alpha).abs() < 1e-9 && (e.beta - beta).abs() < 1e-9).map(|e| e.value)
    }

    /// Mean MoC over every evaluated `(alpha, beta)` pair.
    pub fn mean_moc(&self) -> f64 {
        if self.moc.is_empty() {
            return 0.0;
        }
        self.moc.iter().map(|e| e.value).sum::<f64>() / self.moc.len() as f64
    }

    /// `(metric, alpha, beta, value)` rows; segmentation and mAP rows have no window.
    pub fn rows(&self) -> Vec<(String, Option<f64>, Option<f64>, f64)> {
        let mut rows: Vec<_> = self.moc.iter().map(|e| ("moc".to_string(), Some(e.alpha), Some(e.beta), e.value)).collect();
        for (name, v) in
            [("seg_acc", self.seg_acc), ("edit", self.edit), ("f1_10", self.f1_10), ("f1_25", self.f1_25), ("f1_50", self.f1_50)]
        {
            rows.push((name.to_string(), None, None, v));
        }
        for (name, v) in [("map_all", self.map_all), ("map_freq", self.map_freq), ("map_rare", self.map_rare)] {
            if let Some(v) = v {
                rows.push((name.to_string(), None, None, v));
            }
        }
        rows
    }

    /// CSV with header `metric,alpha,beta,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,alpha,beta,value\n");
        for (metric, alpha, beta, value) in self.rows() {
            writeln!(out, "{metric},{},{},{value:.6}", fmt_opt(alpha), fmt_opt(beta)).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Segment labels of a frame track.
pub fn segment_labels(track: &[ActionLabel]) -> Vec<ActionLabel> {
    frames_to_segments(track).map(|s| s.actions).unwrap_or_default()
}
