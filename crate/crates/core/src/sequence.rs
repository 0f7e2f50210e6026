//! Frame tracks, segment sequences and observation/prediction windows.
//!
//! Action labels are plain `usize` ids in `[0, C)`. The decoder and CRF use
//! one extra label, [`eos_label`]`(C) == C`, which never appears in a frame
//! track.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub type ActionLabel = usize;

/// Id of the end-of-sequence label in a label space of `classes` actions.
pub const fn eos_label(classes: usize) -> ActionLabel {
    classes
}

/// Per-frame features and labels of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub features: Matrix,
    pub labels: Vec<ActionLabel>,
}

impl FrameSequence {
    pub fn new(features: Matrix, labels: Vec<ActionLabel>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidLabel { label, classes });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> FrameSequence {
        let idx: Vec<usize> = (start..start + len).collect();
        FrameSequence { features: self.features.select_rows(&idx), labels: self.labels[start..start + len].to_vec() }
    }

    /// Writes `<stem>.bin` (header `T: u32, D: u32`, then row-major `f32`,
    /// all little-endian) and `<stem>.labels.txt` (one label per line).
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let (t, d) = self.features.shape();
        let mut bytes = Vec::with_capacity(8 + 4 * t * d);
        bytes.extend_from_slice(&(t as u32).to_le_bytes());
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
        for &v in self.features.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        let mut labels = fs::File::create(dir.join(format!("{stem}.labels.txt")))?;
        let mut text = String::with_capacity(self.labels.len() * 3);
        for l in &self.labels {
            text.push_str(&l.to_string());
            text.push('\n');
        }
        labels.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn read(dir: &Path, stem: &str, classes: usize) -> Result<Self> {
        let bin_path = dir.join(format!("{stem}.bin"));
        let bytes = fs::read(&bin_path)?;
        let bad = |reason: &str| Error::Format { path: bin_path.display().to_string(), reason: reason.to_string() };
        if bytes.len() < 8 {
            return Err(bad("missing header"));
        }
        let t = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * t * d {
            return Err(bad("payload size does not match header"));
        }
        let data = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let features = Matrix::from_vec(t, d, data)?;

        let label_path = dir.join(format!("{stem}.labels.txt"));
        let reader = BufReader::new(fs::File::open(&label_path)?);
        let mut labels = Vec::with_capacity(t);
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            labels.push(line.parse::<usize>().map_err(|e| Error::Format {
                path: label_path.display().to_string(),
                reason: e.to_string(),
            })?);
        }
        FrameSequence::new(features, labels, classes)
    }
}

/// Run-length view of a label track: `actions[i]` lasts `durations[i]` frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSequence {
    pub actions: Vec<ActionLabel>,
    pub durations: Vec<usize>,
}

impl SegmentSequence {
    /// Validated constructor: equal lengths, at least one segment, positive
    /// durations and no two consecutive equal actions.
    pub fn new(actions: Vec<ActionLabel>, durations: Vec<usize>) -> Result<Self> {
        if actions.len() != durations.len() {
            return Err(Error::Shape(format!("{} actions for {} durations", actions.len(), durations.len())));
        }
        if actions.is_empty() {
            return Err(Error::EmptyTrack);
        }
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(Error::ZeroLengthSegment(i));
        }
        if let Some(i) = actions.windows(2).position(|w| w[0] == w[1]) {
            return Err(Error::Shape(format!("segments {i} and {} share a label", i + 1)));
        }
        Ok(Self { actions, durations })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Half-open frame interval of every segment.
    pub fn spans(&self) -> Vec<(ActionLabel, usize, usize)> {
        let mut start = 0;
        self.actions
            .iter()
            .zip(&self.durations)
            .map(|(&a, &d)| {
                let span = (a, start, start + d);
                start += d;
                span
            })
            .collect()
    }
}

pub fn frames_to_segments(labels: &[ActionLabel]) -> Result<SegmentSequence> {
    let (&first, rest) = labels.split_first().ok_or(Error::EmptyTrack)?;
    let mut actions = vec![first];
    let mut durations = vec![1usize];
    for &l in rest {
        if l == *actions.last().unwrap() {
            *durations.last_mut().unwrap() += 1;
        } else {
            actions.push(l);
            durations.push(1);
        }
    }
    Ok(SegmentSequence { actions, durations })
}

pub fn segments_to_frames(seq: &SegmentSequence) -> Result<Vec<ActionLabel>> {
    if seq.actions.len() != seq.durations.len() {
        return Err(Error::Shape("actions and durations differ in length".into()));
    }
    let mut out = Vec::with_capacity(seq.total_frames());
    for (i, (&a, &d)) in seq.actions.iter().zip(&seq.durations).enumerate() {
        if d == 0 {
            return Err(Error::ZeroLengthSegment(i));
        }
        out.extend(std::iter::repeat_n(a, d));
    }
    Ok(out)
}

// Guards floor/ceil against representation error such as 0.7 * 10 = 7.000000000000001.
const ROUNDING_SLACK: f64 = 1e-9;

/// Observation ratio `alpha` and prediction ratio `beta` over a video of
/// `total_frames` frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub alpha: f64,
    pub beta: f64,
    pub total_frames: usize,
}

impl WindowSpec {
    pub fn new(alpha: f64, beta: f64, total_frames: usize) -> Result<Self> {
        let spec = Self { alpha, beta, total_frames };
        spec.validate()?;
        Ok(spec)
    }

    /// `floor(alpha * T)`.
    pub fn observed_len(&self) -> usize {
        observed_len(self.alpha, self.total_frames)
    }

    /// `ceil(beta * T)`.
    pub fn future_len(&self) -> usize {
        future_len(self.beta, self.total_frames)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { alpha, beta, total_frames } = *self;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidWindow(format!("alpha {alpha} outside (0, 1)")));
        }
        if !(beta > 0.0 && beta <= 1.0 - alpha + ROUNDING_SLACK) {
            return Err(Error::InvalidWindow(format!("beta {beta} outside (0, 1 - alpha]")));
        }
        let obs = self.observed_len();
        if obs < 1 {
            return Err(Error::InvalidWindow(format!("no observed frames for alpha {alpha}, T {total_frames}")));
        }
        if obs + self.future_len() > total_frames {
            return Err(Error::InvalidWindow(format!(
                "{obs} observed + {} future frames exceed T = {total_frames}",
                self.future_len()
            )));
        }
        Ok(())
    }
}

pub fn observed_len(alpha: f64, total_frames: usize) -> usize {
    (alpha * total_frames as f64 + ROUNDING_SLACK).floor() as usize
}

pub fn future_len(beta: f64, total_frames: usize) -> usize {
    (beta * total_frames as f64 - ROUNDING_SLACK).ceil().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSplit {
    pub observed: FrameSequence,
    pub future_segments: SegmentSequence,
    pub future_track: Vec<ActionLabel>,
}

/// Observed prefix plus the next `ceil(beta * T)` frames as a track and as
/// segments. A segment crossing either boundary is cut at the boundary.
pub fn split_windows(sample: &FrameSequence, spec: &WindowSpec) -> Result<WindowSplit> {
    if spec.total_frames != sample.len() {
        return Err(Error::InvalidWindow(format!(
            "window built for {} frames, sample has {}",
            spec.total_frames,
            sample.len()
        )));
    }
    spec.validate()?;
    let obs = spec.observed_len();
    let fut = spec.future_len();
    let future_track = sample.labels[obs..obs + fut].to_vec();
    Ok(WindowSplit {
        observed: sample.slice(0, obs),
        future_segments: frames_to_segments(&future_track)?,
        future_track,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: usize = 0;
    const B: usize = 1;
    const C: usize = 2;

    fn dummy(labels: Vec<usize>) -> FrameSequence {
        let t = labels.len();
        FrameSequence::new(Matrix::zeros(t, 2), labels, 3).unwrap()
    }

    #[test]
    fn run_length_examples() {
        let s = frames_to_segments(&[A, A, B, B, B]).unwrap();
        assert_eq!((s.actions, s.durations), (vec![A, B], vec![2, 3]));
        let s = frames_to_segments(&[A]).unwrap();
        assert_eq!((s.actions, s.durations), (vec![A], vec![1]));
        assert!(matches!(frames_to_segments(&[]), Err(Error::EmptyTrack)));
    }

    #[test]
    fn expansion_examples() {
        let seq = SegmentSequence { actions: vec![A, B], durations: vec![2, 1] };
        assert_eq!(segments_to_frames(&seq).unwrap(), vec![A, A, B]);
        let seq = SegmentSequence { actions: vec![A], durations: vec![4] };
        assert_eq!(segments_to_frames(&seq).unwrap(), vec![A; 4]);
        let bad = SegmentSequence { actions: vec![A, B], durations: vec![2, 0] };
        let err = segments_to_frames(&bad).unwrap_err();
        assert!(err.to_string().starts_with("zero-length segment"));
    }

    #[test]
    fn window_index_arithmetic() {
        let w = WindowSpec::new(0.2, 0.5, 10).unwrap();
        assert_eq!((w.observed_len(), w.future_len()), (2, 5));
        let w = WindowSpec::new(0.3, 0.7, 10).unwrap();
        assert_eq!((w.observed_len(), w.future_len()), (3, 7));
    }

    #[test]
    fn split_truncates_boundary_segments() {
        let sample = dummy(vec![A, A, A, B, B, C, C, C, C, C]);
        let split = split_windows(&sample, &WindowSpec::new(0.2, 0.5, 10).unwrap()).unwrap();
        assert_eq!(split.observed.labels, vec![A, A]);
        assert_eq!(split.future_track, vec![A, B, B, C, C]);
        assert_eq!(split.future_segments.actions, vec![A, B, C]);
        assert_eq!(split.future_segments.durations, vec![1, 2, 2]);
    }

    #[test]
    fn invalid_windows_are_rejected() {
        assert!(WindowSpec::new(0.0, 0.5, 10).is_err());
        assert!(WindowSpec::new(0.5, 0.6, 10).is_err());
        assert!(WindowSpec::new(0.05, 0.5, 10).is_err());
        let err = WindowSpec::new(0.5, 0.0, 10).unwrap_err();
        assert!(err.to_string().starts_with("invalid window"));
    }

    #[test]
    fn frame_sequence_rejects_out_of_range_labels() {
        assert!(FrameSequence::new(Matrix::zeros(2, 1), vec![0, 3], 3).is_err());
        assert!(FrameSequence::new(Matrix::zeros(3, 1), vec![0, 1], 3).is_err());
    }

    #[test]
    fn segment_sequence_constructor_enforces_invariants() {
        assert!(SegmentSequence::new(vec![A, A], vec![1, 1]).is_err());
        assert!(SegmentSequence::new(vec![], vec![]).is_err());
        assert!(SegmentSequence::new(vec![A, B], vec![1, 0]).is_err());
        assert!(SegmentSequence::new(vec![A, B], vec![1, 2]).is_ok());
    }

    #[test]
    fn file_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let features = Matrix::from_vec(3, 2, vec![0.5, -1.25, 3.0, 0.0, 1e-3f32 as f64, 7.0]).unwrap();
        let seq = FrameSequence::new(features, vec![0, 2, 2], 3).unwrap();
        seq.write(dir.path(), "v0").unwrap();
        assert_eq!(FrameSequence::read(dir.path(), "v0", 3).unwrap(), seq);
        let header = std::fs::read(dir.path().join("v0.bin")).unwrap();
        assert_eq!(&header[..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn run_length_round_trips(track in proptest::collection::vec(0usize..4, 1..200)) {
            let seq = frames_to_segments(&track).unwrap();
            prop_assert!(seq.actions.windows(2).all(|w| w[0] != w[1]));
            prop_assert_eq!(seq.total_frames(), track.len());
            prop_assert_eq!(segments_to_frames(&seq).unwrap(), track);
        }

        #[test]
        fn segments_round_trip(raw in proptest::collection::vec((0usize..4, 1usize..6), 1..30)) {
            let mut actions: Vec<usize> = Vec::new();
            let mut durations = Vec::new();
            for (a, d) in raw {
                if actions.last() != Some(&a) {
                    actions.push(a);
                    durations.push(d);
                }
            }
            let seq = SegmentSequence::new(actions, durations).unwrap();
            prop_assert_eq!(frames_to_segments(&segments_to_frames(&seq).unwrap()).unwrap(), seq);
        }

        #[test]
        fn split_partitions_a_prefix(t in 5usize..300, a in 1u32..9, b in 1u32..9) {
            let alpha = a as f64 / 10.0;
            let beta = (b as f64 / 10.0).min(1.0 - alpha);
            prop_assume!(beta > 0.0);
            let labels: Vec<usize> = (0..t).map(|i| (i / 7) % 3).collect();
            let sample = dummy(labels.clone());
            if let Ok(spec) = WindowSpec::new(alpha, beta, t) {
                let split = split_windows(&sample, &spec).unwrap();
                let n_obs = split.observed.len();
                prop_assert_eq!(n_obs, spec.observed_len());
                prop_assert!(n_obs >= 1);
                prop_assert_eq!(&split.future_track[..], &labels[n_obs..n_obs + spec.future_len()]);
                prop_assert_eq!(split.future_segments.total_frames(), split.future_track.len());
            }
        }
    }
}
