//! Synthetic Markov-grammar videos with a known transition structure.
//!
//! Every video is a chain of segments: the first action is uniform, each
//! following action is drawn from a row of the ground-truth transition
//! matrix, each duration from a per-class normal. Frame features are the
//! class embedding plus isotropic gaussian noise, so segmentation is
//! learnable but not trivial.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sequence::{frames_to_segments, FrameSequence};
use crate::tensor::Matrix;

/// Stream ids for counter-based RNG splitting from one master seed.
const STREAM_SPEC: u64 = 0;
const STREAM_TRAIN: u64 = 1 << 32;
const STREAM_TEST: u64 = 2 << 32;

/// Fully specified generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub classes: usize,
    /// `C × C` row-stochastic matrix with a zero diagonal.
    pub gt_transitions: Matrix,
    /// Per-class `(mean, stddev)` segment length in frames.
    pub duration_params: Vec<(f64, f64)>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// `C × D` class centroids.
    pub class_embeddings: Matrix,
    pub min_segments: usize,
    pub max_segments: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        let bad = |msg: String| Err(Error::Config(msg));
        if c < 2 {
            return bad(format!("need at least 2 classes, got {c}"));
        }
        if self.gt_transitions.shape() != (c, c) {
            return bad("transition matrix must be C x C".into());
        }
        for a in 0..c {
            let row = self.gt_transitions.row(a);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return bad(format!("transition row {a} has entries outside [0, 1]"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("transition row {a} does not sum to 1"));
            }
            if row[a] != 0.0 {
                return bad(format!("self-transition probability of class {a} must be 0"));
            }
        }
        if self.duration_params.len() != c {
            return bad("one (mean, stddev) pair per class required".into());
        }
        if self.duration_params.iter().any(|&(m, s)| m < 2.0 || s < 0.0 || !m.is_finite() || !s.is_finite()) {
            return bad("duration means must be >= 2 frames with non-negative stddev".into());
        }
        if self.class_embeddings.shape() != (c, self.feature_dim) {
            return bad("class embeddings must be C x D".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if self.min_segments < 1 || self.min_segments > self.max_segments {
            return bad("need 1 <= min_segments <= max_segments".into());
        }
        Ok(())
    }
}

/// Compact, serialisable description from which a [`GeneratorSpec`] is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Norm of every class centroid.
    pub embedding_norm: f64,
    /// Probability of each class's dominant successor; the rest is spread
    /// evenly over the other non-self classes.
    pub transition_peak: f64,
    /// Explicit `C × C` matrix, overriding `transition_peak`.
    pub transitions: Option<Vec<Vec<f64>>>,
    /// Per-class mean durations are drawn uniformly from this range.
    pub duration_mean_range: (f64, f64),
    /// Standard deviation as a fraction of each class mean.
    pub duration_std_fraction: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            feature_dim: 16,
            noise_sigma: 1.0,
            embedding_norm: 3.0,
            transition_peak: 0.85,
            transitions: None,
            duration_mean_range: (15.0, 35.0),
            duration_std_fraction: 0.15,
            min_segments: 7,
            max_segments: 9,
            n_train: 300,
            n_test: 60,
            seed: 2024,
        }
    }
}

impl GeneratorConfig {
    pub fn build_spec(&self) -> Result<GeneratorSpec> {
        let c = self.classes;
        let d = self.feature_dim;
        if c < 2 || d < 1 {
            return Err(Error::Config("need at least 2 classes and 1 feature dimension".into()));
        }
        let mut rng = stream_rng(self.seed, STREAM_SPEC);

        let gt_transitions = match &self.transitions {
            Some(rows) => Matrix::from_rows(rows)?,
            None => peaked_transitions(c, self.transition_peak, &mut rng)?,
        };

        let (lo, hi) = self.duration_mean_range;
        if !(lo >= 2.0 && hi >= lo) {
            return Err(Error::Config("duration_mean_range must satisfy 2 <= lo <= hi".into()));
        }
        let duration_params = (0..c)
            .map(|_| {
                let mean = if hi > lo { rng.random_range(lo..hi) } else { lo };
                (mean, mean * self.duration_std_fraction)
            })
            .collect();

        let class_embeddings = spread_embeddings(c, d, self.embedding_norm, &mut rng);

        let spec = GeneratorSpec {
            classes: c,
            gt_transitions,
            duration_params,
            feature_dim: d,
            noise_sigma: self.noise_sigma,
            class_embeddings,
            min_segments: self.min_segments,
            max_segments: self.max_segments,
            seed: self.seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn peaked_transitions(c: usize, peak: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&peak) {
        return Err(Error::Config(format!("transition_peak {peak} outside [0, 1]")));
    }
    if c == 2 {
        // Only one non-self successor exists.
        return Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
    }
    // Random derangement: every class gets a distinct dominant successor.
    let mut successor: Vec<usize> = (0..c).collect();
    loop {
        successor.shuffle(rng);
        if successor.iter().enumerate().all(|(i, &s)| i != s) {
            break;
        }
    }
    let rest = (1.0 - peak) / (c - 2) as f64;
    let mut m = Matrix::zeros(c, c);
    for a in 0..c {
        for b in 0..c {
            if b == successor[a] {
                m.set(a, b, peak);
            } else if b != a {
                m.set(a, b, rest);
            }
        }
    }
    Ok(m)
}

/// Gaussian rows orthonormalised by Gram-Schmidt (while `C <= D`) and scaled to `norm`.
fn spread_embeddings(c: usize, d: usize, norm: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
    for _ in 0..c {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if rows.len() < d {
            for u in &rows {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= dot * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= n);
        rows.push(v);
    }
    let mut m = Matrix::from_rows(&rows).expect("equal rows");
    m.scale_assign(norm);
    round_to_f32(&mut m);
    m
}

/// Snap to `f32` precision so in-memory data equals what the on-disk format stores.
fn round_to_f32(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        *v = *v as f32 as f64;
    }
}

/// Independent ChaCha stream `stream` of the master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_video(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> FrameSequence {
    let c = spec.classes;
    let n_segments = rng.random_range(spec.min_segments..=spec.max_segments);
    let mut labels = Vec::new();
    let mut action = rng.random_range(0..c);
    for i in 0..n_segments {
        if i > 0 {
            action = sample_row(spec.gt_transitions.row(action), rng);
        }
        let (mean, std) = spec.duration_params[action];
        let raw = if std > 0.0 { Normal::new(mean, std).expect("valid normal").sample(rng) } else { mean };
        let duration = raw.round().max(2.0) as usize;
        labels.extend(std::iter::repeat_n(action, duration));
    }
    let d = spec.feature_dim;
    let mut features = Matrix::zeros(labels.len(), d);
    for (t, &l) in labels.iter().enumerate() {
        let centre = spec.class_embeddings.row(l);
        for (dst, &mu) in features.row_mut(t).iter_mut().zip(centre) {
            let noise: f64 = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *dst = mu + noise;
        }
    }
    round_to_f32(&mut features);
    FrameSequence { features, labels }
}

fn sample_row(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // Rounding slack: fall back to the last class with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// A generated or loaded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub feature_dim: usize,
    pub gt_transitions: Matrix,
    pub train: Vec<FrameSequence>,
    pub test: Vec<FrameSequence>,
}

pub fn sample_dataset(spec: &GeneratorSpec, n_train: usize, n_test: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must be >= 1".into()));
    }
    let split = |base: u64, n: usize| -> Vec<FrameSequence> {
        (0..n)
            .into_par_iter()
            .map(|i| sample_video(spec, &mut stream_rng(spec.seed, base + i as u64)))
            .collect()
    };
    Ok(Dataset {
        classes: spec.classes,
        feature_dim: spec.feature_dim,
        gt_transitions: spec.gt_transitions.clone(),
        train: split(STREAM_TRAIN, n_train),
        test: split(STREAM_TEST, n_test),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub features: String,
    pub labels: String,
    pub sha256: String,
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: usize,
    pub feature_dim: usize,
    /// Row-major `C × C` ground-truth transitions.
    pub gt_transitions: Vec<f64>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Writes `train/`, `test/` and `manifest.json` under `dir`; returns the
    /// hex SHA-256 of the manifest, which covers every data file by hash.
    pub fn save(&self, dir: &Path) -> Result<String> {
        let mut entries = Vec::with_capacity(2);
        for (name, videos) in [("train", &self.train), ("test", &self.test)] {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            let mut split = Vec::with_capacity(videos.len());
            for (i, v) in videos.iter().enumerate() {
                let stem = format!("video_{i:04}");
                v.write(&sub, &stem)?;
                let mut hasher = Sha256::new();
                hasher.update(fs::read(sub.join(format!("{stem}.bin")))?);
                hasher.update(fs::read(sub.join(format!("{stem}.labels.txt")))?);
                split.push(ManifestEntry {
                    features: format!("{name}/{stem}.bin"),
                    labels: format!("{name}/{stem}.labels.txt"),
                    sha256: hex::encode(hasher.finalize()),
                });
            }
            entries.push(split);
        }
        let test = entries.pop().unwrap();
        let train = entries.pop().unwrap();
        let manifest = Manifest {
            classes: self.classes,
            feature_dim: self.feature_dim,
            gt_transitions: self.gt_transitions.as_slice().to_vec(),
            train,
            test,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let c = manifest.classes;
        let gt_transitions = Matrix::from_vec(c, c, manifest.gt_transitions.clone())?;
        let load_split = |entries: &[ManifestEntry]| -> Result<Vec<FrameSequence>> {
            entries
                .iter()
                .map(|e| {
                    let stem = e.features.strip_suffix(".bin").ok_or_else(|| Error::Format {
                        path: e.features.clone(),
                        reason: "features file must end in .bin".into(),
                    })?;
                    let path = dir.join(stem);
                    let parent = path.parent().unwrap_or(dir);
                    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
                    let seq = FrameSequence::read(parent, name, c)?;
                    if seq.feature_dim() != manifest.feature_dim {
                        return Err(Error::Format {
                            path: e.features.clone(),
                            reason: format!("feature dim {} != manifest {}", seq.feature_dim(), manifest.feature_dim),
                        });
                    }
                    Ok(seq)
                })
                .collect()
        };
        Ok(Dataset {
            classes: c,
            feature_dim: manifest.feature_dim,
            gt_transitions,
            train: load_split(&manifest.train)?,
            test: load_split(&manifest.test)?,
        })
    }

    /// Counts of `a → b` segment transitions over the training videos.
    pub fn train_transition_counts(&self) -> Matrix {
        let mut counts = Matrix::zeros(self.classes, self.classes);
        for v in &self.train {
            let seq = frames_to_segments(&v.labels).expect("non-empty video");
            for w in seq.actions.windows(2) {
                let cur = counts.get(w[0], w[1]);
                counts.set(w[0], w[1], cur + 1.0);
            }
        }
        counts
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.display().to_string(), reason: e.to_string() })
}

pub fn manifest_hash(dir: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(dir.join(MANIFEST_FILE))?)))
}
