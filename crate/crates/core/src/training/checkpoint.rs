//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TCCA" | u32 version | u32 n | n bytes of JSON metadata | u32 records
//! then per record: u32 name_len | name | u32 rows | u32 cols | rows·cols f64
//! ```
//!
//! Parameter records come first in store order, followed by the optimizer
//! moments as `adam.m.<name>` and `adam.v.<name>` when present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::eval::EvalConfig;
use super::optim::AdamW;
use super::{Model, ModelSpec, TrainConfig};

pub const MAGIC: &[u8; 4] = b"TCCA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Epochs completed. Per-epoch random streams derive from
    /// `(train.seed, epoch)`, so this plus the seed is the RNG state.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Matrix)>,
    pub moments: Vec<(String, Matrix)>,
}

/// Hex SHA-256 of the canonical JSON of the model and training settings.
pub fn config_hash(model: &ModelSpec, train: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(&(model, train)).expect("configs serialize");
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        train: &TrainConfig,
        eval: &EvalConfig,
        optimizer: Option<&AdamW>,
        epoch: usize,
    ) -> Self {
        let store = &model.store;
        let params = store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect();
        let mut moments = Vec::new();
        if let Some(opt) = optimizer {
            for (kind, tensors) in [("m", &opt.m), ("v", &opt.v)] {
                for id in store.ids() {
                    moments.push((format!("adam.{kind}.{}", store.name(id)), tensors[id.index()].clone()));
                }
            }
        }
        Self {
            meta: CheckpointMeta {
                model: model.spec.clone(),
                train: train.clone(),
                eval: eval.clone(),
                epoch,
                optimizer_step: optimizer.map_or(0, |o| o.step),
                config_hash: config_hash(&model.spec, train),
            },
            params,
            moments,
        }
    }

    /// Rebuilds the model and loads every parameter.
    pub fn to_model(&self) -> Result<Model> {
        // The layout does not depend on the initial values, so a random init suffices.
        let mut spec = self.meta.model.clone();
        spec.crf.init_mode = crate::crf::InitMode::Random;
        let mut model = Model::new(&spec, None)?;
        model.spec = self.meta.model.clone();
        model.store.load_records(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&((self.params.len() + self.moments.len()) as u32).to_le_bytes());
        for (name, m) in self.params.iter().chain(&self.moments) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let fail = |reason: &str| Error::Format { path: path.to_string(), reason: reason.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| fail("truncated header"))? != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = r.u32().ok_or_else(|| fail("truncated header"))?;
        if version != VERSION {
            return Err(Error::Incompatible(format!("checkpoint format {version}, expected {VERSION}")));
        }
        let meta_len = r.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len).ok_or_else(|| fail("truncated metadata"))?)
            .map_err(|e| fail(&format!("metadata: {e}")))?;
        let count = r.u32().ok_or_else(|| fail("truncated record count"))? as usize;
        let mut params = Vec::new();
        let mut moments = Vec::new();
        for _ in 0..count {
            let name_len = r.u32().ok_or_else(|| fail("truncated record"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| fail("truncated record"))?)
                .map_err(|_| fail("record name is not UTF-8"))?
                .to_string();
            let rows = r.u32().ok_or_else(|| fail("truncated record"))? as usize;
            let cols = r.u32().ok_or_else(|| fail("truncated record"))? as usize;
            let raw = r.take(rows * cols * 8).ok_or_else(|| fail("truncated tensor"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let m = Matrix::from_vec(rows, cols, data)?;
            if name.starts_with("adam.") {
                moments.push((name, m));
            } else {
                params.push((name, m));
            }
        }
        if r.pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self { meta, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}
