//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `PSEGCKPT`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor blob as little-endian `f64`
//! values in manifest order.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::model::PartSegModel;
use crate::prompt::{BankEntry, SharedTokenBank};
use crate::tensor::Tensor;
use crate::trainer::{training_split, Trainer, STREAM_EPISODES};

const MAGIC: &[u8; 8] = b"PSEGCKPT";
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BankMeta {
    momentum: f64,
    n_tokens: usize,
    token_dim: usize,
    /// EMA update count per key.
    updates: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: u64,
    stream: u64,
    /// 128-bit word position, in decimal.
    word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    step: u64,
    config: RunConfig,
    bank: BankMeta,
    rng: RngState,
    blobs: Vec<BlobEntry>,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: BTreeMap<String, Tensor>,
    pub bank: SharedTokenBank,
    pub velocity: BTreeMap<String, Tensor>,
    pub episode_word_pos: u128,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            step: t.step,
            params: t.model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            bank: t.model.bank.clone(),
            velocity: t.velocity.clone(),
            episode_word_pos: t.episode_rng.get_word_pos(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blobs = Vec::new();
        let mut data: Vec<&Tensor> = Vec::new();
        for (name, t) in &self.params {
            blobs.push(BlobEntry {
                name: format!("param/{name}"),
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
        for (key, e) in self.bank.entries() {
            for (kind, t) in [("current", &e.current), ("shared", &e.shared)] {
                blobs.push(BlobEntry {
                    name: format!("bank.{kind}/{key}"),
                    shape: t.shape().to_vec(),
                });
                data.push(t);
            }
        }
        for (name, t) in &self.velocity {
            blobs.push(BlobEntry {
                name: format!("velocity/{name}"),
                shape: t.shape().to_vec(),
            });
            data.push(t);
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT,
            step: self.step,
            config: self.config.clone(),
            bank: BankMeta {
                momentum: self.bank.momentum(),
                n_tokens: self.bank.n_tokens(),
                token_dim: self.bank.token_dim(),
                updates: self
                    .bank
                    .entries()
                    .iter()
                    .map(|(k, e)| (k.clone(), e.updates))
                    .collect(),
            },
            rng: RngState {
                seed: self.config.seed,
                stream: STREAM_EPISODES,
                word_pos: self.episode_word_pos.to_string(),
            },
            blobs,
        };
        let json = crate::json::to_line(&manifest)?;
        let mut bytes = Vec::with_capacity(16 + json.len());
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(json.as_bytes());
        for t in data {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::validation(path, reason.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| bad(&format!("manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT {
            return Err(bad("unsupported checkpoint format"));
        }
        let mut offset = 16 + len;
        let mut params = BTreeMap::new();
        let mut velocity = BTreeMap::new();
        let mut current = BTreeMap::new();
        let mut shared = BTreeMap::new();
        for blob in &manifest.blobs {
            let n: usize = blob.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            offset += 8 * n;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(&blob.shape, values)?;
            let (kind, name) = blob
                .name
                .split_once('/')
                .ok_or_else(|| bad("malformed blob name"))?;
            let slot = match kind {
                "param" => &mut params,
                "velocity" => &mut velocity,
                "bank.current" => &mut current,
                "bank.shared" => &mut shared,
                _ => return Err(bad("unknown blob kind")),
            };
            slot.insert(name.to_string(), t);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let mut entries = BTreeMap::new();
        for (key, cur) in current {
            let sh = shared.remove(&key).ok_or_else(|| bad("bank entry without shared tokens"))?;
            let updates = manifest.bank.updates.get(&key).copied().unwrap_or(0);
            entries.insert(
                key,
                BankEntry {
                    current: cur,
                    shared: sh,
                    updates,
                },
            );
        }
        let bank = SharedTokenBank::from_entries(
            manifest.bank.momentum,
            manifest.bank.n_tokens,
            manifest.bank.token_dim,
            entries,
        );
        let episode_word_pos = manifest
            .rng
            .word_pos
            .parse()
            .map_err(|_| bad("malformed rng position"))?;
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            params,
            bank,
            velocity,
            episode_word_pos,
        })
    }

    /// Rebuilds the model with this checkpoint's parameters and bank.
    pub fn model(&self) -> Result<PartSegModel> {
        let keys: Vec<String> = self.bank.keys().cloned().collect();
        let mut model = PartSegModel::new(self.config.model.clone(), &keys, self.config.seed)?;
        for (name, t) in &self.params {
            let slot = model.params.get_mut(name).ok_or_else(|| {
                Error::Config(format!("checkpoint parameter {name} does not fit the model"))
            })?;
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        if model.params.len() != self.params.len() {
            return Err(Error::Config("checkpoint lacks some model parameters".into()));
        }
        model.bank = self.bank.clone();
        Ok(model)
    }

    /// A trainer positioned exactly where this checkpoint was taken.
    pub fn resume(&self, index: Arc<DatasetIndex>) -> Result<Trainer> {
        let (split, _) = training_split(&self.config, &index)?;
        let model = self.model()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(STREAM_EPISODES);
        rng.set_word_pos(self.episode_word_pos);
        Trainer::assemble(
            self.config.clone(),
            index,
            split,
            model,
            self.velocity.clone(),
            self.step,
            rng,
        )
    }
}
