//! Episodic training with SGD, a polynomial schedule and EMA token updates.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::data::{build_splits, sample_episode, DatasetIndex, Episode, Partition, SplitSpec};
use crate::error::{Error, Result};
use crate::model::PartSegModel;
use crate::prompt::Mode;
use crate::prototypes::downsample_mask;
use crate::tensor::Tensor;

pub const STREAM_EPISODES: u64 = 10;
pub const STREAM_FIXED_EPISODE: u64 = 11;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// `base_lr·(1 − t/T)^power`, zero at and beyond `T`.
pub fn poly_lr(base_lr: f64, step: u64, max_steps: u64, power: f64) -> f64 {
    if max_steps == 0 || step >= max_steps {
        return 0.0;
    }
    base_lr * (1.0 - step as f64 / max_steps as f64).powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub episode: String,
    pub loss: f64,
    pub loss_vcl: f64,
    pub loss_tcl: Option<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_miou: Option<f64>,
}

/// Builds the split and the sorted part keys of its base categories.
pub fn training_split(config: &RunConfig, index: &DatasetIndex) -> Result<(SplitSpec, Vec<String>)> {
    let split = build_splits(index, config.split_id, config.split_seed)?;
    let keys = index.part_keys(split.categories(Partition::Base));
    Ok((split, keys))
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: PartSegModel,
    pub index: Arc<DatasetIndex>,
    pub split: SplitSpec,
    pub(crate) velocity: BTreeMap<String, Tensor>,
    pub(crate) step: u64,
    pub(crate) episode_rng: ChaCha8Rng,
    fixed_episode: Option<Episode>,
}

pub(crate) fn episode_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EPISODES);
    rng
}

impl Trainer {
    pub fn new(config: RunConfig, index: Arc<DatasetIndex>) -> Result<Self> {
        config.validate()?;
        let (split, keys) = training_split(&config, &index)?;
        let model = PartSegModel::new(config.model.clone(), &keys, config.seed)?;
        let rng = episode_stream(config.seed);
        Self::assemble(config, index, split, model, BTreeMap::new(), 0, rng)
    }

    pub(crate) fn assemble(
        config: RunConfig,
        index: Arc<DatasetIndex>,
        split: SplitSpec,
        model: PartSegModel,
        velocity: BTreeMap<String, Tensor>,
        step: u64,
        episode_rng: ChaCha8Rng,
    ) -> Result<Self> {
        let fixed_episode = if config.overfit_one_episode {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(STREAM_FIXED_EPISODE);
            Some(sample_episode(&index, &split, Partition::Base, config.k_shot, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            model,
            index,
            split,
            velocity,
            step,
            episode_rng,
            fixed_episode,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.optim.max_steps
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn next_episode(&mut self) -> Result<Episode> {
        match &self.fixed_episode {
            Some(e) => Ok(e.clone()),
            None => sample_episode(
                &self.index,
                &self.split,
                Partition::Base,
                self.config.k_shot,
                &mut self.episode_rng,
            ),
        }
    }

    /// One optimizer step on the next base episode.
    pub fn step(&mut self) -> Result<StepRecord> {
        let o = self.config.optim.clone();
        let lr = poly_lr(o.base_lr, self.step, o.max_steps, o.poly_power);
        let episode = self.next_episode()?;
        let mut tape = Tape::new();
        let fwd = self.model.forward_episode(&mut tape, &episode, Mode::Train)?;
        let mask = downsample_mask(&episode.query.mask, self.model.stride());
        let loss = self.model.loss(&mut tape, &fwd, &mask)?;
        let total = tape.value(loss.total).data()[0];
        let vcl = tape.value(loss.visual).data()[0];
        let tcl = loss.textual.map(|t| tape.value(t).data()[0]);
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total} at step {} on episode {}",
                self.step, episode.id
            )));
        }
        let mut grads = tape.backward(loss.total)?.by_name();
        if let Some(bad) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {} at step {} on episode {}",
                bad.0, self.step, episode.id
            )));
        }
        if let Some(clip) = o.grad_clip {
            let norm = grads
                .values()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                grads
                    .values_mut()
                    .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
            }
        }
        self.apply_sgd(&grads, lr, o.momentum, o.weight_decay)?;
        for key in &fwd.shared_keys {
            self.model.bank.ema_update(key)?;
        }
        let record = StepRecord {
            step: self.step,
            episode: episode.id,
            loss: total,
            loss_vcl: vcl,
            loss_tcl: tcl,
            lr,
            eval_miou: None,
        };
        self.step += 1;
        Ok(record)
    }

    /// PyTorch-style momentum SGD: `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
    /// Parameters without a gradient this step are left untouched.
    fn apply_sgd(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64, mu: f64, wd: f64) -> Result<()> {
        for (name, g) in grads {
            if !self.model.is_trainable(name) {
                continue;
            }
            let target: &mut Tensor = match name.strip_prefix("bank.") {
                Some(key) => &mut self.model.bank.entry_mut(key)?.current,
                None => self
                    .model
                    .params
                    .get_mut(name)
                    .ok_or_else(|| Error::Lookup(format!("parameter {name}")))?,
            };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(target.data_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Steps until `max_steps`, handing every record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&mut Self, StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let record = self.step()?;
            on_step(self, record)?;
        }
        Ok(())
    }
}

/// JSON-lines writer with sorted keys.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, append: bool) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = crate::json::to_line(record)?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
