#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use partseg_core::config::RunConfig;
use partseg_core::data::{generate_synthetic_dataset, DatasetIndex, SynthConfig};
use partseg_core::encoders::EncoderConfig;
use partseg_core::model::ModelConfig;
use tempfile::TempDir;

pub struct Dataset {
    pub dir: TempDir,
    pub index: Arc<DatasetIndex>,
}

impl Dataset {
    pub fn root(&self) -> PathBuf {
        self.index.root.clone()
    }
}

pub fn synth(categories: usize, samples: usize, size: usize, seed: u64) -> Dataset {
    let dir = TempDir::new().unwrap();
    let config = SynthConfig {
        categories,
        samples_per_category: samples,
        image_size: size,
        ..SynthConfig::default()
    };
    let index = generate_synthetic_dataset(&config, seed, &dir.path().join("data")).unwrap();
    Dataset {
        dir,
        index: Arc::new(index),
    }
}

/// A tiny model that keeps gradient probes and short runs fast.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        n_specific: 2,
        n_shared: 2,
        encoder: EncoderConfig {
            channels: 8,
            base_width: 4,
            token_dim: 6,
            n_text: 2,
            text_hidden: 12,
            context_limit: 8,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn small_run(ds: &Dataset, steps: u64) -> RunConfig {
    RunConfig {
        dataset: ds.root(),
        eval_episodes: 10,
        model: small_model(),
        optim: partseg_core::config::OptimConfig {
            max_steps: steps,
            ..Default::default()
        },
        ..RunConfig::default()
    }
}
