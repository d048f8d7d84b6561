//! Episodic evaluation without optimization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode_from, DatasetIndex, Partition, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::miou;
use crate::model::PartSegModel;

pub const STREAM_EVAL: u64 = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                episodes: 0,
                mean: 0.0,
                std: 0.0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            episodes: values.len(),
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub design: String,
    pub alpha: f64,
    pub k_shot: usize,
    pub seed: u64,
    pub categories: Vec<String>,
    pub miou: Summary,
    pub per_category: BTreeMap<String, Summary>,
    /// Mean IoU per `category/part` over the episodes where it was valid.
    pub per_class: BTreeMap<String, Summary>,
    pub episode_ids: Vec<String>,
    pub episode_miou: Vec<f64>,
    /// Prompts that found their part key in the shared-token bank.
    pub shared_hits: usize,
    /// Prompts that fell back to an empty shared block.
    pub shared_fallbacks: usize,
}

/// Mean ± std mIoU over `episodes` episodes drawn from `categories` with a
/// stream seeded by `seed`. The model is only read.
pub fn evaluate_categories(
    model: &PartSegModel,
    index: &DatasetIndex,
    categories: &[String],
    k_shot: usize,
    episodes: usize,
    seed: u64,
    alpha: f64,
) -> Result<EvalReport> {
    for c in categories {
        if index.category(c).is_none() {
            return Err(Error::Lookup(format!("category {c} is not in the dataset")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_EVAL);
    let mut ids = Vec::with_capacity(episodes);
    let mut scores = Vec::with_capacity(episodes);
    let mut by_category: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut by_class: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let (mut hits, mut fallbacks) = (0, 0);
    let uses_bank = model.bank.n_tokens() > 0;
    for _ in 0..episodes {
        let episode = sample_episode_from(index, categories, k_shot, &mut rng)?;
        let pred = model.predict_with_alpha(&episode, alpha)?;
        let report = miou(&pred.labels, &episode.query.mask, episode.category.part_count())?;
        if uses_bank {
            for k in 0..=episode.category.part_count() as u8 {
                if model.bank.contains(&model.shared_key(&episode.category, k)) {
                    hits += 1;
                } else {
                    fallbacks += 1;
                }
            }
        }
        for (k, v) in report.per_class.iter().enumerate() {
            if let Some(v) = v {
                let name = match k {
                    0 => "background",
                    _ => episode.category.parts[k - 1].raw_name.as_str(),
                };
                by_class
                    .entry(format!("{}/{name}", episode.category.name))
                    .or_default()
                    .push(*v);
            }
        }
        by_category
            .entry(episode.category.name.clone())
            .or_default()
            .push(report.mean);
        ids.push(episode.id);
        scores.push(report.mean);
    }
    Ok(EvalReport {
        design: model.config.design.to_string(),
        alpha,
        k_shot,
        seed,
        categories: categories.to_vec(),
        miou: Summary::of(&scores),
        per_category: by_category.iter().map(|(k, v)| (k.clone(), Summary::of(v))).collect(),
        per_class: by_class.iter().map(|(k, v)| (k.clone(), Summary::of(v))).collect(),
        episode_ids: ids,
        episode_miou: scores,
        shared_hits: hits,
        shared_fallbacks: fallbacks,
    })
}

/// Evaluates on one partition of a split.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &PartSegModel,
    index: &DatasetIndex,
    split: &SplitSpec,
    partition: Partition,
    k_shot: usize,
    episodes: usize,
    seed: u64,
    alpha: f64,
) -> Result<EvalReport> {
    let categories: Vec<String> = split.categories(partition).iter().cloned().collect();
    evaluate_categories(model, index, &categories, k_shot, episodes, seed, alpha)
}

/// Evaluates a model trained elsewhere on dataset `target`. With
/// `categories` unset, every category with enough samples is used. Part
/// names absent from the bank get an empty shared block.
pub fn cross_domain_evaluate(
    model: &PartSegModel,
    target: &DatasetIndex,
    categories: Option<&[String]>,
    k_shot: usize,
    episodes: usize,
    seed: u64,
    alpha: f64,
) -> Result<EvalReport> {
    let candidates: Vec<String> = match categories {
        Some(c) => c.to_vec(),
        None => target.category_names(),
    };
    let evaluable: Vec<String> = candidates
        .into_iter()
        .filter(|c| target.samples(c).len() > k_shot)
        .collect();
    if evaluable.is_empty() {
        return Err(Error::Sampling(format!(
            "no category of {} has the {} samples an episode needs",
            target.root.display(),
            k_shot + 1
        )));
    }
    evaluate_categories(model, target, &evaluable, k_shot, episodes, seed, alpha)
}
