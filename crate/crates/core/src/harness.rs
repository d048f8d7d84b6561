//! Training runs and the paired-stream ablation and momentum-sweep harnesses.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{DatasetIndex, Partition};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Summary};
use crate::prompt::PromptDesign;
use crate::trainer::{MetricsWriter, Trainer, CHECKPOINT_FILE, METRICS_FILE, RESOLVED_CONFIG_FILE};

/// Trains `config` to completion. With `out` set, writes the resolved
/// config, one metrics line per step and the final checkpoint there.
pub fn run_training(config: RunConfig, index: Arc<DatasetIndex>, out: Option<&Path>) -> Result<Trainer> {
    let trainer = Trainer::new(config, index)?;
    continue_training(trainer, out, false, None)
}

/// Continues `trainer` to `max_steps`, or only up to step `stop_after` when
/// given; `append` keeps existing metrics. The checkpoint is written either way.
pub fn continue_training(
    mut trainer: Trainer,
    out: Option<&Path>,
    append: bool,
    stop_after: Option<u64>,
) -> Result<Trainer> {
    let mut metrics = match out {
        Some(dir) => {
            crate::json::write_pretty(&dir.join(RESOLVED_CONFIG_FILE), &trainer.config)?;
            Some(MetricsWriter::create(&dir.join(METRICS_FILE), append)?)
        }
        None => None,
    };
    let eval_every = trainer.config.eval_every;
    let stop = stop_after.unwrap_or(u64::MAX);
    while !trainer.is_done() && trainer.step_count() < stop {
        let mut record = trainer.step()?;
        let t = &trainer;
        if eval_every > 0 && (record.step + 1) % eval_every == 0 {
            let c = &t.config;
            let report = evaluate(
                &t.model,
                &t.index,
                &t.split,
                Partition::Novel,
                c.k_shot,
                c.eval_episodes,
                c.eval_seed,
                c.model.alpha,
            )?;
            record.eval_miou = Some(report.miou.mean);
        }
        if record.step % 100 == 0 {
            log::info!(
                "step {} loss {:.4} lr {:.5}",
                record.step,
                record.loss,
                record.lr
            );
        }
        if let Some(m) = metrics.as_mut() {
            m.write(&record)?;
        }
    }
    if let (Some(dir), Some(m)) = (out, metrics.as_mut()) {
        m.flush()?;
        Checkpoint::from_trainer(&trainer).save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(trainer)
}

/// Evaluates a trained run on its novel split with the run's eval settings.
pub fn evaluate_run(trainer: &Trainer) -> Result<EvalReport> {
    let c = &trainer.config;
    evaluate(
        &trainer.model,
        &trainer.index,
        &trainer.split,
        Partition::Novel,
        c.k_shot,
        c.eval_episodes,
        c.eval_seed,
        c.model.alpha,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    ProtoNet,
    /// Text-encoder prompts without visual tokens.
    TextOnly,
    Lgp,
    Lpp,
    Ppl,
    /// The full design with the shared block disabled.
    PplNoShared,
}

pub const DEFAULT_ABLATION: [AblationVariant; 5] = [
    AblationVariant::ProtoNet,
    AblationVariant::TextOnly,
    AblationVariant::Lgp,
    AblationVariant::Lpp,
    AblationVariant::Ppl,
];

impl AblationVariant {
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        match self {
            Self::ProtoNet => m.design = PromptDesign::ProtoNet,
            Self::TextOnly => {
                m.design = PromptDesign::Ppl;
                m.n_specific = 0;
                m.n_shared = 0;
            }
            Self::Lgp => m.design = PromptDesign::Lgp,
            Self::Lpp => m.design = PromptDesign::Lpp,
            Self::Ppl => m.design = PromptDesign::Ppl,
            Self::PplNoShared => {
                m.design = PromptDesign::Ppl;
                m.n_shared = 0;
            }
        }
        c
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ProtoNet => "protonet",
            Self::TextOnly => "text-only",
            Self::Lgp => "lgp",
            Self::Lpp => "lpp",
            Self::Ppl => "ppl",
            Self::PplNoShared => "ppl-no-shared",
        })
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "protonet" => Ok(Self::ProtoNet),
            "text-only" => Ok(Self::TextOnly),
            "lgp" => Ok(Self::Lgp),
            "lpp" => Ok(Self::Lpp),
            "ppl" => Ok(Self::Ppl),
            "ppl-no-shared" => Ok(Self::PplNoShared),
            other => Err(Error::Argument(format!(
                "unknown ablation variant {other:?} (expected protonet, text-only, lgp, lpp, ppl or ppl-no-shared)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub design: PromptDesign,
    pub n_specific: usize,
    pub n_shared: usize,
    pub miou: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub eval_seed: u64,
    pub split_id: usize,
    pub max_steps: u64,
    pub episode_ids: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn check_paired(ids: &mut Option<Vec<String>>, report: &EvalReport) -> Result<()> {
    match ids {
        None => *ids = Some(report.episode_ids.clone()),
        Some(expected) if *expected != report.episode_ids => {
            return Err(Error::Contract("evaluation episode streams diverged".into()))
        }
        Some(_) => {}
    }
    Ok(())
}

/// Trains and evaluates every variant on the same training seed and the same
/// evaluation episodes. Per-variant runs go to `out/<variant>/`.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[AblationVariant],
    index: Arc<DatasetIndex>,
    out: Option<&Path>,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut ids = None;
    for &v in variants {
        let config = v.apply(base);
        let dir = out.map(|o| o.join(v.to_string()));
        let trainer = run_training(config, index.clone(), dir.as_deref())?;
        let report = evaluate_run(&trainer)?;
        check_paired(&mut ids, &report)?;
        let m = &trainer.config.model;
        rows.push(AblationRow {
            variant: v,
            design: m.design,
            n_specific: m.specific_tokens(),
            n_shared: m.shared_tokens(),
            miou: report.miou,
        });
    }
    Ok(AblationReport {
        seed: base.seed,
        eval_seed: base.eval_seed,
        split_id: base.split_id,
        max_steps: base.optim.max_steps,
        episode_ids: ids.unwrap_or_default(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub momentum: f64,
    pub miou: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub eval_seed: u64,
    pub split_id: usize,
    pub max_steps: u64,
    pub episode_ids: Vec<String>,
    pub rows: Vec<SweepRow>,
}

pub const DEFAULT_SWEEP: [f64; 4] = [0.0, 0.5, 0.9, 0.99];

/// One train + evaluate per momentum value over shared episode streams.
/// Runs go to `out/m=<value>/`.
pub fn sweep_m(
    base: &RunConfig,
    values: &[f64],
    index: Arc<DatasetIndex>,
    out: Option<&Path>,
) -> Result<SweepReport> {
    for &m in values {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
        }
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut ids = None;
    for &m in values {
        let mut config = base.clone();
        config.model.momentum = m;
        let dir = out.map(|o| o.join(format!("m={m}")));
        let trainer = run_training(config, index.clone(), dir.as_deref())?;
        let report = evaluate_run(&trainer)?;
        check_paired(&mut ids, &report)?;
        rows.push(SweepRow {
            momentum: m,
            miou: report.miou,
        });
    }
    Ok(SweepReport {
        seed: base.seed,
        eval_seed: base.eval_seed,
        split_id: base.split_id,
        max_steps: base.optim.max_steps,
        episode_ids: ids.unwrap_or_default(),
        rows,
    })
}
