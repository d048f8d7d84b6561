use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use partseg_core::checkpoint::Checkpoint;
use partseg_core::config::RunConfig;
use partseg_core::data::{
    build_splits, generate_synthetic_dataset, ingest_dataset, DatasetIndex, Partition, SynthConfig,
};
use partseg_core::error::{Error, Result};
use partseg_core::eval::{cross_domain_evaluate, evaluate};
use partseg_core::harness::{
    continue_training, run_ablation, sweep_m, AblationVariant, DEFAULT_ABLATION,
};
use partseg_core::json;
use partseg_core::prompt::PromptDesign;
use partseg_core::trainer::{Trainer, CHECKPOINT_FILE, RESOLVED_CONFIG_FILE};

mod plot;

#[derive(Parser)]
#[command(
    name = "partseg",
    version,
    about = "Few-shot part segmentation with part-aware prompt learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic part-annotated dataset.
    GenData(GenDataArgs),
    /// Train on base-split episodes.
    Train(TrainArgs),
    /// Evaluate a checkpoint on novel-split episodes.
    Eval(EvalArgs),
    /// Train and evaluate each prompt design on paired episode streams.
    Ablate(AblateArgs),
    /// Train and evaluate one run per EMA momentum value.
    SweepM(SweepArgs),
    /// Evaluate a checkpoint on another dataset without further training.
    Xdomain(XdomainArgs),
    /// Render loss curves, bar charts and qualitative panels.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON generator config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of categories (3 to 12).
    #[arg(long)]
    categories: Option<usize>,
    /// Samples per category.
    #[arg(long)]
    samples: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long, default_value = "data/synth")]
    out: PathBuf,
}

#[derive(Args, Default)]
struct RunOverrides {
    /// JSON run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Prompt design.
    #[arg(long, value_enum)]
    design: Option<DesignArg>,
    /// Initialization and training-episode seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Split id, 0 to 3.
    #[arg(long)]
    split: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    k_shot: Option<usize>,
    /// Training steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Base learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    n_specific: Option<usize>,
    #[arg(long)]
    n_shared: Option<usize>,
    /// EMA momentum of the shared-token bank.
    #[arg(long)]
    momentum: Option<f64>,
    /// Visual weight in fused prediction.
    #[arg(long)]
    alpha: Option<f64>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Evaluate every this many steps (0 disables).
    #[arg(long)]
    eval_every: Option<u64>,
    /// Train on one fixed episode.
    #[arg(long)]
    overfit_one_episode: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignArg {
    Protonet,
    Lgp,
    Lpp,
    Ppl,
}

impl From<DesignArg> for PromptDesign {
    fn from(d: DesignArg) -> Self {
        match d {
            DesignArg::Protonet => PromptDesign::ProtoNet,
            DesignArg::Lgp => PromptDesign::Lgp,
            DesignArg::Lpp => PromptDesign::Lpp,
            DesignArg::Ppl => PromptDesign::Ppl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Base,
    Novel,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Continue from a checkpoint file or run directory; run flags are ignored.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint and exit once this many steps are done; `--resume` continues.
    #[arg(long)]
    stop_after: Option<u64>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; defaults to the checkpoint's.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long, value_enum, default_value = "novel")]
    partition: PartitionArg,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Comma-separated variants: protonet, text-only, lgp, lpp, ppl, ppl-no-shared.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunOverrides,
    /// Comma-separated momentum values.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,0.9,0.99")]
    values: Vec<f64>,
    #[arg(long, default_value = "runs/sweep-m")]
    out: PathBuf,
}

#[derive(Args)]
struct XdomainArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Target dataset directory.
    #[arg(long)]
    target: PathBuf,
    /// Comma-separated target categories; defaults to all with enough samples.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long, default_value = "runs/xdomain")]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// metrics.jsonl files; one loss curve each.
    #[arg(long)]
    metrics: Vec<PathBuf>,
    /// sweep-m report.
    #[arg(long)]
    sweep: Option<PathBuf>,
    /// Ablation report.
    #[arg(long)]
    ablation: Option<PathBuf>,
    /// Evaluation report; plots per-class IoU.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Checkpoint for a qualitative panel.
    #[arg(long, requires = "episode")]
    ckpt: Option<PathBuf>,
    /// Episode id for the qualitative panel.
    #[arg(long, requires = "ckpt")]
    episode: Option<String>,
    /// Dataset for the qualitative panel; defaults to the checkpoint's.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "runs/plots")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepM(a) => sweep(a),
        Command::Xdomain(a) => xdomain(a),
        Command::Plot(a) => plot::run(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => read_config::<SynthConfig>(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.categories {
        config.categories = v;
    }
    if let Some(v) = a.samples {
        config.samples_per_category = v;
    }
    if let Some(v) = a.size {
        config.image_size = v;
    }
    config.validate()?;
    let index = generate_synthetic_dataset(&config, a.seed, &a.out)?;
    println!(
        "wrote {} samples in {} categories to {}",
        index.sample_count(),
        index.categories.len(),
        a.out.display()
    );
    for c in &index.categories {
        let parts: Vec<&str> = c.parts.iter().map(|p| p.normalized_name.as_str()).collect();
        println!("  {:<10} {:>3} samples  parts: {}", c.name, index.samples(&c.name).len(), parts.join(", "));
    }
    Ok(())
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve(o: &RunOverrides) -> Result<RunConfig> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &o.dataset {
        c.dataset = v.clone();
    }
    if let Some(v) = o.design {
        c.model.design = v.into();
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.split {
        c.split_id = v;
    }
    if let Some(v) = o.split_seed {
        c.split_seed = v;
    }
    if let Some(v) = o.k_shot {
        c.k_shot = v;
    }
    if let Some(v) = o.steps {
        c.optim.max_steps = v;
    }
    if let Some(v) = o.lr {
        c.optim.base_lr = v;
    }
    if let Some(v) = o.grad_clip {
        c.optim.grad_clip = Some(v);
    }
    if let Some(v) = o.n_specific {
        c.model.n_specific = v;
    }
    if let Some(v) = o.n_shared {
        c.model.n_shared = v;
    }
    if let Some(v) = o.momentum {
        c.model.momentum = v;
    }
    if let Some(v) = o.alpha {
        c.model.alpha = v;
    }
    if let Some(v) = o.episodes {
        c.eval_episodes = v;
    }
    if let Some(v) = o.eval_seed {
        c.eval_seed = v;
    }
    if let Some(v) = o.eval_every {
        c.eval_every = v;
    }
    if o.overfit_one_episode {
        c.overfit_one_episode = true;
    }
    c.validate()?;
    c.validate_paths()?;
    Ok(c)
}

fn load_index(path: &Path) -> Result<Arc<DatasetIndex>> {
    Ok(Arc::new(ingest_dataset(path)?))
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn write_failure(out: &Path, e: &Error) {
    let record = serde_json::json!({ "error": e.to_string(), "exit_code": e.exit_code() });
    if let Err(w) = json::write_pretty(&out.join("failure.json"), &record) {
        log::error!("could not record the failure: {w}");
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let result = (|| match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(&checkpoint_path(p))?;
            let index = load_index(&ckpt.config.dataset)?;
            let trainer = ckpt.resume(index)?;
            continue_training(trainer, Some(&a.out), true, a.stop_after)
        }
        None => {
            let config = resolve(&a.run)?;
            let index = load_index(&config.dataset)?;
            continue_training(Trainer::new(config, index)?, Some(&a.out), false, a.stop_after)
        }
    })();
    match result {
        Ok(t) => {
            println!(
                "trained {} steps; checkpoint at {}",
                t.step_count(),
                a.out.join(CHECKPOINT_FILE).display()
            );
            Ok(())
        }
        Err(e) => {
            write_failure(&a.out, &e);
            Err(e)
        }
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&checkpoint_path(&a.ckpt))?;
    let mut config = ckpt.config.clone();
    if let Some(v) = &a.dataset {
        config.dataset = v.clone();
    }
    if let Some(v) = a.episodes {
        config.eval_episodes = v;
    }
    if let Some(v) = a.alpha {
        config.model.alpha = v;
    }
    if let Some(v) = a.eval_seed {
        config.eval_seed = v;
    }
    config.validate()?;
    config.validate_paths()?;
    let index = load_index(&config.dataset)?;
    let split = build_splits(&index, config.split_id, config.split_seed)?;
    let model = ckpt.model()?;
    let partition = match a.partition {
        PartitionArg::Base => Partition::Base,
        PartitionArg::Novel => Partition::Novel,
    };
    let report = evaluate(
        &model,
        &index,
        &split,
        partition,
        config.k_shot,
        config.eval_episodes,
        config.eval_seed,
        config.model.alpha,
    )?;
    json::write_pretty(&a.out.join(RESOLVED_CONFIG_FILE), &config)?;
    json::write_pretty(&a.out.join("eval_report.json"), &report)?;
    println!(
        "mIoU {:.4} ± {:.4} over {} episodes",
        report.miou.mean, report.miou.std, report.miou.episodes
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let config = resolve(&a.run)?;
    let variants = match &a.variants {
        Some(v) => v.iter().map(|s| s.parse()).collect::<Result<Vec<AblationVariant>>>()?,
        None => DEFAULT_ABLATION.to_vec(),
    };
    let index = load_index(&config.dataset)?;
    json::write_pretty(&a.out.join(RESOLVED_CONFIG_FILE), &config)?;
    let report = run_ablation(&config, &variants, index, Some(&a.out))?;
    json::write_pretty(&a.out.join("ablation_report.json"), &report)?;
    for row in &report.rows {
        println!("{:<14} mIoU {:.4} ± {:.4}", row.variant.to_string(), row.miou.mean, row.miou.std);
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let config = resolve(&a.run)?;
    let index = load_index(&config.dataset)?;
    json::write_pretty(&a.out.join(RESOLVED_CONFIG_FILE), &config)?;
    let report = sweep_m(&config, &a.values, index, Some(&a.out))?;
    json::write_pretty(&a.out.join("sweep_report.json"), &report)?;
    for row in &report.rows {
        println!("m={:<6} mIoU {:.4} ± {:.4}", row.momentum, row.miou.mean, row.miou.std);
    }
    Ok(())
}

fn xdomain(a: XdomainArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&checkpoint_path(&a.ckpt))?;
    let mut config = ckpt.config.clone();
    if let Some(v) = a.episodes {
        config.eval_episodes = v;
    }
    if let Some(v) = a.alpha {
        config.model.alpha = v;
    }
    if let Some(v) = a.eval_seed {
        config.eval_seed = v;
    }
    config.validate()?;
    let target = load_index(&a.target)?;
    let model = ckpt.model()?;
    let report = cross_domain_evaluate(
        &model,
        &target,
        a.categories.as_deref(),
        config.k_shot,
        config.eval_episodes,
        config.eval_seed,
        config.model.alpha,
    )?;
    let resolved = serde_json::json!({ "run": json::to_value(&config)?, "target": a.target });
    json::write_pretty(&a.out.join(RESOLVED_CONFIG_FILE), &resolved)?;
    json::write_pretty(&a.out.join("xdomain_report.json"), &report)?;
    println!(
        "mIoU {:.4} ± {:.4} over {} episodes ({} shared-token hits, {} fallbacks)",
        report.miou.mean,
        report.miou.std,
        report.miou.episodes,
        report.shared_hits,
        report.shared_fallbacks
    );
    Ok(())
}
