//! The `sampo` command line: data generation, fine-tuning, evaluation,
//! sweeps and the acceptance suite, all driven by one flat config file.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sampo_core::eval::{evaluate, full_point_sweep, hyperparam_sweep, key_value_csv, ratio_sweep, SweepAxis};
use sampo_core::model::{load_checkpoint, save_checkpoint, ArchConfig, ModelParams};
use sampo_core::repro::{run_acceptance, AcceptanceConfig};
use sampo_core::rng::{derive_seed, streams};
use sampo_core::synthdata::{generate_scenes, read_dataset, write_dataset, DataRatio, SceneSpec, TaskMode};
use sampo_core::training::{pretrain_base, run_ablation_variant, with_pool, Dataset, Variant};
use sampo_core::Error;

pub use config::RunConfig;

/// Environment variable naming the default root for run directories.
pub const OUTPUT_ROOT_ENV: &str = "SAMPO_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "sampo", version, about = "Preference fine-tuning of a promptable segmenter")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every command shares.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set loss.beta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for mining and evaluation.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Sequential execution; identical inputs give identical bytes.
    #[arg(long)]
    pub deterministic: bool,
    /// Run directory. Defaults to a timestamped directory under
    /// $SAMPO_OUTPUT_ROOT (or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Points,
    Ratio,
    LambdaDw,
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Acceptance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Val,
    Train,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        /// Config file holding the scene.* keys (same format as --config).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a base model; pre-trains one first unless --base is given.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Loss-term ablation: full, no_K1, no_K2, no_K3, K3_only, K1_only.
        #[arg(long, default_value = "full")]
        variant: String,
        /// Adapter-free base checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Dice of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<TaskMode>,
        #[arg(long)]
        pos: Option<usize>,
        #[arg(long)]
        neg: Option<usize>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Prompt-count grid of one checkpoint, or train-and-evaluate sweeps
    /// over data ratio, lambda_dw or adapter rank from a base checkpoint.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        /// The model for `points`; the base for the training sweeps
        /// (pre-trained on the fly when omitted).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a verification suite and print one verdict per criterion.
    Repro {
        #[arg(long, value_enum, default_value = "acceptance")]
        suite: Suite,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or output policy: exit 2.
    Usage(String),
    /// Anything that failed while running: exit 1.
    Run(Error),
    /// The command ran but its verdict is negative (failed criteria): exit 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) | CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Run(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(Error::io(path, e))
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn load_config(common: &Common, file: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match file.or(common.config.as_deref()) {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

/// Picks and prepares the run directory, refusing to clobber a non-empty
/// one unless `force` is set.
pub fn prepare_run_dir(command: &str, explicit: Option<&Path>, cfg: &RunConfig, force: bool) -> CliResult<PathBuf> {
    let dir = match explicit.or(cfg.output_dir.as_deref()) {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S").to_string();
            let root = output_root();
            let mut dir = root.join(format!("{command}-{stamp}"));
            let mut n = 1;
            while dir.exists() {
                dir = root.join(format!("{command}-{stamp}-{n}"));
                n += 1;
            }
            dir
        }
    };
    let occupied = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

/// `config.txt` (the full key = value echo) and `run.json` (version stamp).
fn write_run_files(dir: &Path, command: &str, cfg: &RunConfig) -> CliResult<()> {
    let text = cfg.to_text();
    let p = dir.join("config.txt");
    fs::write(&p, &text).map_err(|e| io_err(&p, e))?;
    let stamp = serde_json::json!({
        "tool": "sampo",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": text,
    });
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&stamp).expect("json")).map_err(|e| io_err(&p, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn load_data(dir: &Path, cfg: &RunConfig) -> CliResult<(SceneSpec, Dataset)> {
    let (manifest, scenes) = read_dataset(dir)?;
    Ok((manifest.spec, Dataset::new(scenes, cfg.seed)?))
}

fn arch_for(spec: &SceneSpec, cfg: &RunConfig) -> ArchConfig {
    ArchConfig {
        height: spec.height,
        width: spec.width,
        ..cfg.arch()
    }
}

/// Loads `--base` or pre-trains a base on a separate corpus generated
/// from the dataset's scene spec, saving it as `base.ckpt`.
fn obtain_base(base: Option<&Path>, spec: &SceneSpec, cfg: &RunConfig, dir: &Path) -> CliResult<ModelParams> {
    if let Some(p) = base {
        let (params, _) = load_checkpoint(p)?;
        if params.has_adapters() {
            return Err(CliError::Usage(format!("{}: base checkpoint must be adapter-free", p.display())));
        }
        return Ok(params);
    }
    let seed = derive_seed(cfg.seed, streams::DATA, &[u64::MAX]);
    info!("pre-training a base model on {} fresh scenes", cfg.pretrain_scenes);
    let corpus = Dataset::new(generate_scenes(spec, seed, cfg.pretrain_scenes)?, seed)?;
    let arch = arch_for(spec, cfg);
    let outcome = with_pool(cfg.train.jobs, cfg.deterministic, || pretrain_base(&corpus, &arch, &cfg.pretrain))??;
    info!(
        "base model: validation dice {:.4} after {} steps",
        outcome.best_val_dice, outcome.steps_run
    );
    let echo = serde_json::json!({ "pretrain": serde_json::to_value(&cfg.pretrain).expect("json"), "config": cfg.to_text() });
    save_checkpoint(&outcome.params, &echo, &dir.join("base.ckpt"))?;
    Ok(outcome.params)
}

pub fn cmd_gen_data(spec_file: Option<&Path>, count: Option<usize>, common: &Common) -> CliResult<String> {
    let cfg = load_config(common, spec_file)?;
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("gen-data needs --out".into()))?;
    let dir = prepare_run_dir("gen-data", Some(out), &cfg, common.force)?;
    let count = count.unwrap_or(cfg.scene_count);
    let scenes = generate_scenes(&cfg.scene, cfg.seed, count)?;
    let manifest = write_dataset(&scenes, &cfg.scene, &dir)?;
    write_file(&dir.join("config.txt"), cfg.to_text())?;
    Ok(format!(
        "wrote {count} scenes to {}\nmanifest checksum {}",
        dir.display(),
        manifest.checksum
    ))
}

pub fn cmd_train(data: &Path, variant: &str, base: Option<&Path>, common: &Common) -> CliResult<String> {
    let cfg = load_config(common, None)?;
    let variant: Variant = variant.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let (spec, dataset) = load_data(data, &cfg)?;
    let dir = prepare_run_dir("train", common.out.as_deref(), &cfg, common.force)?;
    write_run_files(&dir, "train", &cfg)?;
    let base = obtain_base(base, &spec, &cfg, &dir)?;
    let outcome = run_ablation_variant(variant, &base, &dataset, &cfg.train, Some(&dir))?;
    let r = &outcome.report;
    Ok(format!(
        "variant {} finished: {} steps, held-out dice {:.4} (initial {:.4}, best {:.4} at epoch {})\nrun directory {}",
        variant.name(),
        r.steps.len(),
        r.epoch_val_dice.last().copied().unwrap_or(f64::NAN),
        r.initial_val_dice,
        r.best_val_dice,
        r.best_epoch,
        dir.display()
    ))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    task: Option<TaskMode>,
    pos: Option<usize>,
    neg: Option<usize>,
    split: Split,
    common: &Common,
) -> CliResult<String> {
    let cfg = load_config(common, None)?;
    let (params, _) = load_checkpoint(checkpoint)?;
    let (_, dataset) = load_data(data, &cfg)?;
    let mut protocol = cfg.eval.clone();
    if let Some(t) = task {
        protocol.task_mode = t;
    }
    protocol.num_pos = pos.unwrap_or(protocol.num_pos);
    protocol.num_neg = neg.unwrap_or(protocol.num_neg);
    protocol.validate()?;
    let scenes = match split {
        Split::Val => dataset.validation_scenes(),
        Split::Train => dataset.train_scenes(DataRatio::P100),
        Split::All => dataset.scenes.iter().collect(),
    };
    if scenes.is_empty() {
        return Err(CliError::Usage("the selected split is empty".into()));
    }
    let dir = prepare_run_dir("eval", common.out.as_deref(), &cfg, common.force)?;
    write_run_files(&dir, "eval", &cfg)?;
    let result = with_pool(cfg.train.jobs, cfg.deterministic, || evaluate(&params, &scenes, &protocol))??;
    write_file(&dir.join("eval.csv"), result.to_csv())?;
    Ok(format!(
        "mean_dice {:.4} over {} scenes ({} skipped), task {} with {} positive / {} negative points\nrun directory {}",
        result.mean_dice,
        result.evaluated,
        result.skipped,
        protocol.task_mode,
        protocol.num_pos,
        protocol.num_neg,
        dir.display()
    ))
}

pub fn cmd_sweep(kind: SweepKind, checkpoint: Option<&Path>, data: &Path, common: &Common) -> CliResult<String> {
    let cfg = load_config(common, None)?;
    let (spec, dataset) = load_data(data, &cfg)?;
    let dir = prepare_run_dir("sweep", common.out.as_deref(), &cfg, common.force)?;
    write_run_files(&dir, "sweep", &cfg)?;
    let mut summary = String::new();
    match kind {
        SweepKind::Points => {
            let path = checkpoint.ok_or_else(|| CliError::Usage("--kind points needs --checkpoint".into()))?;
            let (params, _) = load_checkpoint(path)?;
            let val = dataset.validation_scenes();
            let protocol = cfg.train.validation_protocol();
            let sweep = with_pool(cfg.train.jobs, cfg.deterministic, || full_point_sweep(&params, &val, &protocol))??;
            write_file(&dir.join("sweep_points.csv"), sweep.to_csv())?;
            sweep.heatmap_png(&dir.join("sweep_points.png"))?;
            writeln!(summary, "110-cell grid, std dev {:.4}", sweep.std_dev()).expect("string write");
        }
        _ => {
            let base = obtain_base(checkpoint, &spec, &cfg, &dir)?;
            let rows = match kind {
                SweepKind::Ratio => ratio_sweep(&base, &dataset, &cfg.train, &DataRatio::ALL, Some(&dir))?,
                SweepKind::LambdaDw => hyperparam_sweep(SweepAxis::LambdaDw, &base, &dataset, &cfg.train, Some(&dir))?,
                _ => hyperparam_sweep(SweepAxis::Rank, &base, &dataset, &cfg.train, Some(&dir))?,
            };
            let rows: Vec<_> = rows.into_iter().map(|r| r.row).collect();
            let name = match kind {
                SweepKind::Ratio => "ratio",
                SweepKind::LambdaDw => "lambda_dw",
                _ => "rank",
            };
            write_file(&dir.join(format!("sweep_{name}.csv")), key_value_csv(&rows))?;
            for r in &rows {
                writeln!(summary, "{} = {}: mean dice {:.4}", r.key, r.value, r.mean_dice).expect("string write");
            }
        }
    }
    write!(summary, "run directory {}", dir.display()).expect("string write");
    Ok(summary)
}

pub fn cmd_repro(suite: Suite, common: &Common) -> CliResult<String> {
    let Suite::Acceptance = suite;
    let cfg = load_config(common, None)?;
    let dir = prepare_run_dir("repro", common.out.as_deref(), &cfg, common.force)?;
    write_run_files(&dir, "repro", &cfg)?;
    let acceptance = AcceptanceConfig {
        work_dir: dir.join("scratch"),
        ..AcceptanceConfig::default()
    };
    let outcomes = with_pool(cfg.train.jobs, false, || run_acceptance(&acceptance, |o| println!("{o}")))?;
    let mut table = String::from("criterion,verdict,seconds,detail\n");
    for o in &outcomes {
        writeln!(
            table,
            "{},{},{:.1},\"{}\"",
            o.id,
            if o.passed { "pass" } else { "fail" },
            o.seconds,
            o.detail.replace('"', "'")
        )
        .expect("string write");
    }
    write_file(&dir.join("acceptance.csv"), &table)?;
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id.to_string()).collect();
    if failed.is_empty() {
        Ok(format!("all {} criteria passed\nrun directory {}", outcomes.len(), dir.display()))
    } else {
        Err(CliError::Failed(format!("failed criteria: {}", failed.join(", "))))
    }
}

pub fn run(cli: Cli) -> CliResult<String> {
    match &cli.command {
        Command::GenData { spec, count, common } => cmd_gen_data(spec.as_deref(), *count, common),
        Command::Train {
            data,
            variant,
            base,
            common,
        } => cmd_train(data, variant, base.as_deref(), common),
        Command::Eval {
            checkpoint,
            data,
            task,
            pos,
            neg,
            split,
            common,
        } => cmd_eval(checkpoint, data, *task, *pos, *neg, *split, common),
        Command::Sweep {
            kind,
            checkpoint,
            data,
            common,
        } => cmd_sweep(*kind, checkpoint.as_deref(), data, common),
        Command::Repro { suite, common } => cmd_repro(*suite, common),
    }
}
