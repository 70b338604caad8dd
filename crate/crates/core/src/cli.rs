//! Command-line front end.
//!
//! ```text
//! alrank synth     --n 2000 --priors 0.65,0.19,0.14,0.02 --seed 1 --out data/
//! alrank loop-sim  --manifest data/manifest.jsonl --out runs/proposed --strategy uncertainty
//! alrank serve     --manifest data/manifest.jsonl --dir session/ --addr 127.0.0.1:8080
//! alrank eval      --run runs/proposed --out reports/proposed
//! alrank report    --run proposed=runs/proposed --run random=runs/random --out reports/
//! ```
//!
//! `--config FILE` reads flat `key = value` lines named like the flags
//! (`lr = 1e-3`, `warm-start = true`). Values from the file are applied
//! first, so explicit flags win. Failures print one line,
//! `error[<category>]: <message>`, and exit with the category's code.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::active::{
    read_checkpoints, run_loop, write_checkpoint, LoopConfig, LoopData, LoopError, PartnerScope, SimulatedOracle,
    Strategy,
};
use crate::data::{group_kfold_split, load_manifest, save_manifest, synth_generate, Dataset, DataError, Fold, SplitSpec, SynthSpec};
use crate::eval::{mcnemar, write_csv_tables, EvalConfig, EvalError, EvaluationReport, McNemarResult, NamedReport, RunEvaluation};
use crate::model::{Activation, ModelError, NetworkConfig, DEFAULT_DROPOUT, DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY};
use crate::service::{self, AppState, DataSource, ServiceError, Session};
use crate::train::TrainConfig;

const RUN_FORMAT: &str = "alrank-run/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage,
    Config,
    Data,
    Io,
    Loop,
    Checkpoint,
    Eval,
    Service,
    Bind,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Usage => "usage",
            Category::Config => "config",
            Category::Data => "data",
            Category::Io => "io",
            Category::Loop => "loop",
            Category::Checkpoint => "checkpoint",
            Category::Eval => "eval",
            Category::Service => "service",
            Category::Bind => "bind",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Category::Usage => 2,
            Category::Config => 3,
            Category::Data => 4,
            Category::Io => 5,
            Category::Loop => 6,
            Category::Checkpoint => 7,
            Category::Eval => 8,
            Category::Service => 9,
            Category::Bind => 10,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    fn new(category: Category, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // keep it on one line
        write!(f, "error[{}]: {}", self.category.name(), self.message.replace('\n', " "))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let cat = match e {
            DataError::InvalidPriors(_) | DataError::InvalidSplit(_) => Category::Config,
            DataError::Io(_) => Category::Io,
            _ => Category::Data,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        let cat = match e {
            LoopError::Config(_) => Category::Config,
            LoopError::Checkpoint { .. } => Category::Checkpoint,
            LoopError::Io(_) => Category::Io,
            LoopError::Data(_) => Category::Data,
            _ => Category::Loop,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let cat = if matches!(e, EvalError::Io(_)) { Category::Io } else { Category::Eval };
        CliError::new(cat, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let cat = match e {
            ModelError::Checkpoint(_) => Category::Checkpoint,
            ModelError::Io(_) => Category::Io,
            _ => Category::Config,
        };
        CliError::new(cat, e.to_string())
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Loop(l) => l.into(),
            ServiceError::Io(_) => CliError::new(Category::Io, e.to_string()),
            _ => CliError::new(Category::Service, e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Category::Io, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "alrank", version, about = "Bayesian active learning to rank from relative annotations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic imbalanced ordinal dataset.
    Synth(SynthArgs),
    /// Run the active loop with the simulated oracle and evaluate it.
    LoopSim(LoopSimArgs),
    /// Serve the annotation API for a human-oracle session.
    Serve(ServeArgs),
    /// Evaluate the checkpoints of one run.
    Eval(EvalArgs),
    /// Evaluate and compare several runs.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "0.65,0.19,0.14,0.02")]
    pub priors: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.8)]
    pub noise: f64,
    #[arg(long, default_value_t = 10)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct NetArgs {
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "32,16")]
    pub hidden: Vec<usize>,
    /// Drop probability of hidden units.
    #[arg(long, default_value_t = DEFAULT_DROPOUT)]
    pub dropout: f64,
    #[arg(long, default_value_t = DEFAULT_WEIGHT_DECAY)]
    pub weight_decay: f64,
    #[arg(long, default_value = "relu")]
    pub activation: Activation,
}

impl NetArgs {
    fn network(&self, input_dim: usize) -> NetworkConfig {
        NetworkConfig::new(input_dim, &self.hidden)
            .with_dropout(self.dropout)
            .with_weight_decay(self.weight_decay)
            .with_activation(self.activation)
    }
}

#[derive(Args, Debug, Clone)]
pub struct LoopArgs {
    /// Initial labeling percentage.
    #[arg(long = "r", default_value_t = 20.0)]
    pub r: f64,
    /// Percentage added per iteration.
    #[arg(long = "s", default_value_t = 5.0)]
    pub s: f64,
    /// Number of iterations.
    #[arg(long = "K", default_value_t = 6)]
    pub k: usize,
    /// MC-dropout trials.
    #[arg(long = "T", default_value_t = 30)]
    pub t: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    #[arg(long)]
    pub warm_start: bool,
    #[arg(long, default_value = "uncertainty")]
    pub strategy: Strategy,
    #[arg(long, default_value = "selected")]
    pub partners: PartnerScope,
    #[arg(long)]
    pub candidate_pool: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl LoopArgs {
    fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            initial_pct: self.r,
            step_pct: self.s,
            iterations: self.k,
            trials: self.t,
            train: TrainConfig {
                epochs: self.epochs,
                batch_size: self.batch_size,
                learning_rate: self.lr,
                patience: (self.patience > 0).then_some(self.patience),
                seed: 0,
            },
            warm_start: self.warm_start,
            seed: self.seed,
            strategy: self.strategy,
            partners: self.partners,
            candidate_pool: self.candidate_pool,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct SplitArgs {
    #[arg(long, default_value_t = 5)]
    pub fold_count: usize,
    #[arg(long, default_value_t = 60.0)]
    pub train_pct: f64,
    #[arg(long, default_value_t = 20.0)]
    pub val_pct: f64,
    #[arg(long, default_value_t = 20.0)]
    pub test_pct: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    fn spec(&self) -> SplitSpec {
        SplitSpec {
            fold_count: self.fold_count,
            train_pct: self.train_pct,
            val_pct: self.val_pct,
            test_pct: self.test_pct,
            seed: self.split_seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct LoopSimArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Folds to run; all folds when omitted.
    #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
    pub folds: Option<Vec<usize>>,
    /// Run name used in tables.
    #[arg(long)]
    pub name: Option<String>,
    /// Seed for the test pairs; keep it equal across runs that will be compared.
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub lp: LoopArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct ServeArgs {
    /// Session directory; an existing session there is resumed.
    #[arg(long)]
    pub dir: PathBuf,
    /// Required to start a new session.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Shared token expected in the x-annotation-token header.
    #[arg(long)]
    pub token: Option<String>,
    /// Directory of a static client bundle to host.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub lp: LoopArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Run directory written by loop-sim.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// MC-dropout trials at test time; defaults to the run's setting.
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[command(args_override_self = true)]
pub struct ReportArgs {
    /// `NAME=DIR`, repeatable. The first run is the McNemar reference.
    #[arg(long = "run", required = true)]
    pub runs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// What a loop-sim run directory was produced from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format: String,
    pub name: String,
    pub manifest: PathBuf,
    pub split: SplitSpec,
    pub folds: Vec<usize>,
    pub network: NetworkConfig,
    #[serde(rename = "loop")]
    pub loop_config: LoopConfig,
    pub eval: EvalConfig,
}

impl RunMeta {
    pub fn load(run_dir: &Path) -> CliResult<Self> {
        let path = run_dir.join("run.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::new(Category::Checkpoint, format!("{}: {e}", path.display())))?;
        let meta: RunMeta = serde_json::from_str(&text)
            .map_err(|e| CliError::new(Category::Checkpoint, format!("{}: {e}", path.display())))?;
        if meta.format != RUN_FORMAT {
            return Err(CliError::new(Category::Checkpoint, format!("unsupported run format `{}`", meta.format)));
        }
        Ok(meta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub folds: Vec<EvaluationReport>,
    pub mean_overall_accuracy: f64,
    pub mean_neighboring_accuracies: BTreeMap<String, f64>,
}

impl RunReport {
    fn new(name: &str, folds: Vec<EvaluationReport>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_overall_accuracy = folds.iter().map(|f| f.overall_accuracy).sum::<f64>() / n;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for f in &folds {
            for (k, v) in &f.neighboring_accuracies {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let mean_neighboring_accuracies = sums.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect();
        RunReport { name: name.to_string(), folds, mean_overall_accuracy, mean_neighboring_accuracies }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reference: String,
    pub other: String,
    /// `overall`, `neighboring` (all buckets pooled) or a bucket name.
    pub scope: String,
    pub result: McNemarResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunReport>,
    pub mcnemar: Vec<Comparison>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value).expect("report serializes") + "\n")?;
    Ok(())
}

/// Records produced files, relative to `out`, in `outputs.json`.
fn write_outputs(out: &Path, files: &[PathBuf]) -> CliResult<()> {
    let mut rel: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/"))
        .collect();
    rel.sort();
    rel.dedup();
    write_json(&out.join("outputs.json"), &serde_json::json!({ "files": rel }))
}

/// `key = value` lines turned into flag arguments.
fn config_args(path: &Path) -> CliResult<Vec<OsString>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(Category::Config, format!("{}: {e}", path.display())))?;
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::new(Category::Config, format!("{}: line {}: expected key = value", path.display(), n + 1))
        })?;
        let key = key.trim().trim_start_matches("--");
        let value = value.trim();
        if key == "config" {
            return Err(CliError::new(Category::Config, "config files cannot include other config files"));
        }
        match value {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                args.push(format!("--{key}").into());
                args.push(value.into());
            }
        }
    }
    Ok(args)
}

/// Splices config-file flags in front of the user's flags.
pub fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let pos = args.iter().position(|a| a == "--config");
    let inline = args.iter().position(|a| a.to_string_lossy().starts_with("--config="));
    let (path, remove): (PathBuf, Vec<usize>) = match (pos, inline) {
        (Some(p), _) => match args.get(p + 1) {
            Some(v) => (PathBuf::from(v), vec![p, p + 1]),
            None => return Ok(args),
        },
        (None, Some(p)) => (PathBuf::from(&args[p].to_string_lossy()["--config=".len()..]), vec![p]),
        (None, None) => return Ok(args),
    };
    if args.len() < 2 {
        return Ok(args);
    }
    let injected = config_args(&path)?;
    let mut out: Vec<OsString> = Vec::with_capacity(args.len() + injected.len());
    for (k, a) in args.into_iter().enumerate() {
        if remove.contains(&k) {
            continue;
        }
        out.push(a);
        // after the program name and subcommand
        if k == 1 {
            out.extend(injected.iter().cloned());
        }
    }
    Ok(out)
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let spec = SynthSpec { group_size: a.group_size, ..SynthSpec::new(a.n, a.priors.clone(), a.dim, a.noise, a.seed) };
    let manifest = synth_generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("manifest.jsonl");
    save_manifest(&manifest, &path)?;
    write_outputs(&a.out, &[path.clone()])?;
    println!("{}", path.display());
    Ok(())
}

fn load_folds(manifest_path: &Path, split: &SplitSpec) -> CliResult<(Dataset, Vec<Fold>)> {
    let manifest = load_manifest(manifest_path)?;
    let folds = group_kfold_split(&manifest, split)?;
    Ok((Dataset::from_manifest(&manifest), folds))
}

fn pick_folds(requested: &Option<Vec<usize>>, available: usize) -> CliResult<Vec<usize>> {
    let folds = requested.clone().unwrap_or_else(|| (0..available).collect());
    if let Some(f) = folds.iter().find(|&&f| f >= available) {
        return Err(CliError::new(Category::Config, format!("fold {f} out of range ({available} folds)")));
    }
    Ok(folds)
}

fn cmd_loop_sim(a: &LoopSimArgs) -> CliResult<()> {
    let split = a.split.spec();
    let (dataset, folds) = load_folds(&a.manifest, &split)?;
    let fold_ids = pick_folds(&a.folds, folds.len())?;
    let network = a.net.network(dataset.dim());
    network.validate()?;
    let config = a.lp.loop_config();
    config.validate()?;
    let name = a.name.clone().unwrap_or_else(|| a.lp.strategy.to_string());
    let eval = EvalConfig { trials: config.trials, seed: a.eval_seed, ..EvalConfig::default() };
    let meta = RunMeta {
        format: RUN_FORMAT.into(),
        name: name.clone(),
        manifest: fs::canonicalize(&a.manifest).unwrap_or_else(|_| a.manifest.clone()),
        split,
        folds: fold_ids.clone(),
        network: network.clone(),
        loop_config: config.clone(),
        eval: eval.clone(),
    };
    fs::create_dir_all(&a.out)?;
    let mut files = vec![a.out.join("run.json")];
    write_json(&files[0], &meta)?;

    let mut reports = Vec::new();
    for &f in &fold_ids {
        let fold = &folds[f];
        let data = LoopData::new(dataset.clone(), fold.train.clone(), &fold.val, config.seed)?;
        let mut oracle = SimulatedOracle::new(&data.dataset);
        let outcome = run_loop(&data, network.clone(), config.clone(), &mut oracle)?;
        let fold_dir = a.out.join(format!("fold_{f}"));
        for cp in &outcome.checkpoints {
            let rd = write_checkpoint(&fold_dir, cp)?;
            for name in ["params.json", "state.json", "annotations.jsonl"] {
                files.push(rd.join(name));
            }
            log::info!(
                "fold {f} round {}: ratio {:.3}, {} pairs, {} epochs",
                cp.round,
                cp.labeling_ratio,
                cp.state.labeled_pairs.len(),
                cp.train.epochs_run
            );
        }
        let ev = RunEvaluation::new(&data.dataset, fold, eval.clone())?;
        let report = ev.report(&outcome.checkpoints)?;
        log::info!("fold {f}: overall pair accuracy {:.4}", report.overall_accuracy);
        let path = fold_dir.join("report.json");
        write_json(&path, &report)?;
        files.push(path);
        reports.push(report);
    }
    let run = RunReport::new(&name, reports);
    let path = a.out.join("report.json");
    write_json(&path, &run)?;
    files.push(path);
    let named: Vec<NamedReport<'_>> = run.folds.iter().map(|r| NamedReport { run: &name, report: r }).collect();
    files.extend(write_csv_tables(&named, &a.out)?);
    write_outputs(&a.out, &files)?;
    println!("{}", a.out.join("report.json").display());
    Ok(())
}

/// Evaluates a run directory. Returns the per-fold reports and, per fold,
/// the final checkpoint's overall and neighboring correctness flags.
type FoldFlags = (Vec<bool>, BTreeMap<String, Vec<bool>>);

fn evaluate_run_dir(run_dir: &Path, trials: Option<usize>) -> CliResult<(RunMeta, Vec<EvaluationReport>, Vec<FoldFlags>)> {
    let meta = RunMeta::load(run_dir)?;
    let (dataset, folds) = load_folds(&meta.manifest, &meta.split)?;
    let eval = EvalConfig { trials: trials.unwrap_or(meta.eval.trials), ..meta.eval.clone() };
    let mut reports = Vec::new();
    let mut flags = Vec::new();
    for &f in &meta.folds {
        let fold = folds
            .get(f)
            .ok_or_else(|| CliError::new(Category::Checkpoint, format!("run refers to missing fold {f}")))?;
        let checkpoints = read_checkpoints(&run_dir.join(format!("fold_{f}")))?;
        let ev = RunEvaluation::new(&dataset, fold, eval.clone())?;
        let last = &checkpoints.last().expect("read_checkpoints is nonempty").params;
        let res = ev.score_checkpoint(last)?;
        flags.push((
            res.overall.correct.clone(),
            res.neighboring.iter().map(|(k, a)| (k.clone(), a.correct.clone())).collect(),
        ));
        reports.push(ev.report(&checkpoints)?);
    }
    Ok((meta, reports, flags))
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let (meta, reports, _) = evaluate_run_dir(&a.run, a.t)?;
    let run = RunReport::new(&meta.name, reports);
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("report.json");
    write_json(&path, &run)?;
    let named: Vec<NamedReport<'_>> = run.folds.iter().map(|r| NamedReport { run: &meta.name, report: r }).collect();
    let mut files = write_csv_tables(&named, &a.out)?;
    files.push(path.clone());
    write_outputs(&a.out, &files)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> CliResult<()> {
    let mut evaluated = Vec::new();
    for spec in &a.runs {
        let (name, dir) = spec
            .split_once('=')
            .ok_or_else(|| CliError::new(Category::Usage, format!("--run expects NAME=DIR, got `{spec}`")))?;
        let (meta, reports, flags) = evaluate_run_dir(Path::new(dir), a.t)?;
        evaluated.push((name.to_string(), meta, reports, flags));
    }
    let (ref_name, ref_meta, _, ref_flags) = &evaluated[0];
    let mut comparisons = Vec::new();
    let mut per_fold_mcnemar: Vec<Vec<Option<McNemarResult>>> = Vec::new();
    for (name, meta, _, flags) in &evaluated {
        if meta.folds != ref_meta.folds || meta.split != ref_meta.split || meta.eval.seed != ref_meta.eval.seed {
            return Err(CliError::new(
                Category::Eval,
                format!("run `{name}` was not evaluated on the same folds and test pairs as `{ref_name}`"),
            ));
        }
        let mut fold_results = Vec::new();
        let mut overall = (Vec::new(), Vec::new());
        let mut buckets: BTreeMap<String, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
        for ((ro, rn), (oo, on)) in ref_flags.iter().zip(flags) {
            fold_results.push(Some(mcnemar(ro, oo)?));
            overall.0.extend(ro);
            overall.1.extend(oo);
            for (k, rf) in rn {
                if let Some(of) = on.get(k) {
                    let e = buckets.entry(k.clone()).or_default();
                    e.0.extend(rf);
                    e.1.extend(of);
                }
            }
        }
        per_fold_mcnemar.push(fold_results);
        let mut push = |scope: String, x: &[bool], y: &[bool]| -> CliResult<()> {
            comparisons.push(Comparison {
                reference: ref_name.clone(),
                other: name.clone(),
                scope,
                result: mcnemar(x, y)?,
            });
            Ok(())
        };
        push("overall".into(), &overall.0, &overall.1)?;
        let pooled: (Vec<bool>, Vec<bool>) = buckets.values().fold((Vec::new(), Vec::new()), |mut acc, (x, y)| {
            acc.0.extend(x);
            acc.1.extend(y);
            acc
        });
        push("neighboring".into(), &pooled.0, &pooled.1)?;
        for (k, (x, y)) in &buckets {
            push(k.clone(), x, y)?;
        }
    }
    let runs: Vec<RunReport> = evaluated
        .into_iter()
        .zip(per_fold_mcnemar)
        .map(|((name, _, mut reports, _), m)| {
            for (r, m) in reports.iter_mut().zip(m) {
                r.mcnemar = m;
            }
            RunReport::new(&name, reports)
        })
        .collect();
    let report = ComparisonReport { runs, mcnemar: comparisons };
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("report.json");
    write_json(&path, &report)?;
    let named: Vec<NamedReport<'_>> = report
        .runs
        .iter()
        .flat_map(|run| run.folds.iter().map(move |r| NamedReport { run: &run.name, report: r }))
        .collect();
    let mut files = write_csv_tables(&named, &a.out)?;
    files.push(path.clone());
    write_outputs(&a.out, &files)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> CliResult<()> {
    let session = if Session::exists(&a.dir) {
        Session::resume(&a.dir, None)?
    } else {
        let manifest = a
            .manifest
            .as_ref()
            .ok_or_else(|| CliError::new(Category::Config, "--manifest is required to start a new session"))?;
        let source = DataSource {
            manifest: fs::canonicalize(manifest).unwrap_or_else(|_| manifest.clone()),
            fold: a.fold,
            split: a.split.spec(),
        };
        let config = a.lp.loop_config();
        config.validate()?;
        let data = source.load(config.seed)?;
        let network = a.net.network(data.dataset.dim());
        Session::create(&a.dir, Some(source), data, network, config)?
    };
    let state = AppState { session: Arc::new(Mutex::new(session)), token: a.token.clone() };
    let app = service::router(state, a.static_dir.as_deref());
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async {
        let listener = service::bind(&a.addr)
            .await
            .map_err(|e| CliError::new(Category::Bind, format!("cannot bind {}: {e}", a.addr)))?;
        let addr = service::local_addr(&listener)?;
        println!("listening on {addr}");
        std::io::stdout().flush()?;
        service::serve(listener, app).await?;
        Ok(())
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run(args: Vec<OsString>) -> CliResult<()> {
    let args = expand_config(args)?;
    let cli = Cli::try_parse_from(args).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                let _ = e.print();
                CliError::new(Category::Usage, String::new())
            }
            _ => CliError::new(Category::Usage, e.to_string().lines().next().unwrap_or_default().to_string()),
        }
    })?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::LoopSim(a) => cmd_loop_sim(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args(args: Vec<OsString>) -> i32 {
    let help = args.iter().any(|a| a == "--help" || a == "-h" || a == "--version" || a == "-V");
    match run(args) {
        Ok(()) => 0,
        Err(e) if help && e.category == Category::Usage && e.message.is_empty() => 0,
        Err(e) => {
            if !e.message.is_empty() {
                eprintln!("{e}");
            }
            e.category.exit_code()
        }
    }
}
