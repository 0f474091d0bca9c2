//! Command-line front end: `gen`, `build`, `refine`, `eval`, `diagnose`, `sweep`.
//!
//! Every numeric option resolves as flag > JSON config file (`--config`) > built-in
//! default, and the resolved configuration is echoed into the `manifest.json` written
//! next to each command's outputs. Exit codes: 0 success, 2 usage or input error,
//! 3 infeasible or degenerate math, 4 divergence, 5 internal identity failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diagnostics::{self, AssignmentMatrix, MetricsRecord};
use crate::encoder::{self, EncoderDims, EncoderParams, ToyEncoder};
use crate::error::Error;
use crate::harness::{self, ConfusionPair, DatasetBundle, StreamConfig, StreamMode, SyntheticSpec};
use crate::io::{self, ExperimentManifest};
use crate::linalg::EmbeddingMatrix;
use crate::objective::{self, ObjectiveConfig};
use crate::prototype::{self, PrecomputedEmbeddings, PrototypeSet, TemplateSet};
use crate::solvers::{self, Method, RefinementResult, TrainConfig, TrainMode, PRETRAINED_LEARNING_RATE};

pub const THREADS_ENV: &str = "PROTO_FORGE_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REFINED_FILE: &str = "prototypes.csv";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const ENCODER_FILE: &str = "encoder.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    Usage(String),

    #[error("identity check failed: {0}")]
    IdentityFailure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::IdentityFailure(_) => 5,
            CliError::Core(e) => match e {
                Error::InfeasibleConfusion(_)
                | Error::RankDeficient { .. }
                | Error::NoConvergence { .. }
                | Error::ZeroRow { .. }
                | Error::EmptyClassPool(_) => 3,
                Error::DivergedLoss { .. } => 4,
                Error::NonFinite { .. } => 5,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "proto-forge", version, about = "Refine class prototypes and check their geometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset bundle with confusable classes.
    Gen(GenArgs),
    /// Build class prototypes from templates, via the toy encoder or an embedding file.
    Build(BuildArgs),
    /// Refine prototypes with mean, svd, soft-direct or soft-lora.
    Refine(RefineArgs),
    /// Zero-shot accuracy, globally or over realistic test streams.
    Eval(EvalArgs),
    /// Scatter identities, geometry metrics and a gradient check.
    Diagnose(DiagnoseArgs),
    /// Soft-direct refinement and evaluation for a list of penalty weights.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Confusable pair `i:j:rho`; repeatable. Replaces the default pairs.
    #[arg(long)]
    pub confuse: Vec<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prototype_pull: Option<f64>,
    #[arg(long)]
    pub text_bias: Option<f64>,
    #[arg(long)]
    pub text_noise: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Class names, one per line.
    #[arg(long, conflicts_with = "data")]
    pub names: Option<PathBuf>,
    /// Dataset bundle whose class names are used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Template file, one template per line (default: three built-in templates).
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Per-template embeddings (K·T rows) instead of the toy encoder.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Fit the encoder readout so its template means reproduce this matrix.
    #[arg(long)]
    pub calibrate: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Keep the raw template mean instead of projecting to the unit sphere.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Mean,
    Svd,
    SoftDirect,
    SoftLora,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Mean => Method::Mean,
            MethodArg::Svd => Method::Svd,
            MethodArg::SoftDirect => Method::SoftDirect,
            MethodArg::SoftLora => Method::SoftLora,
        }
    }
}

/// Optimizer and objective flags shared by `refine` and `sweep`.
#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub lambda_growth: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the pretrained-tower learning rate (5e-6) unless `--lr` is given.
    #[arg(long)]
    pub paper_hparams: bool,
    #[arg(long, value_parser = ["bare", "averaged"])]
    pub x_mode: Option<String>,
    /// Project encoder outputs onto the unit sphere inside the objective.
    #[arg(long)]
    pub normalize_x: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Initial prototypes V.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Encoder checkpoint for soft-lora (default: a seeded encoder calibrated to V).
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Class names for soft-lora, one per line.
    #[arg(long, conflicts_with = "data")]
    pub names: Option<PathBuf>,
    /// Dataset bundle supplying class names for soft-lora.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamArg {
    None,
    Batch,
    Online,
    Separate,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub prototypes: PathBuf,
    #[arg(long, value_enum)]
    pub stream: Option<StreamArg>,
    /// Effective-class range `lo:hi` for batch streams.
    #[arg(long)]
    pub keff: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow predictions among all K classes instead of those present in each task.
    #[arg(long)]
    pub unrestricted: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Refined prototypes X.
    #[arg(long)]
    pub prototypes: PathBuf,
    /// Initial prototypes V (default: the bundle's prototypes, else X itself).
    #[arg(long)]
    pub initial: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Initial prototypes V (default: the bundle's prototypes).
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    /// Comma-separated penalty weights, each used as lambda0.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flag values to lay over the config file and defaults.
#[derive(Default)]
struct Overrides(Map<String, Value>);

impl Overrides {
    fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.0.insert(key.to_owned(), serde_json::to_value(v).expect("flag values serialize"));
        }
    }

    fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.0.insert(key.to_owned(), Value::Bool(true));
        }
    }

    fn train(&mut self, t: &TrainArgs) {
        self.set("lambda_growth", t.lambda_growth);
        self.set("epochs", t.epochs);
        self.set("steps_per_epoch", t.steps_per_epoch);
        self.set("weight_decay", t.weight_decay);
        self.set("lora_rank", t.rank);
        self.set("seed", t.seed);
        self.set("x_mode", t.x_mode.clone());
        self.flag("normalize_x", t.normalize_x);
        self.flag("paper_hparams", t.paper_hparams);
        self.set("learning_rate", t.lr);
    }
}

/// Defaults, then the JSON object in `config`, then `flags`. Unknown keys are rejected.
fn resolve<T: Serialize + DeserializeOwned + Default>(config: Option<&Path>, flags: Overrides) -> CliResult<T> {
    let Value::Object(mut merged) = serde_json::to_value(T::default()).map_err(Error::from)? else {
        unreachable!("configs serialize to objects")
    };
    let mut layers = Vec::new();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<Value>(&text).map_err(Error::from)? {
            Value::Object(m) => layers.push(m),
            _ => return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display()))),
        }
    }
    layers.push(flags.0);
    for layer in layers {
        for (k, v) in layer {
            if !merged.contains_key(&k) {
                return Err(CliError::Usage(format!("unknown configuration key {k:?}")));
            }
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

fn echo<T: Serialize>(cfg: &T) -> Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

/// Objective and optimizer settings shared by `refine` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub method: Method,
    #[serde(flatten)]
    pub objective: ObjectiveConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub paper_hparams: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            method: Method::SoftDirect,
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            paper_hparams: false,
        }
    }
}

impl RefineConfig {
    /// Applies `paper_hparams` unless a learning rate was set explicitly.
    fn finish(mut self, explicit_lr: bool) -> Self {
        if self.paper_hparams && !explicit_lr {
            self.train.learning_rate = PRETRAINED_LEARNING_RATE;
        }
        self.train.mode = if self.method == Method::SoftLora { TrainMode::LoraEncoder } else { TrainMode::DirectX };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub normalize: bool,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub seed: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        let d = EncoderDims::default();
        Self {
            normalize: true,
            vocab_size: d.vocab_size,
            embed_dim: d.embed_dim,
            hidden_dim: d.hidden_dim,
            out_dim: d.out_dim,
            seed: 0,
        }
    }
}

impl BuildConfig {
    fn dims(&self) -> EncoderDims {
        EncoderDims {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            out_dim: self.out_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub stream: StreamArg,
    pub keff: (usize, usize),
    pub gamma: f64,
    /// Default: 1000 batch tasks or 100 online streams.
    pub tasks: Option<usize>,
    pub batch: usize,
    pub seed: u64,
    pub restrict: bool,
    pub resample_per_batch: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = StreamConfig::default();
        Self {
            stream: StreamArg::None,
            keff: s.keff_range,
            gamma: s.gamma,
            tasks: None,
            batch: s.batch_size,
            seed: 0,
            restrict: true,
            resample_per_batch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub lambda: f64,
    pub fd_step: f64,
    pub grad_tol: f64,
    pub identity_tol: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { lambda: 2.0, fd_step: 1e-5, grad_tol: 1e-5, identity_tol: diagnostics::IDENTITY_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    #[serde(flatten)]
    pub refine: RefineConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { lambdas: vec![0.0, 0.1, 1.0, 10.0, 100.0, 1000.0, 10000.0], refine: RefineConfig::default() }
    }
}

/// Parses `lo:hi`.
pub fn parse_range(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("range {s:?} must look like lo:hi"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

/// Caps the global rayon pool from the thread environment variable, if set.
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A second call in the same process keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Build(a) => cmd_build(&a),
        Command::Refine(a) => cmd_refine(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Diagnose(a) => cmd_diagnose(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string(value).map_err(Error::from)?);
    Ok(())
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("k", a.classes);
    o.set("d", a.dim);
    o.set("n_per_class", a.per_class);
    if !a.confuse.is_empty() {
        let pairs = a.confuse.iter().map(|s| ConfusionPair::parse(s)).collect::<Result<Vec<_>, _>>()?;
        o.set("confusion_pairs", Some(pairs));
    }
    o.set("noise_sigma", a.sigma);
    o.set("seed", a.seed);
    o.set("prototype_pull", a.prototype_pull);
    o.set("text_bias", a.text_bias);
    o.set("text_noise", a.text_noise);
    let spec: SyntheticSpec = resolve(a.config.as_deref(), o)?;
    let data = harness::generate_synthetic(&spec)?;
    let bundle = DatasetBundle::from_synthetic(data);
    let written = bundle.save(&a.out, Some(&spec))?;
    let mut m = ExperimentManifest::new("gen", echo(&spec), Some(spec.seed));
    written.iter().for_each(|p| m.add_output(p));
    m.write(&a.out.join(MANIFEST_FILE))?;
    print_json(&serde_json::json!({ "n": bundle.labels.len(), "k": bundle.k, "d": bundle.features.cols() }))
}

fn class_names(names: Option<&Path>, data: Option<&Path>, m: &mut ExperimentManifest) -> CliResult<Vec<String>> {
    let path = match (names, data) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join(harness::CLASS_NAMES_FILE),
        (None, None) => return Err(CliError::Usage("class names required: pass --names or --data".into())),
    };
    m.add_input(&path)?;
    Ok(prototype::read_class_names(&path)?)
}

fn templates(path: Option<&Path>, m: &mut ExperimentManifest) -> CliResult<TemplateSet> {
    match path {
        Some(p) => {
            m.add_input(p)?;
            Ok(TemplateSet::from_file(p)?)
        }
        None => Ok(TemplateSet::default_three()),
    }
}

fn load_input(path: &Path, m: &mut ExperimentManifest) -> CliResult<EmbeddingMatrix> {
    m.add_input(path)?;
    Ok(io::load_matrix(path)?)
}

pub fn cmd_build(a: &BuildArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("out_dim", a.dim);
    o.set("seed", a.seed);
    if a.no_normalize {
        o.set("normalize", Some(false));
    }
    let cfg: BuildConfig = resolve(a.config.as_deref(), o)?;
    let mut m = ExperimentManifest::new("build", echo(&cfg), Some(cfg.seed));
    let names = class_names(a.names.as_deref(), a.data.as_deref(), &mut m)?;
    let tset = templates(a.templates.as_deref(), &mut m)?;
    let mut written = Vec::new();
    let set = if let Some(path) = &a.embeddings {
        let emb = load_input(path, &mut m)?;
        prototype::build_prototypes(&names, &tset, &PrecomputedEmbeddings(emb), cfg.normalize)?
    } else {
        let mut dims = cfg.dims();
        let target = a.calibrate.as_deref().map(|p| load_input(p, &mut m)).transpose()?;
        if let Some(t) = &target {
            dims.out_dim = t.cols();
        }
        let mut params = EncoderParams::random(dims, cfg.seed)?;
        if let Some(t) = &target {
            params = params.fit_readout(&names, &tset, t)?;
        }
        let ck = encoder::Checkpoint::new(params, Vec::new());
        let ep = a.out.join(ENCODER_FILE);
        ck.save(&ep)?;
        written.push(ep);
        let source = ToyEncoder { params: &ck.params, adapters: &[] };
        prototype::build_prototypes(&names, &tset, &source, cfg.normalize)?
    };
    let vp = a.out.join(REFINED_FILE);
    io::save_matrix(&vp, &set.v)?;
    let rp = a.out.join("raw_mean.csv");
    io::save_matrix(&rp, &set.raw_mean)?;
    written.extend([vp, rp]);
    written.iter().for_each(|p| m.add_output(p));
    m.write(&a.out.join(MANIFEST_FILE))?;
    print_json(&serde_json::json!({ "k": set.k(), "d": set.v.cols(), "templates": tset.len() }))
}

fn refine_overrides(method: Option<MethodArg>, lambda0: Option<f64>, t: &TrainArgs) -> Overrides {
    let mut o = Overrides::default();
    o.set("method", method.map(Method::from));
    o.set("lambda0", lambda0);
    o.train(t);
    o
}

/// Training-log line: the step record plus the run's method.
#[derive(Serialize)]
struct LogLine<'a> {
    method: &'a str,
    #[serde(flatten)]
    record: &'a solvers::StepRecord,
}

pub fn cmd_refine(a: &RefineArgs) -> CliResult<()> {
    let cfg: RefineConfig = resolve(a.config.as_deref(), refine_overrides(a.method, a.lambda0, &a.train))?;
    let cfg = cfg.finish(a.train.lr.is_some());
    let mut m = ExperimentManifest::new("refine", echo(&cfg), Some(cfg.train.seed));
    let v = a.prototypes.as_deref().map(|p| load_input(p, &mut m)).transpose()?;
    let need_v = || CliError::Usage("--prototypes is required for this method".into());
    let mut written = Vec::new();
    let result: RefinementResult = match cfg.method {
        Method::Mean => solvers::solve_mean(&PrototypeSet::from_matrix(v.ok_or_else(need_v)?)),
        Method::Svd => solvers::solve_procrustes(&PrototypeSet::from_matrix(v.ok_or_else(need_v)?))?,
        Method::SoftDirect => {
            solvers::solve_soft_direct(&PrototypeSet::from_matrix(v.ok_or_else(need_v)?), &cfg.objective, &cfg.train)?
        }
        Method::SoftLora => {
            let names = class_names(a.names.as_deref(), a.data.as_deref(), &mut m)?;
            let tset = templates(a.templates.as_deref(), &mut m)?;
            let params = match (&a.encoder, &v) {
                (Some(p), _) => {
                    m.add_input(p)?;
                    encoder::Checkpoint::load(p)?.params
                }
                (None, Some(v)) => {
                    let dims = EncoderDims { out_dim: v.cols(), ..EncoderDims::default() };
                    EncoderParams::random(dims, cfg.train.seed)?.fit_readout(&names, &tset, v)?
                }
                (None, None) => return Err(CliError::Usage("soft-lora needs --encoder or --prototypes".into())),
            };
            let out = solvers::solve_soft_lora(&names, &tset, &params, &cfg.objective, &cfg.train)?;
            let ck = encoder::Checkpoint::new(params, out.adapters);
            let ep = a.out.join(ENCODER_FILE);
            ck.save(&ep)?;
            written.push(ep);
            let vp = a.out.join("initial.csv");
            io::save_matrix(&vp, &out.v)?;
            written.push(vp);
            out.result
        }
    };
    let xp = a.out.join(REFINED_FILE);
    io::save_matrix(&xp, &result.x)?;
    written.push(xp);
    if matches!(cfg.method, Method::SoftDirect | Method::SoftLora) {
        let lines: Vec<LogLine> =
            result.history.iter().map(|record| LogLine { method: cfg.method.as_str(), record }).collect();
        let lp = a.out.join(TRAIN_LOG_FILE);
        io::write_jsonl(&lp, &lines)?;
        written.push(lp);
    }
    written.iter().for_each(|p| m.add_output(p));
    m.write(&a.out.join(MANIFEST_FILE))?;
    let last = result.history.last().map(|r| r.loss);
    print_json(&serde_json::json!({
        "method": cfg.method.as_str(),
        "steps": result.history.len(),
        "final_loss": last,
        "max_offdiag_gram": result.x.gram().max_abs_offdiag(),
    }))
}

fn check_prototypes(bundle: &DatasetBundle, x: &EmbeddingMatrix) -> CliResult<()> {
    if x.cols() != bundle.features.cols() || x.rows() != bundle.k {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} prototypes", bundle.k, bundle.features.cols()),
            got: format!("{}x{}", x.rows(), x.cols()),
        }
        .into());
    }
    Ok(())
}

fn load_bundle(dir: &Path, m: &mut ExperimentManifest) -> CliResult<DatasetBundle> {
    m.add_input(&dir.join(harness::FEATURES_FILE))?;
    m.add_input(&dir.join(harness::LABELS_FILE))?;
    Ok(DatasetBundle::load(dir)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub stream: StreamArg,
    pub mean_accuracy: f64,
    pub tasks: usize,
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("stream", a.stream);
    o.set("keff", a.keff.as_deref().map(parse_range).transpose()?);
    o.set("gamma", a.gamma);
    o.set("tasks", a.tasks);
    o.set("batch", a.batch);
    o.set("seed", a.seed);
    if a.unrestricted {
        o.set("restrict", Some(false));
    }
    let cfg: EvalConfig = resolve(a.config.as_deref(), o)?;
    let mut m = ExperimentManifest::new("eval", echo(&cfg), Some(cfg.seed));
    let bundle = load_bundle(&a.data, &mut m)?;
    let x = load_input(&a.prototypes, &mut m)?;
    check_prototypes(&bundle, &x)?;
    let x = x.normalize_rows()?;
    let features = bundle.features.normalize_rows()?;
    let mode = match cfg.stream {
        StreamArg::None => None,
        StreamArg::Batch => Some(StreamMode::BatchRealistic),
        StreamArg::Online => Some(StreamMode::OnlineDirichlet),
        StreamArg::Separate => Some(StreamMode::Separate),
    };
    let (summary, records) = match mode {
        None => {
            let acc = harness::zero_shot_accuracy(&features, &bundle.labels, &x)?;
            (EvalSummary { stream: cfg.stream, mean_accuracy: acc, tasks: 1 }, Vec::new())
        }
        Some(mode) => {
            let default_tasks = if mode == StreamMode::BatchRealistic { 1000 } else { 100 };
            let sc = StreamConfig {
                mode,
                batch_size: cfg.batch,
                n_tasks: cfg.tasks.unwrap_or(default_tasks),
                keff_range: cfg.keff,
                gamma: cfg.gamma,
                seed: cfg.seed,
                resample_per_batch: cfg.resample_per_batch,
            };
            let tasks = if mode == StreamMode::BatchRealistic {
                harness::sample_batch_tasks(&bundle.labels, bundle.k, &sc)?
            } else {
                harness::sample_online_streams(&bundle.labels, bundle.k, &sc)?
                    .iter()
                    .map(|s| harness::StreamTask::merge(s))
                    .collect()
            };
            let ev = harness::evaluate_over_tasks(&tasks, &features, &x, cfg.restrict)?;
            let records = harness::task_records(&tasks, &ev);
            (EvalSummary { stream: cfg.stream, mean_accuracy: ev.mean_accuracy, tasks: tasks.len() }, records)
        }
    };
    if let Some(out) = &a.out {
        let tp = out.join(TASKS_FILE);
        io::write_jsonl(&tp, &records)?;
        let sp = out.join("eval.json");
        io::write_json(&sp, &summary)?;
        m.add_output(&tp);
        m.add_output(&sp);
        m.write(&out.join(MANIFEST_FILE))?;
    }
    print_json(&summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(value: f64, tolerance: f64) -> Self {
        Self { value, tolerance, pass: value < tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    #[serde(flatten)]
    pub metrics: MetricsRecord,
    pub huygens_residual: Check,
    pub between_offdiag_residual: Check,
    pub grad_check: Check,
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> CliResult<()> {
    let mut o = Overrides::default();
    o.set("lambda", a.lambda);
    let cfg: DiagnoseConfig = resolve(a.config.as_deref(), o)?;
    let mut m = ExperimentManifest::new("diagnose", echo(&cfg), None);
    let bundle = load_bundle(&a.data, &mut m)?;
    let x = load_input(&a.prototypes, &mut m)?;
    check_prototypes(&bundle, &x)?;
    let v = match (&a.initial, &bundle.initial_prototypes) {
        (Some(p), _) => load_input(p, &mut m)?,
        (None, Some(v)) => v.clone(),
        (None, None) => x.clone(),
    };
    check_prototypes(&bundle, &v)?;
    let u = AssignmentMatrix::from_labels(bundle.labels.clone(), bundle.k)?;
    let scatter = diagnostics::huygens(&bundle.features, &u)?;
    let geometry = diagnostics::geometry_metrics(&x, &v, &bundle.features, &bundle.labels)?;
    let counts: Vec<usize> = u.counts().into_iter().map(|c| c.max(1)).collect();
    let eq8 = diagnostics::between_vs_offdiag(&x.normalize_rows()?, &counts)?;
    let grad = objective::grad_check_x(&x, &v, cfg.lambda, cfg.fd_step)?;
    let report = DiagnosticsReport {
        metrics: MetricsRecord::new(&geometry, &scatter),
        huygens_residual: Check::new(scatter.residual(), cfg.identity_tol),
        between_offdiag_residual: Check::new(eq8.residual(), cfg.identity_tol),
        grad_check: Check::new(grad, cfg.grad_tol),
    };
    if let Some(out) = &a.out {
        let dp = out.join(DIAGNOSTICS_FILE);
        io::write_json(&dp, &report)?;
        m.add_output(&dp);
        m.write(&out.join(MANIFEST_FILE))?;
    }
    print_json(&report)?;
    let failed: Vec<&str> = [
        ("huygens", &report.huygens_residual),
        ("between_offdiag", &report.between_offdiag_residual),
        ("grad_check", &report.grad_check),
    ]
    .into_iter()
    .filter(|(_, c)| !c.pass)
    .map(|(n, _)| n)
    .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::IdentityFailure(failed.join(", ")))
    }
}

/// One row of the sweep table; failed cells carry the error and no numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy: Option<f64>,
    pub final_penalty: Option<f64>,
    pub final_fidelity: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(|| "failed".to_owned(), |x| format!("{x}"));
        let status = self.error.as_deref().map_or_else(|| "ok".to_owned(), |e| e.replace([',', '\n'], ";"));
        format!(
            "{},{},{},{},{}",
            self.lambda,
            num(self.accuracy),
            num(self.final_penalty),
            num(self.final_fidelity),
            status
        )
    }
}

pub const SWEEP_HEADER: &str = "lambda,accuracy,final_penalty,final_fidelity,status";

/// Soft-direct refinement at each λ (as `lambda0`), evaluated by global zero-shot accuracy.
pub fn sweep(
    features: &EmbeddingMatrix,
    labels: &[usize],
    v: &EmbeddingMatrix,
    cfg: &SweepConfig,
) -> crate::Result<Vec<SweepRow>> {
    let features = features.normalize_rows()?;
    let set = PrototypeSet::from_matrix(v.clone());
    Ok(cfg
        .lambdas
        .par_iter()
        .map(|&lambda| {
            let obj = ObjectiveConfig { lambda0: lambda, ..cfg.refine.objective };
            let run = solvers::solve_soft_direct(&set, &obj, &cfg.refine.train).and_then(|r| {
                let acc = harness::zero_shot_accuracy(&features, labels, &r.x.normalize_rows()?)?;
                let fin = objective::loss(&r.x, v, 0.0)?;
                Ok((acc, fin))
            });
            match run {
                Ok((acc, fin)) => SweepRow {
                    lambda,
                    accuracy: Some(acc),
                    final_penalty: Some(fin.penalty),
                    final_fidelity: Some(fin.fidelity),
                    error: None,
                },
                Err(e) => SweepRow {
                    lambda,
                    accuracy: None,
                    final_penalty: None,
                    final_fidelity: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

pub fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let mut o = refine_overrides(None, None, &a.train);
    o.set("lambdas", a.lambdas.clone());
    let mut cfg: SweepConfig = resolve(a.config.as_deref(), o)?;
    cfg.refine = cfg.refine.finish(a.train.lr.is_some());
    cfg.refine.method = Method::SoftDirect;
    cfg.refine.train.mode = TrainMode::DirectX;
    if cfg.lambdas.is_empty() {
        return Err(CliError::Usage("no lambda values to sweep".into()));
    }
    let mut m = ExperimentManifest::new("sweep", echo(&cfg), Some(cfg.refine.train.seed));
    let bundle = load_bundle(&a.data, &mut m)?;
    let v = match (&a.prototypes, &bundle.initial_prototypes) {
        (Some(p), _) => load_input(p, &mut m)?,
        (None, Some(v)) => {
            m.add_input(&a.data.join(harness::PROTOTYPES_FILE))?;
            v.clone()
        }
        (None, None) => return Err(CliError::Usage("no initial prototypes: pass --prototypes".into())),
    };
    check_prototypes(&bundle, &v)?;
    let rows = sweep(&bundle.features, &bundle.labels, &v, &cfg)?;
    let mut table = String::from(SWEEP_HEADER);
    table.push('\n');
    for r in &rows {
        table.push_str(&r.csv_line());
        table.push('\n');
    }
    let sp = a.out.join(SWEEP_FILE);
    io::write_atomic(&sp, table.as_bytes())?;
    m.add_output(&sp);
    m.write(&a.out.join(MANIFEST_FILE))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_over_file_over_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"epochs": 7, "lambda0": 3.0}"#).unwrap();
        let mut o = Overrides::default();
        o.set("lambda0", Some(5.0));
        let cfg: RefineConfig = resolve(Some(&p), o).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.objective.lambda0, 5.0);
        assert_eq!(cfg.objective.lambda_growth, 1.15);
    }

    #[test]
    fn unknown_config_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"epoch": 7}"#).unwrap();
        let err = resolve::<RefineConfig>(Some(&p), Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn pretrained_flag_sets_learning_rate_unless_explicit() {
        let mut cfg = RefineConfig { paper_hparams: true, ..Default::default() };
        cfg = cfg.finish(false);
        assert_eq!(cfg.train.learning_rate, PRETRAINED_LEARNING_RATE);
        let cfg = RefineConfig { paper_hparams: true, ..Default::default() }.finish(true);
        assert_eq!(cfg.train.learning_rate, 1e-3);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(Error::RankDeficient { sigma_min: 0.0 }).exit_code(), 3);
        assert_eq!(CliError::from(Error::InfeasibleConfusion("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::DivergedLoss { epoch: 0, step: 0, total: 1e9 }).exit_code(), 4);
        assert_eq!(CliError::from(Error::InvalidConfig("x".into())).exit_code(), 2);
        assert_eq!(CliError::IdentityFailure("x".into()).exit_code(), 5);
    }

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_range("2:10").unwrap(), (2, 10));
        assert!(parse_range("2-10").is_err());
    }

    #[test]
    fn failed_sweep_cells_are_marked() {
        let r = SweepRow { lambda: 1.0, accuracy: None, final_penalty: None, final_fidelity: None, error: Some("boom, bad".into()) };
        assert_eq!(r.csv_line(), "1,failed,failed,failed,boom; bad");
    }
}
