//! `dlem`: train, evaluate, and verify deep Laplacian eigenmap encoders.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 runtime failure,
//! 4 corrupt artifact.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use deep_eigenmaps::checkpoint::{load_checkpoint, save_checkpoint};
use deep_eigenmaps::data::{generate_blobs, generate_moons, generate_rings, Dataset};
use deep_eigenmaps::encoder::MlpEncoder;
use deep_eigenmaps::fewshot::{
    evaluate_fewshot, linear_evaluation, FewShotProtocol, LinearSchedule, ProbePoint, DEFAULT_EPISODES,
    DEFAULT_PROBE_REG,
};
use deep_eigenmaps::graph::{median_pairwise_distance, WeightedGraph};
use deep_eigenmaps::spectral::{adjusted_rand_index, generalized_eigenmaps, sign_split};
use deep_eigenmaps::trainer::train_with_observer;
use deep_eigenmaps::{verify, Error};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config { key: String, reason: String },
    Runtime(String),
    Corrupt(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Corrupt(_) => EXIT_CORRUPT,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) | CliError::Corrupt(m) => f.write_str(m),
            CliError::Config { key, reason } => write!(f, "invalid config key `{key}`: {reason}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { key, reason } => CliError::Config { key, reason },
            Error::InvalidArgument(_)
            | Error::ShapeMismatch { .. }
            | Error::InvalidGraph(_)
            | Error::IsolatedVertex { .. }
            | Error::Parse { .. }
            | Error::InsufficientClass { .. } => CliError::Usage(e.to_string()),
            Error::CorruptCheckpoint(_) | Error::CheckpointVersion { .. } => CliError::Corrupt(e.to_string()),
            Error::NoConvergence { .. } | Error::StaleTrace(_) | Error::Divergence { .. } | Error::Io(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

/// Errors while reading a user-supplied input: unreadable files are usage
/// errors rather than runtime failures.
fn reading<T>(path: &Path, result: deep_eigenmaps::Result<T>) -> Result<T, CliError> {
    result.map_err(|e| match e {
        Error::Io(io) => CliError::usage(format!("cannot read {}: {io}", path.display())),
        other => {
            let err = CliError::from(other);
            match err {
                CliError::Usage(m) => CliError::usage(format!("{}: {m}", path.display())),
                CliError::Corrupt(m) => CliError::Corrupt(format!("{}: {m}", path.display())),
                err => err,
            }
        }
    })
}

fn writing<T>(path: &Path, result: std::io::Result<T>) -> Result<T, CliError> {
    result.map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    writing(dir, fs::create_dir_all(dir))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

#[derive(Debug, Parser)]
#[command(name = "dlem", version, about = "Deep Laplacian eigenmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder from a JSON config.
    Train(TrainArgs),
    /// Few-shot episodes with a logistic probe on frozen embeddings.
    EvalFewshot(FewshotArgs),
    /// Linear classifier on frozen embeddings.
    EvalLinear(LinearArgs),
    /// Exact generalized eigenmaps of a graph or a point cloud's kernel graph.
    Oracle(OracleArgs),
    /// Run the numerical self-check suites.
    Verify(VerifyArgs),
    /// Write a synthetic labeled dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProbeKind {
    Output,
    Backbone,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    /// Representation the probe sees.
    #[arg(long, value_enum, default_value = "backbone")]
    probe: ProbeKind,
    /// Trailing layers treated as the projector for `--probe backbone`.
    #[arg(long, default_value_t = 2)]
    projector_layers: usize,
}

impl ProbeArgs {
    fn point(&self) -> ProbePoint {
        match self.probe {
            ProbeKind::Output => ProbePoint::Output,
            ProbeKind::Backbone => ProbePoint::Backbone {
                projector_layers: self.projector_layers,
            },
        }
    }
}

#[derive(Debug, Args)]
struct FewshotArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV, label first.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    q_query: usize,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    /// L2 strength of the logistic probe.
    #[arg(long, default_value_t = DEFAULT_PROBE_REG)]
    reg: f64,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for results.json, results.csv, and manifest.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LinearArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    probe: ProbeArgs,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.3)]
    lr0: f64,
    #[arg(long, value_delimiter = ',', default_value = "60,80")]
    milestones: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    decay: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["graph", "data"])))]
struct OracleArgs {
    /// Edge list CSV with `i,j,weight` rows.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Point cloud CSV; builds a Gaussian kernel graph.
    #[arg(long)]
    data: Option<PathBuf>,
    /// The point cloud CSV has a leading label column.
    #[arg(long, requires = "data")]
    has_labels: bool,
    /// Kernel bandwidth; defaults to the median pairwise distance.
    #[arg(long, requires = "data")]
    bandwidth: Option<f64>,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum DataKind {
    Blobs,
    Moons,
    Rings,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the subcommand, and returns the
/// process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::EvalFewshot(a) => cmd_eval_fewshot(&a),
        Command::EvalLinear(a) => cmd_eval_linear(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::GenData(a) => cmd_gen_data(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Initialization seed for a run seed, kept apart from the trainer's own
/// streams keyed on the same value.
pub fn encoder_seed(run_seed: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", args.config.display())))?;
    let cfg = RunConfig::parse(&text, args.seed)?;
    let data = cfg.data.load()?;
    let mut encoder = MlpEncoder::<f32>::new(&cfg.layer_dims(data.dim()), encoder_seed(cfg.train.seed))?;
    create_dir(&args.out)?;

    let total = cfg.train.epochs;
    let report = train_with_observer(&mut encoder, data.unlabeled(), &cfg.train, |r| {
        eprintln!(
            "epoch {}/{total} loss {:.6} trace {:.6} decorrelation {:.6} lr {:.6} rank {} min_std {:.4}",
            r.epoch + 1,
            r.total,
            r.trace_term,
            r.decorrelation_term,
            r.learning_rate,
            r.effective_rank,
            r.min_dim_std,
        );
    })?;

    let ckpt = args.out.join("encoder.dlem");
    let report_path = args.out.join("train_report.csv");
    save_checkpoint(&encoder, &ckpt).map_err(|e| CliError::runtime(format!("{}: {e}", ckpt.display())))?;
    let file = writing(&report_path, File::create(&report_path))?;
    report
        .write_csv(BufWriter::new(file))
        .map_err(|e| CliError::runtime(format!("{}: {e}", report_path.display())))?;

    let mut manifest = RunManifest::new("train", cfg.train.seed, cfg.resolved()).input(&args.config)?;
    if let Some(path) = cfg.data.input_path() {
        manifest = manifest.input(path)?;
    }
    manifest
        .output(&ckpt)?
        .output(&report_path)?
        .write(&args.out.join("manifest.json"))
}

fn load_encoder(path: &Path) -> Result<MlpEncoder<f64>, CliError> {
    reading(path, load_checkpoint::<f64>(path))
}

fn load_labeled(path: &Path) -> Result<Dataset<f64>, CliError> {
    reading(path, Dataset::load_csv(path, true))
}

#[derive(Debug, Serialize)]
struct FewShotReport<'a> {
    protocol: FewShotProtocol,
    probe: ProbePoint,
    episodes: usize,
    mean_accuracy: f64,
    ci95: f64,
    seed: u64,
    checkpoint_path: &'a Path,
}

fn validate_fewshot(args: &FewshotArgs) -> Result<(), CliError> {
    if args.n_way < 2 {
        return Err(CliError::usage("--n-way must be at least 2"));
    }
    if args.k_shot == 0 || args.q_query == 0 {
        return Err(CliError::usage("--k-shot and --q-query must be positive"));
    }
    if args.episodes < 2 {
        return Err(CliError::usage("--episodes must be at least 2 for a confidence interval"));
    }
    if !(args.reg > 0.0 && args.reg.is_finite()) {
        return Err(CliError::usage("--reg must be positive"));
    }
    if args.probe.probe == ProbeKind::Backbone && args.probe.projector_layers == 0 {
        return Err(CliError::usage("--projector-layers must be positive for the backbone probe"));
    }
    Ok(())
}

fn cmd_eval_fewshot(args: &FewshotArgs) -> Result<(), CliError> {
    validate_fewshot(args)?;
    let encoder = load_encoder(&args.checkpoint)?;
    let data = load_labeled(&args.data)?;
    let protocol = FewShotProtocol {
        n_way: args.n_way,
        k_shot: args.k_shot,
        q_query: args.q_query,
        reg: args.reg,
    };
    let point = args.probe.point();
    let result = evaluate_fewshot(&encoder, &data, point, &protocol, args.episodes, args.seed)?;
    let report = FewShotReport {
        protocol,
        probe: point,
        episodes: args.episodes,
        mean_accuracy: result.mean_accuracy,
        ci95: result.ci95,
        seed: args.seed,
        checkpoint_path: &args.checkpoint,
    };
    println!("{}", to_json(&report));

    let Some(out) = &args.out else {
        return Ok(());
    };
    create_dir(out)?;
    let json_path = out.join("results.json");
    writing(&json_path, fs::write(&json_path, to_json(&report) + "\n"))?;
    let csv_path = out.join("results.csv");
    let probe = match point {
        ProbePoint::Output => "output".to_string(),
        ProbePoint::Backbone { projector_layers } => format!("backbone:{projector_layers}"),
    };
    write_csv_row(
        &csv_path,
        &[
            "checkpoint_path",
            "n_way",
            "k_shot",
            "q_query",
            "reg",
            "probe",
            "episodes",
            "seed",
            "mean_accuracy",
            "ci95",
        ],
        &[
            args.checkpoint.display().to_string(),
            args.n_way.to_string(),
            args.k_shot.to_string(),
            args.q_query.to_string(),
            args.reg.to_string(),
            probe,
            args.episodes.to_string(),
            args.seed.to_string(),
            result.mean_accuracy.to_string(),
            result.ci95.to_string(),
        ],
    )?;
    let config = json!({ "protocol": protocol, "probe": point, "episodes": args.episodes });
    RunManifest::new("eval-fewshot", args.seed, config)
        .input(&args.checkpoint)?
        .input(&args.data)?
        .output(&json_path)?
        .output(&csv_path)?
        .write(&out.join("manifest.json"))
}

fn write_csv_row(path: &Path, header: &[&str], row: &[String]) -> Result<(), CliError> {
    let file = writing(path, File::create(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)
        .and_then(|()| w.write_record(row))
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    writing(path, w.flush())
}

fn validate_schedule(s: &LinearSchedule) -> Result<(), CliError> {
    if s.epochs == 0 || s.batch_size == 0 {
        return Err(CliError::usage("--epochs and --batch-size must be positive"));
    }
    if !(s.lr0 > 0.0 && s.lr0.is_finite()) {
        return Err(CliError::usage("--lr0 must be positive"));
    }
    if !(s.decay > 0.0 && s.decay <= 1.0) {
        return Err(CliError::usage("--decay must be in (0, 1]"));
    }
    if !(0.0..1.0).contains(&s.momentum) {
        return Err(CliError::usage("--momentum must be in [0, 1)"));
    }
    Ok(())
}

fn cmd_eval_linear(args: &LinearArgs) -> Result<(), CliError> {
    let schedule = LinearSchedule {
        epochs: args.epochs,
        lr0: args.lr0,
        milestones: args.milestones.clone(),
        decay: args.decay,
        momentum: args.momentum,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    validate_schedule(&schedule)?;
    let encoder = load_encoder(&args.checkpoint)?;
    let train = load_labeled(&args.train)?;
    let test = load_labeled(&args.test)?;
    let point = args.probe.point();
    let accuracy = linear_evaluation(&encoder, &train, &test, point, &schedule)?;
    let report = json!({
        "schedule": schedule,
        "probe": point,
        "accuracy": accuracy,
        "seed": args.seed,
        "checkpoint_path": args.checkpoint,
    });
    println!("{}", to_json(&report));

    let Some(out) = &args.out else {
        return Ok(());
    };
    create_dir(out)?;
    let json_path = out.join("results.json");
    writing(&json_path, fs::write(&json_path, to_json(&report) + "\n"))?;
    RunManifest::new("eval-linear", args.seed, json!({ "schedule": schedule, "probe": point }))
        .input(&args.checkpoint)?
        .input(&args.train)?
        .input(&args.test)?
        .output(&json_path)?
        .write(&out.join("manifest.json"))
}

fn write_rows<'a>(path: &Path, rows: impl Iterator<Item = Vec<f64>> + 'a) -> Result<(), CliError> {
    let file = writing(path, File::create(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writing(path, writeln!(w, "{}", line.join(",")))?;
    }
    writing(path, w.flush())
}

fn cmd_oracle(args: &OracleArgs) -> Result<(), CliError> {
    let (graph, labels, bandwidth, input) = match (&args.graph, &args.data) {
        (Some(path), _) => {
            let file = File::open(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
            (reading(path, WeightedGraph::<f64>::read_edges_csv(file))?, None, None, path)
        }
        (None, Some(path)) => {
            let ds = reading(path, Dataset::<f64>::load_csv(path, args.has_labels))?;
            let h = match args.bandwidth {
                Some(h) => h,
                None => median_pairwise_distance(ds.features())?,
            };
            let g = WeightedGraph::from_kernel(ds.features(), h)?;
            (g, ds.labels().map(<[usize]>::to_vec), Some(h), path)
        }
        (None, None) => unreachable!("clap requires one input"),
    };
    let result = generalized_eigenmaps(&graph, args.k)?;
    let ari = match &labels {
        Some(l) if args.k >= 2 => Some(adjusted_rand_index(l, &sign_split(result.embedding.column(1)))?),
        _ => None,
    };

    create_dir(&args.out)?;
    let values_path = args.out.join("eigenvalues.csv");
    let embedding_path = args.out.join("embedding.csv");
    write_rows(&values_path, result.eigenvalues.iter().map(|&v| vec![v]))?;
    write_rows(&embedding_path, result.embedding.rows().into_iter().map(|r| r.to_vec()))?;

    let summary = json!({
        "vertices": graph.n(),
        "k": args.k,
        "eigenvalues": result.eigenvalues.to_vec(),
        "residual": result.residual,
        "bandwidth": bandwidth,
        "sign_split_ari": ari,
    });
    println!("{}", to_json(&summary));
    let config = json!({ "k": args.k, "bandwidth": bandwidth, "has_labels": args.has_labels });
    RunManifest::new("oracle", 0, config)
        .input(input)?
        .output(&values_path)?
        .output(&embedding_path)?
        .write(&args.out.join("manifest.json"))
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let reports = verify::run_all(args.seed)?;
    for r in &reports {
        println!(
            "{} {:<20} cases={:<5} worst={:.3e} tolerance={:.0e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.cases,
            r.worst,
            r.tolerance
        );
    }
    match reports.iter().find(|r| !r.passed) {
        Some(r) => Err(CliError::runtime(format!("identity check failed: {}", r.name))),
        None => Ok(()),
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let ds: Dataset<f64> = match args.kind {
        DataKind::Blobs => generate_blobs(args.classes, args.per_class, args.dim, args.separation, args.seed),
        DataKind::Moons => generate_moons(args.per_class, args.noise, args.seed),
        DataKind::Rings => generate_rings(args.classes, args.per_class, args.noise, args.seed),
    }?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save_csv(&args.out)
        .map_err(|e| CliError::runtime(format!("{}: {e}", args.out.display())))?;
    let config = json!({
        "kind": args.kind,
        "classes": args.classes,
        "per_class": args.per_class,
        "dim": args.dim,
        "separation": args.separation,
        "noise": args.noise,
    });
    let mut manifest_path = args.out.clone().into_os_string();
    manifest_path.push(".manifest.json");
    RunManifest::new("gen-data", args.seed, config)
        .output(&args.out)?
        .write(Path::new(&manifest_path))
}
