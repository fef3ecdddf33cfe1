use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::anyhow;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rrnco_core::eval::{evaluate, solve, Method, ModelOptions};
use rrnco_core::geodata::{read_basemap, write_basemap, ContainerError};
use rrnco_core::ingest::{
    read_points, synth_basemap, FixtureTransport, HttpTransport, IngestError, OsrmClient, OsrmEndpoint,
    RecordingTransport, SynthConfig, TableTransport,
};
use rrnco_core::instancegen::{make_dataset, read_dataset, write_dataset};
use rrnco_core::suite::{self, SuiteOptions};
use rrnco_core::trainer::{train, EpochMetrics, RunFiles, ValidationRecord};
use rrnco_core::{derive_seed, BaseMap, GeoPoint, ModelConfig, Policy, Sampler, Task, TrainConfig};

mod svg;

#[derive(Parser)]
#[command(name = "rrnco", version, about = "Asymmetric routing on real-world travel matrices")]
struct Cli {
    /// Worker threads (falls back to RRNCO_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a base map from a point list and an OSRM server, or synthetically.
    Ingest(IngestArgs),
    /// Generate a dataset of instances from base maps.
    Gen(GenArgs),
    /// Train a policy.
    Train(TrainArgs),
    /// Evaluate a method on a dataset against a reference method.
    Eval(EvalArgs),
    /// Solve one instance and print the solution as JSON.
    Solve(SolveArgs),
    /// Run the acceptance suite.
    Bench(BenchArgs),
    /// Render training curves from a run directory as SVG.
    Curve(CurveArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["points", "synthetic"])))]
struct IngestArgs {
    /// CSV of `lat,lon` rows.
    #[arg(long, requires = "osrm")]
    points: Option<PathBuf>,
    /// OSRM base URL, e.g. http://localhost:5000.
    #[arg(long)]
    osrm: Option<String>,
    /// Replay recorded table responses from this directory instead of HTTP.
    #[arg(long, requires = "points", conflicts_with = "record")]
    fixtures: Option<PathBuf>,
    /// Record every HTTP response into this directory.
    #[arg(long, requires = "points")]
    record: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    max_table_size: usize,
    /// Generate a synthetic map with this many locations.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Map name stored in the container (defaults to the output file stem).
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Uniform,
    Cluster,
}

#[derive(Args)]
struct GenArgs {
    /// Base map container; repeat to draw from several maps.
    #[arg(long, required = true)]
    map: Vec<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    sampler: SamplerArg,
    /// Cluster count for the cluster sampler.
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    /// Directory of base map containers.
    #[arg(long)]
    maps: PathBuf,
    /// JSON with optional `model` and `train` objects holding every config field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults used for whatever the config file leaves out.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Validation dataset; drawn from the training maps when omitted.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Seed for parameter initialisation.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Policy checkpoint; required when either method is `model`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "model", value_parser = parse_method)]
    method: Method,
    #[arg(long, default_value = "oropt", value_parser = parse_method)]
    reference: Method,
    /// Greedy starts per instance for the policy (default: every valid start).
    #[arg(long)]
    starts: Option<usize>,
    /// Also decode the eight coordinate symmetries.
    #[arg(long)]
    augment: bool,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-instance CSV mirror of the report.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    /// Dataset file; the instance at `--index` is solved.
    #[arg(long)]
    instance: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    augment: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteName {
    Desk,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "desk")]
    suite: SuiteName,
    /// Skip the three training runs.
    #[arg(long)]
    skip_learning: bool,
    /// Write all outcomes as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CurveArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: rrnco_core::instancegen::InstanceError| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: rrnco_core::eval::EvalError| e.to_string())
}

/// Failure carrying the exit status: 2 for bad input, 1 for internal errors.
enum Failure {
    Input(anyhow::Error),
    Internal(anyhow::Error),
}

type CliResult<T> = Result<T, Failure>;

trait Classify<T> {
    fn input(self, what: impl Into<String>) -> CliResult<T>;
    fn internal(self, what: impl Into<String>) -> CliResult<T>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> Classify<T> for Result<T, E> {
    fn input(self, what: impl Into<String>) -> CliResult<T> {
        self.map_err(|e| Failure::Input(anyhow::Error::new(e).context(what.into())))
    }
    fn internal(self, what: impl Into<String>) -> CliResult<T> {
        self.map_err(|e| Failure::Internal(anyhow::Error::new(e).context(what.into())))
    }
}

fn bad_input(msg: impl Into<String>) -> Failure {
    Failure::Input(anyhow!(msg.into()))
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("RRNCO_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| bad_input(format!("RRNCO_THREADS={v:?} is not a thread count")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(bad_input("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().internal("configuring worker threads")?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).input(format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).input(format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serialises")
}

fn ingest_error(e: IngestError) -> Failure {
    let io = matches!(e, IngestError::Http { .. });
    let err = anyhow::Error::new(e).context("building base map");
    if io {
        Failure::Internal(err)
    } else {
        Failure::Input(err)
    }
}

fn fetch<T: TableTransport>(endpoint: OsrmEndpoint, transport: T, name: &str, points: &[GeoPoint]) -> CliResult<BaseMap> {
    OsrmClient::with_transport(endpoint, transport)
        .fetch_basemap(name, points)
        .map_err(ingest_error)
}

fn cmd_ingest(a: IngestArgs) -> CliResult<()> {
    let name = a
        .name
        .clone()
        .or_else(|| a.out.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "map".into());
    let map = if let Some(n) = a.synthetic {
        let mut map = synth_basemap(&SynthConfig::new(n, a.seed)).map_err(ingest_error)?;
        map.name = name;
        map
    } else {
        let points_path = a.points.as_ref().expect("clap enforces a source");
        let points = read_points(points_path).map_err(ingest_error)?;
        let endpoint = OsrmEndpoint::new(a.osrm.clone().expect("clap requires --osrm"))
            .and_then(|e| e.with_max_table_size(a.max_table_size))
            .map_err(ingest_error)?;
        if let Some(dir) = &a.fixtures {
            let transport = FixtureTransport::from_dir(dir).map_err(ingest_error)?;
            fetch(endpoint, transport, &name, &points)?
        } else {
            let http = HttpTransport::new(endpoint.timeout_s).map_err(ingest_error)?;
            match &a.record {
                Some(dir) => {
                    let rec = RecordingTransport::new(http, dir).input(format!("creating {}", dir.display()))?;
                    fetch(endpoint, rec, &name, &points)?
                }
                None => fetch(endpoint, http, &name, &points)?,
            }
        }
    };
    map.validate().map_err(|e| Failure::Internal(anyhow!("invalid base map: {e}")))?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).input(format!("creating {}", dir.display()))?;
    }
    write_basemap(&map, &a.out).input(format!("writing {}", a.out.display()))?;
    println!(
        "{}",
        serde_json::json!({
            "name": map.name,
            "n_tot": map.n_tot(),
            "dist_scale": map.dist_scale,
            "dur_scale": map.dur_scale,
            "out": a.out,
        })
    );
    Ok(())
}

fn load_map(path: &Path) -> CliResult<BaseMap> {
    read_basemap(path).input(format!("reading base map {}", path.display()))
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let maps = a.map.iter().map(|p| load_map(p)).collect::<CliResult<Vec<_>>>()?;
    let sampler = match a.sampler {
        SamplerArg::Uniform => Sampler::Uniform,
        SamplerArg::Cluster => Sampler::Cluster { n_clusters: a.clusters },
    };
    let t = Instant::now();
    let data = make_dataset(&maps, a.task, a.n, sampler, a.count, a.seed).input("generating instances")?;
    let secs = t.elapsed().as_secs_f64();
    write_dataset(&a.out, &data).input(format!("writing {}", a.out.display()))?;
    eprintln!("generated {} instances in {:.3} s", data.len(), secs);
    println!(
        "{}",
        serde_json::json!({"count": data.len(), "task": a.task.to_string(), "n": a.n, "seconds": secs, "out": a.out})
    );
    Ok(())
}

/// Maps in a directory: every regular file holding a base-map container.
fn load_map_dir(dir: &Path) -> CliResult<Vec<BaseMap>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .input(format!("reading map directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut maps = Vec::new();
    for p in paths {
        match read_basemap(&p) {
            Ok(m) => maps.push(m),
            Err(ContainerError::BadMagic(_)) => log::warn!("skipping {}: not a base map", p.display()),
            Err(e) => return Err(Failure::Input(anyhow::Error::new(e).context(format!("reading {}", p.display())))),
        }
    }
    if maps.is_empty() {
        return Err(bad_input(format!("no base maps in {}", dir.display())));
    }
    Ok(maps)
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).input(format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).input(format!("parsing {}", path.display())))
        .collect()
}

fn render_curves(run: &Path) -> CliResult<String> {
    let files = RunFiles { dir: run.to_path_buf() };
    let metrics: Vec<EpochMetrics> = read_jsonl(&files.metrics())?;
    let mut series = vec![svg::Series {
        label: "train mean cost",
        points: metrics.iter().map(|m| (m.epoch as f64, m.mean_cost)).collect(),
    }];
    if files.validation().exists() {
        let val: Vec<ValidationRecord> = read_jsonl(&files.validation())?;
        series.push(svg::Series {
            label: "validation cost",
            points: val.iter().map(|v| (v.epoch as f64, v.val_cost)).collect(),
        });
    }
    Ok(svg::line_chart("Training curve", "epoch", "mean tour cost", &series))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg_file: RunConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).input(format!("reading {}", p.display()))?;
            serde_json::from_str(&text).input(format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let (model_default, train_default) = match a.preset {
        Preset::Desk => (ModelConfig::desk(a.task), TrainConfig::desk(a.task)),
        Preset::Full => (ModelConfig::full(a.task), TrainConfig::full(a.task)),
    };
    let model_cfg = cfg_file.model.unwrap_or(model_default);
    let train_cfg = cfg_file.train.unwrap_or(train_default);
    if model_cfg.task != a.task || train_cfg.task != a.task {
        return Err(bad_input(format!("config task differs from --task {}", a.task)));
    }
    train_cfg.validate().input("training config")?;
    let maps = load_map_dir(&a.maps)?;
    let validation = match &a.validation {
        Some(p) => read_dataset(p).input(format!("reading {}", p.display()))?,
        None => make_dataset(
            &maps,
            a.task,
            train_cfg.n_nodes,
            train_cfg.sampler,
            train_cfg.validation_size,
            derive_seed(train_cfg.seed, u64::MAX),
        )
        .input("generating validation instances")?,
    };
    let mut policy = Policy::new(model_cfg, a.init_seed).input("model config")?;
    let t = Instant::now();
    let report = train(&mut policy, &maps, &validation, &train_cfg, Some(&a.out)).internal("training")?;
    let curve = render_curves(&a.out)?;
    write_file(&a.out.join("curve.svg"), curve)?;
    println!(
        "{}",
        serde_json::json!({
            "epochs": report.epochs.len(),
            "final_train_cost": report.epochs.last().map(|m| m.mean_cost),
            "initial_val_cost": report.initial_val_cost,
            "best_val_cost": report.best_val_cost,
            "best_epoch": report.best_epoch,
            "seconds": t.elapsed().as_secs_f64(),
            "out": a.out,
        })
    );
    Ok(())
}

fn load_policy(path: Option<&PathBuf>, needed: bool) -> CliResult<Option<Policy>> {
    match (path, needed) {
        (Some(p), _) => Policy::load(p).input(format!("loading checkpoint {}", p.display())).map(Some),
        (None, true) => Err(bad_input("method `model` needs --checkpoint")),
        (None, false) => Ok(None),
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let data = read_dataset(&a.dataset).input(format!("reading {}", a.dataset.display()))?;
    let policy = load_policy(a.checkpoint.as_ref(), a.method == Method::Model || a.reference == Method::Model)?;
    let opts = policy.as_ref().map(|policy| ModelOptions {
        policy,
        n_starts: a.starts.unwrap_or(usize::MAX),
        augment: a.augment,
    });
    let report = evaluate(&data, a.method, a.reference, opts.as_ref()).input("evaluation")?;
    let json = to_json(&report);
    match &a.report {
        Some(p) => write_file(p, &json)?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.csv {
        write_file(p, report.to_csv())?;
    }
    eprintln!(
        "{} vs {}: cost {:.4} vs {:.4}, gap {:.3}%, time {:.2}s",
        report.method, report.reference, report.mean_cost, report.reference_mean_cost, report.gap_percent, report.time_s
    );
    Ok(())
}

fn cmd_solve(a: SolveArgs) -> CliResult<()> {
    let data = read_dataset(&a.instance).input(format!("reading {}", a.instance.display()))?;
    let inst = data
        .get(a.index)
        .ok_or_else(|| bad_input(format!("{} holds {} instances, no index {}", a.instance.display(), data.len(), a.index)))?;
    let policy = load_policy(a.checkpoint.as_ref(), a.method == Method::Model)?;
    let opts = policy.as_ref().map(|policy| ModelOptions {
        policy,
        n_starts: a.starts.unwrap_or(usize::MAX),
        augment: a.augment,
    });
    let t = Instant::now();
    let sol = solve(inst, a.method, opts.as_ref()).input("solving")?;
    println!(
        "{}",
        to_json(&serde_json::json!({
            "method": a.method,
            "task": inst.task.to_string(),
            "n": inst.n(),
            "cost": sol.cost,
            "feasible": sol.feasible,
            "actions": sol.actions,
            "time_s": t.elapsed().as_secs_f64(),
        }))
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult<bool> {
    let SuiteName::Desk = a.suite;
    let results = suite::run(
        SuiteOptions {
            learning: !a.skip_learning,
        },
        |o| println!("{o}"),
    );
    let failed = results.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if let Some(p) = &a.report {
        write_file(p, to_json(&results))?;
    }
    Ok(failed == 0)
}

fn cmd_curve(a: CurveArgs) -> CliResult<()> {
    let svg = render_curves(&a.run)?;
    write_file(&a.out, svg)
}

fn run(cli: Cli) -> CliResult<bool> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a)?,
        Command::Gen(a) => cmd_gen(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Solve(a) => cmd_solve(a)?,
        Command::Bench(a) => return cmd_bench(a),
        Command::Curve(a) => cmd_curve(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("internal error: {e:#}");
            ExitCode::from(1)
        }
    }
}
