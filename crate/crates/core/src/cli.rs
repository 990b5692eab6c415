//! Subcommands and report writing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use chainloc::engine::{localize, EngineConfig, Incident};
use chainloc::evaluation::{
    benchmark_table, run_benchmark, scaling_csv, scaling_run, sweep_csv, sweep_pruning_threshold, TrainConfig,
};
use chainloc::models::DetectorModels;
use chainloc::simulator::{ScenarioFile, SuiteConfig};
use chainloc::store::MetricStore;

/// Version of every JSON report this binary writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "chainloc",
    version,
    about = "Root-cause localization for microservice availability issues"
)]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize a scenario or suite as metric JSONL plus ground truth.
    Simulate(SimulateArgs),
    /// Generate the labelled corpus, train both detector models and score them.
    Train(TrainArgs),
    /// Localize the root cause of one incident.
    Localize(LocalizeArgs),
    /// Run a suite and report HR@k and MRR.
    Evaluate(EvaluateArgs),
    /// Re-run a suite over several pruning thresholds.
    Sweep(SweepArgs),
    /// Time localization over growing system sizes.
    Scale(ScaleArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario or suite file, or a preset name.
    #[arg(long, default_value = "ten_service")]
    pub config: String,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training config JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the corpus seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

/// Engine and model options shared by the analysis commands.
#[derive(Debug, Args, Serialize)]
pub struct EngineArgs {
    /// Engine config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with trained models; without it the default corpus is
    /// generated and trained first.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Overrides the seed (scenario seed for suites, engine seed otherwise).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct LocalizeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    /// Metric JSONL file to analyze.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    pub metrics: Option<PathBuf>,
    /// Scenario file or preset to simulate and analyze instead of a JSONL file.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Incident index within a suite.
    #[arg(long, default_value_t = 0)]
    pub incident: usize,
    /// The service whose business metric went bad.
    #[arg(long)]
    pub service: String,
    /// Incident minute; defaults to the scenario's incident minute.
    #[arg(long)]
    pub minute: Option<i64>,
    #[arg(long, default_value = "orders")]
    pub business_metric: String,
    /// Report path; stdout when omitted.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    /// Suite or scenario file, or a preset name.
    #[arg(long, default_value = "noisy")]
    pub scenario: String,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    #[arg(long, default_value = "sweep")]
    pub scenario: String,
    #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.5,0.7,0.9")]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScaleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub engine: EngineArgs,
    /// Suite whose settings are reused at every size.
    #[arg(long, default_value = "noisy")]
    pub scenario: String,
    #[arg(long, value_delimiter = ',', default_value = "100,250,500,1000,2000")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 6)]
    pub incidents_per_size: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Train(a) => train(&a),
        Command::Localize(a) => localize_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Scale(a) => scale(&a),
    }
}

fn envelope(command: &str, args: &impl Serialize, config: Value, result: impl Serialize) -> Result<String> {
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "args": args,
        "config": config,
        "result": result,
    });
    Ok(serde_json::to_string_pretty(&report)? + "\n")
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn scenario_file(arg: &str, seed: Option<u64>) -> Result<ScenarioFile> {
    let mut file = ScenarioFile::from_arg(arg).with_context(|| format!("loading scenario '{arg}'"))?;
    if let Some(s) = seed {
        file.set_seed(s);
    }
    Ok(file)
}

fn engine_config(args: &EngineArgs) -> Result<EngineConfig> {
    let mut cfg = match &args.config {
        Some(p) => EngineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => EngineConfig::default(),
    };
    if let Some(m) = &args.models {
        cfg.models_dir = Some(m.clone());
    }
    Ok(cfg)
}

/// Loads models from the configured directory, or trains the defaults.
/// Returns the models and a description of where they came from.
fn models_for(cfg: &EngineConfig) -> Result<(DetectorModels, Value)> {
    match &cfg.models_dir {
        Some(dir) => {
            let m = DetectorModels::load_dir(dir).with_context(|| format!("loading models from {}", dir.display()))?;
            Ok((m, json!({ "source": "directory", "path": dir })))
        }
        None => {
            log::info!("no models given; training on the default corpus");
            let train = TrainConfig::default();
            let outcome = train.run(cfg).context("training default models")?;
            Ok((outcome.models, json!({ "source": "trained", "train": train })))
        }
    }
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let file = scenario_file(&a.config, a.seed)?;
    let incidents = file.incidents()?;
    let mut summary = Vec::new();
    for inc in &incidents {
        let dir = a.out.join(&inc.name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        inc.store.save_jsonl(&dir.join("metrics.jsonl"))?;
        write(
            &dir.join("truth.json"),
            &(serde_json::to_string_pretty(&inc.truth)? + "\n"),
        )?;
        summary.push(json!({
            "name": inc.name,
            "truth": inc.truth,
            "services": inc.simulation.topology.services.len(),
            "edges": inc.simulation.topology.edges.len(),
            "records": inc.store.record_count(),
            "faults": inc.simulation.faults.iter().map(|f| &f.spec).collect::<Vec<_>>(),
        }));
    }
    let report = envelope("simulate", a, serde_json::to_value(&file)?, summary)?;
    write(&a.out.join("simulation.json"), &report)?;
    eprintln!("wrote {} incident(s) to {}", incidents.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    let engine = EngineConfig::default();
    let outcome = cfg.run(&engine)?;
    outcome.models.save_dir(&a.out)?;
    let config = json!({ "train": cfg, "engine": engine });
    write(
        &a.out.join("train_report.json"),
        &envelope("train", a, config, &outcome.report)?,
    )?;
    let table = outcome.report.table();
    write(&a.out.join("detectors.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn localize_cmd(a: &LocalizeArgs) -> Result<()> {
    let mut cfg = engine_config(&a.engine)?;
    let (store, minute, source) = match (&a.metrics, &a.scenario) {
        (Some(path), _) => {
            let store = MetricStore::load_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
            let Some(minute) = a.minute else {
                bail!("--minute is required with --metrics")
            };
            (store, minute, json!({ "metrics": path }))
        }
        (None, Some(arg)) => {
            let file = scenario_file(arg, a.engine.seed)?;
            let mut incidents = file.incidents()?;
            if a.incident >= incidents.len() {
                bail!("--incident {} out of range ({} incidents)", a.incident, incidents.len());
            }
            let inc = incidents.swap_remove(a.incident);
            let minute = a.minute.unwrap_or(inc.truth.incident_minute);
            (inc.store, minute, json!({ "scenario": file }))
        }
        (None, None) => bail!("one of --metrics or --scenario is required"),
    };
    if a.scenario.is_none() {
        if let Some(s) = a.engine.seed {
            cfg.seed = s;
        }
    }
    let (models, model_source) = models_for(&cfg)?;
    let incident = Incident {
        initial_service: a.service.clone(),
        incident_minute: minute,
        business_metric: a.business_metric.clone(),
    };
    let loc = localize(&store, &incident, &cfg, Some(&models))?;
    if let Some(d) = &loc.diagnostic {
        eprintln!("no candidates: {d}");
    }
    for c in &loc.ranked {
        eprintln!(
            "{:>3}  {:<16} {:<12} {:.4}",
            c.rank,
            c.candidate.service,
            c.candidate.anomaly_type.to_string(),
            c.score
        );
    }
    let config = json!({ "engine": cfg, "input": source, "models": model_source });
    let report = envelope("localize", a, config, &loc)?;
    match &a.out {
        Some(p) => write(p, &report),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = engine_config(&a.engine)?;
    let file = scenario_file(&a.scenario, a.engine.seed)?;
    let incidents = file.incidents()?;
    let (models, model_source) = models_for(&cfg)?;
    let report = run_benchmark(&incidents, &cfg, Some(&models))?;
    let config = json!({ "engine": cfg, "scenario": file, "models": model_source });
    write(
        &a.out.join("evaluation.json"),
        &envelope("evaluate", a, config, &report)?,
    )?;
    let table = benchmark_table(&report);
    write(&a.out.join("evaluation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let cfg = engine_config(&a.engine)?;
    let file = scenario_file(&a.scenario, a.engine.seed)?;
    let incidents = file.incidents()?;
    let (models, model_source) = models_for(&cfg)?;
    let points = sweep_pruning_threshold(&incidents, &a.thresholds, &cfg, Some(&models))?;
    let config = json!({ "engine": cfg, "scenario": file, "models": model_source });
    write(&a.out.join("sweep.json"), &envelope("sweep", a, config, &points)?)?;
    let csv = sweep_csv(&points);
    write(&a.out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn scale(a: &ScaleArgs) -> Result<()> {
    let cfg = engine_config(&a.engine)?;
    let suite: SuiteConfig = match scenario_file(&a.scenario, a.engine.seed)? {
        ScenarioFile::Suite(s) => s,
        ScenarioFile::Scenario(_) => bail!("scale needs a suite, not a single scenario"),
    };
    let (models, model_source) = models_for(&cfg)?;
    let report = scaling_run(&a.sizes, a.incidents_per_size, &suite, &cfg, Some(&models))?;
    let config = json!({ "engine": cfg, "suite": suite, "models": model_source });
    write(&a.out.join("scaling.json"), &envelope("scale", a, config, &report)?)?;
    let csv = scaling_csv(&report);
    write(&a.out.join("scaling.csv"), &csv)?;
    print!("{csv}");
    eprintln!("linear fit R^2 = {:.4}", report.fit.r_squared);
    Ok(())
}
