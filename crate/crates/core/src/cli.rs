//! Command-line surface. Every command writes its outputs plus a
//! `manifest.json` into `--out`, atomically and deterministically for a
//! fixed `--seed`.
//!
//! Exit codes: 0 success or ready, 1 completed but not ready, 2 usage, IO or
//! schema error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::artifact::{
    canonical_json, external_generate, generate_template, inject_faults, ArtifactError, ArtifactPackage, FaultKind,
    FaultSpec, MaterialDb, TaskInstance,
};
use crate::assets::{AssetCatalog, AssetError, Gate, RegimeContext};
use crate::audit::{AuditError, PolicyTemplate};
use crate::bench::{rows_csv, run_bench, synthetic_tasks, BenchReport, BenchSetup, ALL_STRATEGIES};
use crate::cdg::{
    calibrate, episodes_from_jsonl, episodes_to_jsonl, synthetic_episodes, weight_error, CalibrationOptions, Cdg,
    CdgError, RepairEpisode,
};
use crate::executor::{front_layer_oracle, solve_fd, DtMode, OracleSample, SimConfig, SimResult};
use crate::fixtures;
use crate::gates::{evaluate, EvalMode, GateError, GateReport};
use crate::metrics::{package_acs, score_t3, score_t4, summarize, MetricsError, TaskOutcome, DEFAULT_BOOTSTRAP};
use crate::repair::{
    rcfe, repair_loop, tree_search, RepairError, RepairSetup, RepairTrace, SeverityScorer, Strategy, DEFAULT_BEAM,
    DEFAULT_BUDGET,
};
use crate::rng::derive_seed;

pub const MANIFEST: &str = "manifest.json";
const GENERATOR_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Cdg(#[from] CdgError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "cclg", version, about = "Validate, repair, execute and audit thermal-protection simulation packages")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Format of the main summary table.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Inputs {
    /// Constraint asset catalog (default: bundled catalog).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Material database (default: bundled benchmark materials).
    #[arg(long)]
    pub materials: Option<PathBuf>,
    /// Regime override; defaults to the package's own regime.
    #[arg(long)]
    pub regime: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CaseStrategy {
    Both,
    Cdg,
    Flat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the five gates over a package.
    Validate {
        package: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// Evaluate every gate instead of stopping at the first failure.
        #[arg(long)]
        diagnostic: bool,
    },
    /// Run the reference solver on a package.
    Execute {
        package: PathBuf,
        /// Also dump the full temperature field.
        #[arg(long)]
        field: bool,
    },
    /// Repair a package until ready or out of budget.
    Repair {
        package: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        /// cdg_severity, cdg_topological, flat_checklist, random or tree_search.
        #[arg(long, default_value = "cdg_severity")]
        strategy: String,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// Dependency graph (default: bundled graph).
        #[arg(long)]
        cdg: Option<PathBuf>,
        /// Write the repair episodes as JSON lines to this path.
        #[arg(long)]
        emit_episodes: Option<PathBuf>,
    },
    /// Inject faults into a generated or given package.
    Inject {
        /// Task to generate from (default: bundled case task).
        #[arg(long, conflicts_with = "package")]
        task: Option<PathBuf>,
        /// Existing package to fault instead of generating one.
        #[arg(long)]
        package: Option<PathBuf>,
        /// File holding a JSON array of fault specs; sampled from --seed when absent.
        #[arg(long)]
        faults: Option<PathBuf>,
        /// Material database for --task (default: bundled benchmark materials).
        #[arg(long)]
        materials: Option<PathBuf>,
    },
    /// Estimate edge weights from repair episodes.
    Calibrate {
        /// JSON-lines episode corpus.
        #[arg(long, required_unless_present = "synthetic")]
        episodes: Option<PathBuf>,
        /// Draw this many episodes from the graph given by --cdg instead.
        #[arg(long, conflicts_with = "episodes")]
        synthetic: Option<usize>,
        /// Node set, and generating graph for --synthetic (default: bundled graph).
        #[arg(long)]
        cdg: Option<PathBuf>,
        /// Regime of synthetic episodes, or "all".
        #[arg(long, default_value = "nominal_reentry")]
        regime: String,
        #[arg(long, default_value_t = 0.2)]
        holdout: f64,
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
    },
    /// Compare repair strategies over fault-injected tasks.
    Bench {
        /// JSON array or JSON lines of tasks (default: synthetic tasks).
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Number of synthetic tasks when --tasks is absent.
        #[arg(long, default_value_t = 200)]
        synthetic: usize,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',', default_values_t = ALL_STRATEGIES.map(String::from))]
        strategies: Vec<String>,
        /// Comma-separated fault seeds (default: five derived from --seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// Dependency graph (default: bundled graph).
        #[arg(long)]
        cdg: Option<PathBuf>,
        #[command(flatten)]
        inputs: Inputs,
        /// Write the repair episodes as JSON lines to this path.
        #[arg(long)]
        emit_episodes: Option<PathBuf>,
    },
    /// Generate, validate, repair and score a task set.
    Score {
        /// JSON array or JSON lines of tasks (default: synthetic tasks).
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        synthetic: usize,
        /// External generator command line; "echo" runs the bundled one.
        #[arg(long)]
        generator: Option<String>,
        /// Skip repair and score first-pass packages.
        #[arg(long)]
        no_repair: bool,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Reproduce the two-layer stagnation case end to end.
    CaseStudy {
        #[arg(long, value_enum, default_value_t = CaseStrategy::Both)]
        strategy: CaseStrategy,
    },
    /// Generator subprocess: one task JSON line in, one package JSON line out.
    #[command(hide = true)]
    EchoGenerator {
        #[arg(long)]
        materials: Option<PathBuf>,
    },
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_paths: BTreeMap<String, String>,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

struct Run {
    out: PathBuf,
    format: Format,
    seed: u64,
    manifest: RunManifest,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Write via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn format_version(text: &str) -> String {
    match serde_json::from_str::<Value>(text) {
        Ok(v) => match v.get("version") {
            Some(Value::Number(n)) => n.to_string(),
            Some(Value::String(s)) => s.clone(),
            _ => "unversioned".into(),
        },
        Err(_) if text.lines().next().is_some_and(|l| l.trim_start().starts_with('{')) => "jsonl".into(),
        Err(_) => "unversioned".into(),
    }
}

impl Run {
    fn new(cli: &Cli, command: &str) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("cclg".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Run {
            out: cli.out.clone(),
            format: cli.format,
            seed: cli.seed,
            manifest: RunManifest { command: command.into(), seed: cli.seed, versions, ..Default::default() },
        }
    }

    fn read(&mut self, key: &str, path: &Path) -> Result<String, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        self.manifest.config_paths.insert(key.into(), path.display().to_string());
        self.manifest.versions.insert(key.into(), format_version(&text));
        Ok(text)
    }

    fn bundled(&mut self, key: &str, name: &str) -> Result<String, CliError> {
        let text = fixtures::text(name).map_err(|source| CliError::Io { path: name.into(), source })?;
        self.manifest.config_paths.insert(key.into(), format!("bundled:{name}"));
        self.manifest.versions.insert(key.into(), format_version(&text));
        Ok(text)
    }

    fn input(&mut self, key: &str, path: Option<&Path>, bundled: &str) -> Result<String, CliError> {
        match path {
            Some(p) => self.read(key, p),
            None => self.bundled(key, bundled),
        }
    }

    fn catalog(&mut self, path: Option<&Path>, bundled: &str) -> Result<AssetCatalog, CliError> {
        Ok(AssetCatalog::from_json_str(&self.input("catalog", path, bundled)?)?)
    }

    fn materials(&mut self, path: Option<&Path>, bundled: &str) -> Result<MaterialDb, CliError> {
        Ok(MaterialDb::from_json_str(&self.input("materials", path, bundled)?)?)
    }

    fn cdg(&mut self, path: Option<&Path>) -> Result<Cdg, CliError> {
        Ok(Cdg::from_json_str(&self.input("cdg", path, fixtures::DEFAULT_CDG)?)?)
    }

    fn package(&mut self, path: &Path) -> Result<ArtifactPackage, CliError> {
        Ok(ArtifactPackage::from_json(&self.read("package", path)?)?)
    }

    fn emit(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        write_atomic(&self.out.join(name), contents.as_bytes())?;
        self.manifest.outputs.push(name.into());
        Ok(())
    }

    /// Outputs written outside `--out` are recorded by their given path.
    fn emit_at(&mut self, path: &Path, contents: &str) -> Result<(), CliError> {
        write_atomic(path, contents.as_bytes())?;
        self.manifest.outputs.push(path.display().to_string());
        Ok(())
    }

    fn table(&mut self, stem: &str, json_value: &Value, csv: String) -> Result<(), CliError> {
        match self.format {
            Format::Json => self.emit(&format!("{stem}.json"), &canonical_json(json_value)),
            Format::Csv => self.emit(&format!("{stem}.csv"), &csv),
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.manifest.outputs.push(MANIFEST.into());
        let text = canonical_json(&self.manifest);
        write_atomic(&self.out.join(MANIFEST), text.as_bytes())
    }
}

fn parse_regime(s: &str) -> Result<RegimeContext, CliError> {
    RegimeContext::parse(s).ok_or_else(|| CliError::Usage(format!("unknown regime {s}")))
}

fn regime_for(inputs: &Inputs, pkg: &ArtifactPackage) -> Result<RegimeContext, CliError> {
    inputs.regime.as_deref().map(parse_regime).transpose().map(|r| r.unwrap_or(pkg.spec.regime))
}

/// Tasks as a JSON array or as JSON lines.
pub fn parse_tasks(text: &str) -> Result<Vec<TaskInstance>, CliError> {
    let schema = |e: serde_json::Error| CliError::Artifact(ArtifactError::SchemaError(e.to_string()));
    let tasks: Vec<TaskInstance> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(schema)?
    } else {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>().map_err(schema)?
    };
    if tasks.is_empty() {
        return Err(CliError::Usage("task file holds no tasks".into()));
    }
    Ok(tasks)
}

fn gate_csv(report: &GateReport) -> String {
    let mut s = String::from("gate,evaluated,passed,violations\n");
    for g in &report.per_gate {
        let nodes: Vec<&str> = g.violations.iter().map(|v| v.node_id.as_str()).collect();
        s.push_str(&format!("{},{},{},{}\n", g.gate.name(), g.evaluated, g.passed, nodes.join("|")));
    }
    s
}

fn probes_csv(pkg: &ArtifactPackage, sim: &SimResult) -> String {
    let mut s = String::from("probe,x_m,t_s,T_K\n");
    for p in &sim.probes {
        let name = pkg
            .spec
            .outputs
            .iter()
            .find(|o| (o.position_m - p.position_m).abs() <= 1e-12 + 1e-9 * p.position_m.abs())
            .map_or("", |o| o.name.as_str());
        s.push_str(&format!("{name},{},{},{:.6}\n", p.position_m, p.time_s, p.temperature_k));
    }
    s
}

fn run_strategy(pkg: &ArtifactPackage, setup: &RepairSetup, name: &str, seed: u64) -> Result<(ArtifactPackage, RepairTrace), CliError> {
    if name == "tree_search" {
        return Ok(tree_search(pkg, setup, &SeverityScorer::new(setup.cdg), DEFAULT_BEAM)?);
    }
    let strategy = Strategy::parse(name, seed).ok_or_else(|| CliError::Usage(format!("unknown strategy {name}")))?;
    Ok(repair_loop(pkg, setup, &strategy)?)
}

/// Parse arguments and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    match &cli.command {
        Command::Validate { package, inputs, diagnostic } => cmd_validate(cli, package, inputs, *diagnostic),
        Command::Execute { package, field } => cmd_execute(cli, package, *field),
        Command::Repair { package, inputs, strategy, budget, cdg, emit_episodes } => {
            cmd_repair(cli, package, inputs, strategy, *budget, cdg.as_deref(), emit_episodes.as_deref())
        }
        Command::Inject { task, package, faults, materials } => {
            cmd_inject(cli, task.as_deref(), package.as_deref(), faults.as_deref(), materials.as_deref())
        }
        Command::Calibrate { episodes, synthetic, cdg, regime, holdout, alpha } => {
            cmd_calibrate(cli, episodes.as_deref(), *synthetic, cdg.as_deref(), regime, *holdout, *alpha)
        }
        Command::Bench { tasks, synthetic, strategies, seeds, budget, cdg, inputs, emit_episodes } => cmd_bench(
            cli,
            BenchArgs {
                tasks: tasks.as_deref(),
                synthetic: *synthetic,
                strategies,
                seeds,
                budget: *budget,
                cdg: cdg.as_deref(),
                inputs,
                emit_episodes: emit_episodes.as_deref(),
            },
        ),
        Command::Score { tasks, synthetic, generator, no_repair, inputs } => {
            cmd_score(cli, tasks.as_deref(), *synthetic, generator.as_deref(), *no_repair, inputs)
        }
        Command::CaseStudy { strategy } => cmd_case_study(cli, *strategy),
        Command::EchoGenerator { materials } => cmd_echo_generator(materials.as_deref()),
    }
}

fn cmd_validate(cli: &Cli, package: &Path, inputs: &Inputs, diagnostic: bool) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "validate");
    let pkg = run.package(package)?;
    let catalog = run.catalog(inputs.catalog.as_deref(), fixtures::DEFAULT_CATALOG)?;
    let db = run.materials(inputs.materials.as_deref(), fixtures::BENCH_MATERIALS)?;
    let mode = if diagnostic { EvalMode::Diagnostic } else { EvalMode::Strict };
    let report = evaluate(&pkg, &catalog, &db, regime_for(inputs, &pkg)?, mode)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    if let Some(obj) = value.as_object_mut() {
        obj.remove("execution");
    }
    run.table("gate_report", &value, gate_csv(&report))?;
    println!("ready: {}  failing: {:?}", report.ready, report.failing_gates().iter().map(|g| g.name()).collect::<Vec<_>>());
    run.finish()?;
    Ok(if report.ready { 0 } else { 1 })
}

fn cmd_execute(cli: &Cli, package: &Path, field: bool) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "execute");
    let pkg = run.package(package)?;
    let mut cfg = pkg.sim_config()?;
    cfg.record_field = field;
    let sim = solve_fd(&cfg);
    let mut summary = sim.clone();
    summary.field = None;
    run.emit("sim_result.json", &canonical_json(&summary))?;
    run.emit("temperatures.csv", &probes_csv(&pkg, &sim))?;
    if let Some(csv) = sim.field_csv() {
        run.emit("field.csv", &csv)?;
    }
    println!("status: {:?}  steps: {}  max T: {:.3} K", sim.status, sim.steps, sim.max_temperature);
    run.finish()?;
    Ok(if sim.completed() { 0 } else { 1 })
}

fn cmd_repair(
    cli: &Cli,
    package: &Path,
    inputs: &Inputs,
    strategy: &str,
    budget: usize,
    cdg: Option<&Path>,
    emit_episodes: Option<&Path>,
) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "repair");
    let pkg = run.package(package)?;
    let catalog = run.catalog(inputs.catalog.as_deref(), fixtures::DEFAULT_CATALOG)?;
    let db = run.materials(inputs.materials.as_deref(), fixtures::BENCH_MATERIALS)?;
    let graph = run.cdg(cdg)?;
    let setup = RepairSetup::new(&catalog, &graph, &db, regime_for(inputs, &pkg)?).with_budget(budget);
    let (fixed, trace) = run_strategy(&pkg, &setup, strategy, run.seed)?;
    run.emit("repaired_package.json", &fixed.to_json())?;
    run.emit("repair_trace.json", &canonical_json(&trace))?;
    if let Some(path) = emit_episodes {
        run.emit_at(path, &episodes_to_jsonl(&trace.episodes))?;
    }
    println!(
        "{}: {:?} after {} iterations, RCFE {}",
        trace.strategy,
        trace.terminal,
        trace.iterations.len(),
        rcfe(&trace).map(|v| format!("{v:.3}")).unwrap_or_else(|_| "n/a".into())
    );
    run.finish()?;
    Ok(if trace.is_ready() { 0 } else { 1 })
}

fn cmd_inject(
    cli: &Cli,
    task: Option<&Path>,
    package: Option<&Path>,
    faults: Option<&Path>,
    materials: Option<&Path>,
) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "inject");
    let clean = match package {
        Some(p) => run.package(p)?,
        None => {
            let t = TaskInstance::from_json_str(&run.input("task", task, fixtures::CASE_TASK)?)?;
            let db = run.materials(materials, fixtures::BENCH_MATERIALS)?;
            generate_template(&t, &db)?
        }
    };
    let specs: Vec<FaultSpec> = match faults {
        Some(p) => serde_json::from_str(&run.read("faults", p)?)
            .map_err(|e| CliError::Artifact(ArtifactError::SchemaError(e.to_string())))?,
        None => crate::bench::sample_faults(&clean, run.seed),
    };
    let (faulty, ledger) = inject_faults(&clean, &specs, run.seed)?;
    run.emit("package.json", &clean.to_json())?;
    run.emit("faulty_package.json", &faulty.to_json())?;
    run.emit("fault_ledger.json", &canonical_json(&ledger))?;
    for r in &ledger.records {
        println!("{:?} {}: {}", r.fault.kind, r.fault.target, r.detail);
    }
    run.finish()?;
    Ok(0)
}

fn cmd_calibrate(
    cli: &Cli,
    episodes: Option<&Path>,
    synthetic: Option<usize>,
    cdg: Option<&Path>,
    regime: &str,
    holdout: f64,
    alpha: f64,
) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "calibrate");
    let graph = run.cdg(cdg)?;
    let corpus: Vec<RepairEpisode> = match (episodes, synthetic) {
        (Some(p), _) => episodes_from_jsonl(&run.read("episodes", p)?)?,
        (None, Some(n)) => {
            let regimes = if regime == "all" { RegimeContext::ALL.to_vec() } else { vec![parse_regime(regime)?] };
            let eps = synthetic_episodes(&graph, &regimes, n, 0.8, 0.1, run.seed)?;
            run.emit("synthetic_episodes.jsonl", &episodes_to_jsonl(&eps))?;
            eps
        }
        (None, None) => return Err(CliError::Usage("give --episodes or --synthetic".into())),
    };
    let (calibrated, report) = calibrate(&corpus, graph.nodes(), CalibrationOptions { holdout, seed: run.seed, alpha })?;
    run.emit("calibrated_cdg.json", &calibrated.to_json())?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    if synthetic.is_some() {
        value["generating_graph_error"] = json!(weight_error(&report, &graph));
    }
    run.emit("calibration_report.json", &canonical_json(&value))?;
    println!(
        "{} episodes ({} train, {} held out), {} edges, held-out MAE {:.4}",
        corpus.len(),
        report.n_train,
        report.n_heldout,
        calibrated.edges().len(),
        report.heldout_mae
    );
    run.finish()?;
    Ok(0)
}

struct BenchArgs<'a> {
    tasks: Option<&'a Path>,
    synthetic: usize,
    strategies: &'a [String],
    seeds: &'a [u64],
    budget: usize,
    cdg: Option<&'a Path>,
    inputs: &'a Inputs,
    emit_episodes: Option<&'a Path>,
}

fn bench_summary_csv(report: &BenchReport) -> String {
    let mut s = String::from("strategy,runs,mean_rcfe,rcfe_ci_lo,rcfe_ci_hi,mean_iterations,ready_rate,rework_reduction\n");
    for r in &report.strategies {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.strategy, r.runs, r.mean_rcfe, r.rcfe_ci.0, r.rcfe_ci.1, r.mean_iterations, r.ready_rate, r.rework_reduction
        ));
    }
    s
}

fn cmd_bench(cli: &Cli, a: BenchArgs) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "bench");
    let catalog = run.catalog(a.inputs.catalog.as_deref(), fixtures::DEFAULT_CATALOG)?;
    let db = run.materials(a.inputs.materials.as_deref(), fixtures::BENCH_MATERIALS)?;
    let graph = run.cdg(a.cdg)?;
    let tasks = match a.tasks {
        Some(p) => parse_tasks(&run.read("tasks", p)?)?,
        None => synthetic_tasks(a.synthetic, run.seed, &db, &catalog),
    };
    for s in a.strategies {
        if Strategy::parse(s, 0).is_none() {
            return Err(CliError::Usage(format!("unknown strategy {s}")));
        }
    }
    let seeds: Vec<u64> = if a.seeds.is_empty() { (0..5).map(|i| derive_seed(run.seed, i)).collect() } else { a.seeds.to_vec() };
    let setup = BenchSetup {
        catalog: &catalog,
        cdg: &graph,
        db: &db,
        budget: a.budget,
        strategies: a.strategies.to_vec(),
        seeds,
    };
    let mut episodes = Vec::new();
    let report = run_bench(&tasks, &setup, a.emit_episodes.map(|_| &mut episodes))?;
    run.emit("bench_rows.csv", &rows_csv(&report.rows))?;
    let summary = json!({ "n_tasks": tasks.len(), "seeds": setup.seeds, "budget": a.budget,
        "strategies": report.strategies, "pair_tests": report.pair_tests });
    run.table("bench_summary", &summary, bench_summary_csv(&report))?;
    if let Some(path) = a.emit_episodes {
        run.emit_at(path, &episodes_to_jsonl(&episodes))?;
    }
    println!("{:<16} {:>6} {:>9} {:>10} {:>7} {:>8}", "strategy", "runs", "RCFE", "iterations", "ready", "rework");
    for s in &report.strategies {
        println!(
            "{:<16} {:>6} {:>9.3} {:>10.3} {:>7.3} {:>7.1}%",
            s.strategy,
            s.runs,
            s.mean_rcfe,
            s.mean_iterations,
            s.ready_rate,
            100.0 * s.rework_reduction
        );
    }
    for p in &report.pair_tests {
        println!("{} vs {}: {}/{} discordant, Holm p = {:.3e}", p.a, p.b, p.a_only, p.b_only, p.p_holm);
    }
    run.finish()?;
    Ok(0)
}

fn generator_command(spec: &str) -> Result<Vec<String>, CliError> {
    if spec == "echo" {
        let exe = std::env::current_exe().map_err(|source| CliError::Io { path: "current executable".into(), source })?;
        return Ok(vec![exe.display().to_string(), "echo-generator".into()]);
    }
    let parts: Vec<String> = spec.split_whitespace().map(String::from).collect();
    if parts.is_empty() {
        return Err(CliError::Usage("empty generator command".into()));
    }
    Ok(parts)
}

/// Reference rises for T3 scoring: samples listed under `expected.oracle`
/// when the task carries them, else a run on a grid refined twice.
fn reference_samples(task: &TaskInstance, cfg: &SimConfig) -> Vec<OracleSample> {
    if let Some(v) = task.expected.get("oracle") {
        if let Ok(samples) = serde_json::from_value::<Vec<OracleSample>>(v.clone()) {
            return samples;
        }
    }
    let reference = solve_fd(&halved_grid(&halved_grid(cfg)));
    if !reference.completed() {
        return Vec::new();
    }
    reference
        .probes
        .iter()
        .map(|p| OracleSample { position_m: p.position_m, time_s: p.time_s, delta_t: p.temperature_k - reference.t_init })
        .collect()
}

fn cmd_score(
    cli: &Cli,
    tasks: Option<&Path>,
    synthetic: usize,
    generator: Option<&str>,
    no_repair: bool,
    inputs: &Inputs,
) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "score");
    let catalog = run.catalog(inputs.catalog.as_deref(), fixtures::DEFAULT_CATALOG)?;
    let db = run.materials(inputs.materials.as_deref(), fixtures::BENCH_MATERIALS)?;
    let graph = run.cdg(None)?;
    let policies = [
        (crate::artifact::TaskType::T3, PolicyTemplate::from_json_str(&run.bundled("policy_t3", fixtures::POLICY_T3)?)?),
        (crate::artifact::TaskType::T4, PolicyTemplate::from_json_str(&run.bundled("policy_t4", fixtures::POLICY_T4)?)?),
    ];
    let tasks = match tasks {
        Some(p) => parse_tasks(&run.read("tasks", p)?)?,
        None => synthetic_tasks(synthetic, run.seed, &db, &catalog),
    };
    let command = generator.map(generator_command).transpose()?;
    if let Some(c) = &command {
        run.manifest.config_paths.insert("generator".into(), if generator == Some("echo") { "echo".into() } else { c.join(" ") });
    }
    let mut outcomes = Vec::new();
    let mut lines = String::new();
    for task in &tasks {
        let regime = inputs.regime.as_deref().map(parse_regime).transpose()?.unwrap_or(task.regime);
        let pkg = match &command {
            Some(c) => external_generate(c, task, GENERATOR_TIMEOUT)?,
            None => generate_template(task, &db)?,
        };
        let setup = RepairSetup::new(&catalog, &graph, &db, regime);
        let first = setup.evaluate(&pkg)?;
        let (final_pkg, trace) = if first.ready || no_repair {
            (pkg.clone(), None)
        } else {
            let (p, t) = repair_loop(&pkg, &setup, &Strategy::CdgSeverity)?;
            (p, Some(t))
        };
        let strict = evaluate(&final_pkg, &catalog, &db, regime, EvalMode::Strict)?;
        let report = setup.evaluate(&final_pkg)?;
        let mut scores = BTreeMap::new();
        let template = policies.iter().find(|(t, _)| *t == task.task_type).map_or(&policies[0].1, |(_, p)| p);
        let acs_value = package_acs(&final_pkg, &[&first, &report], template)?;
        scores.insert("acs".to_string(), acs_value);
        let sim = match &report.execution {
            Some(s) => s.clone(),
            None => solve_fd(&final_pkg.sim_config()?),
        };
        let produced = final_pkg.audit.manifest().map(<[String]>::to_vec).unwrap_or_default();
        scores.insert("pp_a".to_string(), score_t4(sim.completed(), &produced, &final_pkg.declared_artifacts, acs_value));
        if let Ok(cfg) = final_pkg.sim_config() {
            if let Ok(t3) = score_t3(&final_pkg, &sim, &reference_samples(task, &cfg), &strict) {
                scores.insert("si_g".to_string(), f64::from(t3.si_g));
            }
        }
        if let Some(t) = &trace {
            if let Ok(v) = rcfe(t) {
                scores.insert("rcfe".to_string(), v);
            }
        }
        let outcome = TaskOutcome {
            task_id: task.task_id.clone(),
            task_type: task.task_type,
            strata: task.strata.clone(),
            first_pass_gates: first.pass_vector(),
            gate_report: GateReport { execution: None, ..report },
            first_pass_ready: first.ready,
            post_repair_ready: strict.ready,
            trace,
            scores,
        };
        lines.push_str(&serde_json::to_string(&outcome).expect("outcome serializes"));
        lines.push('\n');
        outcomes.push(outcome);
    }
    let summary = summarize(&outcomes, DEFAULT_BOOTSTRAP, run.seed)?;
    run.emit("outcomes.jsonl", &lines)?;
    let mut csv = String::from("metric,mean,ci_lo,ci_hi\n");
    for (name, m) in &summary.metrics {
        csv.push_str(&format!("{name},{:.6},{:.6},{:.6}\n", m.mean, m.ci_lo, m.ci_hi));
    }
    run.table("score_summary", &serde_json::to_value(&summary).expect("summary serializes"), csv)?;
    for (name, m) in &summary.metrics {
        println!("{name:<12} {:.4} [{:.4}, {:.4}]", m.mean, m.ci_lo, m.ci_hi);
    }
    run.finish()?;
    Ok(0)
}

const REPORTED_PASS_VECTOR: [bool; 5] = [false, false, false, false, true];

fn gate_row(v: Option<&[bool; 5]>, i: usize) -> Value {
    v.map_or(Value::Null, |g| json!(g[i]))
}

/// Largest relative change between probe rises of two runs at shared samples.
pub fn max_rise_change(a: &SimResult, b: &SimResult) -> f64 {
    let mut worst = 0.0f64;
    for p in &a.probes {
        if let Some(tb) = b.probe(p.position_m, p.time_s) {
            let ra = p.temperature_k - a.t_init;
            let rb = tb - b.t_init;
            worst = worst.max((ra - rb).abs() / ra.abs().max(1.0));
        }
    }
    worst
}

/// Same problem on a grid with half the spacing and a quarter of the step.
pub fn halved_grid(cfg: &SimConfig) -> SimConfig {
    let mut fine = cfg.clone();
    fine.n_nodes = 2 * cfg.n_nodes - 1;
    fine.dt_mode = match cfg.dt_mode {
        DtMode::Fixed { dt } => DtMode::Fixed { dt: dt / 4.0 },
        m => m,
    };
    fine.step_budget = cfg.step_budget.saturating_mul(4);
    fine.record_field = false;
    fine
}

fn cmd_case_study(cli: &Cli, which: CaseStrategy) -> Result<i32, CliError> {
    let mut run = Run::new(cli, "case-study");
    let task = TaskInstance::from_json_str(&run.bundled("task", fixtures::CASE_TASK)?)?;
    let db = run.materials(None, fixtures::CASE_MATERIALS)?;
    let catalog = run.catalog(None, fixtures::CASE_CATALOG)?;
    let graph = run.cdg(None)?;
    let policy = PolicyTemplate::from_json_str(&run.bundled("policy", fixtures::POLICY_T3)?)?;

    let clean = generate_template(&task, &db)?;
    let fault = FaultSpec::new(FaultKind::UnitScale, "layers[0].k").with("factor", 100.0);
    let (faulty, ledger) = inject_faults(&clean, &[fault], run.seed)?;
    let setup = RepairSetup::new(&catalog, &graph, &db, task.regime);
    let first = setup.evaluate(&faulty)?;
    run.emit("faulty_package.json", &faulty.to_json())?;
    run.emit("fault_ledger.json", &canonical_json(&ledger))?;
    let mut first_value = serde_json::to_value(&first).expect("report serializes");
    if let Some(obj) = first_value.as_object_mut() {
        obj.remove("execution");
    }
    run.emit("first_pass_report.json", &canonical_json(&first_value))?;

    let fo_faulty = faulty.sim_config()?.fourier_numbers().into_iter().fold(f64::NAN, f64::max);
    let fo_clean = clean.sim_config()?.fourier_numbers().into_iter().fold(f64::NAN, f64::max);

    let mut strategies = Vec::new();
    if which != CaseStrategy::Flat {
        strategies.push(("cdg", Strategy::CdgSeverity));
    }
    if which != CaseStrategy::Cdg {
        strategies.push(("flat", Strategy::flat()));
    }
    let mut results = BTreeMap::new();
    for (label, strategy) in &strategies {
        let (fixed, trace) = repair_loop(&faulty, &setup, strategy)?;
        let strict = evaluate(&fixed, &catalog, &db, task.regime, EvalMode::Strict)?;
        let last = setup.evaluate(&fixed)?;
        let acs_value = package_acs(&fixed, &[&first, &last], &policy)?;
        run.emit(&format!("trace_{label}.json"), &canonical_json(&trace))?;
        results.insert(*label, (fixed, trace, strict, acs_value));
    }

    let first_gates = first.pass_vector();
    let final_gates = |label: &str| results.get(label).map(|r| r.2.pass_vector());
    let cdg_gates = final_gates("cdg");
    let flat_gates = final_gates("flat");
    let mut rows = Vec::new();
    let mut csv = String::from("gate,first_pass,reported_first_pass,after_cdg,after_flat\n");
    for (i, g) in Gate::ALL.iter().enumerate() {
        rows.push(json!({
            "gate": g.name(),
            "first_pass": first_gates[i],
            "reported_first_pass": REPORTED_PASS_VECTOR[i],
            "after_cdg": gate_row(cdg_gates.as_ref(), i),
            "after_flat": gate_row(flat_gates.as_ref(), i),
        }));
        let cell = |v: Option<&[bool; 5]>| v.map_or(String::new(), |g| g[i].to_string());
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            g.name(),
            first_gates[i],
            REPORTED_PASS_VECTOR[i],
            cell(cdg_gates.as_ref()),
            cell(flat_gates.as_ref())
        ));
    }
    run.table("gate_summary", &Value::Array(rows), csv)?;

    let mut summary = json!({
        "fault": "layers[0].k reported in W/(cm·K): value x100",
        "fourier": { "faulty": fo_faulty, "corrected": fo_clean, "reported_faulty": 43.0, "reported_corrected": 0.43 },
        "first_pass": {
            "gates": first_gates,
            "violated_nodes": first.violated_nodes(),
        },
    });
    let mut temperatures: Option<(ArtifactPackage, SimResult)> = None;
    for (label, (fixed, trace, strict, acs_value)) in &results {
        let reported = match *label {
            "cdg" => json!({ "iterations": 1, "rcfe": 3.0, "acs": 1.0, "ready": true }),
            _ => json!({ "iterations": 8, "acs": 0.61, "ready": false }),
        };
        summary[*label] = json!({
            "terminal": trace.terminal,
            "iterations": trace.iterations.len(),
            "path": trace.iterations.iter().map(|i| format!("{}:{}", i.chosen_node, i.action_kind)).collect::<Vec<_>>(),
            "rcfe": rcfe(trace).ok(),
            "acs": acs_value,
            "ready": strict.ready,
            "reported": reported,
        });
        if *label == "cdg" && strict.ready {
            let mut cfg = fixed.sim_config()?;
            cfg.record_field = true;
            temperatures = Some((fixed.clone(), solve_fd(&cfg)));
        }
    }

    if let Some((fixed, sim)) = &temperatures {
        run.emit("temperatures.csv", &probes_csv(fixed, sim))?;
        if let Some(f) = sim.field_csv() {
            run.emit("field.csv", &f)?;
        }
        let cfg = fixed.sim_config()?;
        let surface_times: Vec<f64> = cfg.probe_times.iter().copied().filter(|&t| t > 0.0 && t <= 15.0).collect();
        let oracle = front_layer_oracle(&cfg, 0.0, &surface_times);
        let mut ocsv = String::from("t_s,sim_T_K,oracle_T_K,rel_error_rise\n");
        let mut worst = 0.0f64;
        for o in &oracle {
            if let Some(ts) = sim.probe(0.0, o.time_s) {
                let err = (ts - (sim.t_init + o.delta_t)).abs() / o.delta_t.abs().max(1.0);
                worst = worst.max(err);
                ocsv.push_str(&format!("{},{ts:.6},{:.6},{err:.6}\n", o.time_s, sim.t_init + o.delta_t));
            }
        }
        run.emit("oracle_comparison.csv", &ocsv)?;
        let fine = solve_fd(&halved_grid(&cfg));
        let expected = &task.expected;
        let mut pcsv = String::from("probe,x_m,t_s,sim_T_K,reported_T_K\n");
        let mut probes = Vec::new();
        for (name, key) in [("interface", "reported_interface_k"), ("back_wall", "reported_back_wall_k")] {
            let Some(spec) = fixed.spec.outputs.iter().find(|o| o.name == name) else { continue };
            let reported: Vec<f64> =
                expected.get(key).and_then(Value::as_array).map(|a| a.iter().filter_map(Value::as_f64).collect()).unwrap_or_default();
            for (j, &t) in spec.times_s.iter().enumerate() {
                let s = sim.probe(spec.position_m, t);
                let r = reported.get(j).copied();
                pcsv.push_str(&format!(
                    "{name},{},{t},{},{}\n",
                    spec.position_m,
                    s.map(|v| format!("{v:.6}")).unwrap_or_default(),
                    r.map(|v| v.to_string()).unwrap_or_default()
                ));
                probes.push(json!({ "probe": name, "x_m": spec.position_m, "t_s": t, "sim_T_K": s, "reported_T_K": r }));
            }
        }
        run.emit("probe_comparison.csv", &pcsv)?;
        let back = fixed.spec.outputs.iter().find(|o| o.name == "back_wall");
        let back_max = back
            .map(|b| sim.probes.iter().filter(|p| (p.position_m - b.position_m).abs() < 1e-12).map(|p| p.temperature_k).fold(f64::NAN, f64::max));
        summary["validation"] = json!({
            "surface_max_rel_error_0_15s": worst,
            "energy_residual": sim.energy_residual(),
            "grid_halving_max_change": max_rise_change(sim, &fine),
            "back_wall_max_T_K": back_max,
            "structural_limit_K": expected.get("structural_limit_k"),
            "probes": probes,
        });
    }
    run.emit("case_summary.json", &canonical_json(&summary))?;

    println!("first pass: {:?} (reported {:?})", first_gates, REPORTED_PASS_VECTOR);
    println!("Fourier: faulty {fo_faulty:.3} corrected {fo_clean:.4}");
    for (label, (_, trace, strict, acs_value)) in &results {
        println!(
            "{label}: {:?} after {} iterations, RCFE {}, ACS {acs_value:.3}, ready {}",
            trace.terminal,
            trace.iterations.len(),
            rcfe(trace).map(|v| format!("{v:.3}")).unwrap_or_else(|_| "n/a".into()),
            strict.ready
        );
    }
    run.finish()?;
    let ready = match which {
        CaseStrategy::Flat => results.get("flat").is_some_and(|r| r.2.ready),
        _ => results.get("cdg").is_some_and(|r| r.2.ready),
    };
    Ok(if ready { 0 } else { 1 })
}

fn cmd_echo_generator(materials: Option<&Path>) -> Result<i32, CliError> {
    let text = match materials {
        Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
        None => fixtures::text(fixtures::BENCH_MATERIALS).map_err(|source| CliError::Io { path: "materials".into(), source })?,
    };
    let db = MaterialDb::from_json_str(&text)?;
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line).map_err(|source| CliError::Io { path: "stdin".into(), source })?;
    let task = TaskInstance::from_json_str(&line)?;
    let pkg = generate_template(&task, &db)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string(&pkg).expect("package serializes"))
        .map_err(|source| CliError::Io { path: "stdout".into(), source })?;
    Ok(0)
}
