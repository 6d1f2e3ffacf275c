//! Synthetic multi-fault benchmark: task generation, seeded fault sampling,
//! paired strategy runs and the per-strategy comparison table.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifact::{
    generate_template, inject_faults, ArtifactPackage, FaultKind, FaultSpec, MaterialDb, ProbeSpec, TaskInstance,
    TaskLayer, TaskSpec, TaskType,
};
use crate::assets::{AssetCatalog, RegimeContext};
use crate::cdg::{Cdg, RepairEpisode};
use crate::executor::FluxKind;
use crate::metrics::{bootstrap_ci, mcnemar_holm, rework_reduction, PairTest};
use crate::repair::{rcfe, repair_loop, RepairError, RepairSetup, Strategy};
use crate::rng::{derive_seed, stream_rng};
use crate::units::Quantity;

/// Peak surface temperature allowed for a generated task to count as clean.
const CLEAN_SURFACE_CAP: f64 = 2500.0;

fn q(v: f64, u: &str) -> Quantity {
    Quantity::new(v, u)
}

/// Semi-infinite surface rise under constant flux, used to keep generated
/// tasks well inside the response cap.
fn surface_rise_estimate(q_peak: f64, t: f64, k: f64, rho: f64, cp: f64) -> f64 {
    2.0 * q_peak * (t / std::f64::consts::PI).sqrt() / (k * rho * cp).sqrt()
}

/// Step budget carried by generated tasks.
pub const BENCH_STEP_BUDGET: u64 = 100_000;

/// Generate `n` tasks whose template packages pass every gate.
pub fn synthetic_tasks(n: usize, seed: u64, db: &MaterialDb, catalog: &AssetCatalog) -> Vec<TaskInstance> {
    let materials: Vec<&String> = db.materials.keys().collect();
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        let mut rng = stream_rng(seed, attempt);
        attempt += 1;
        let regime = RegimeContext::ALL[rng.gen_range(0..4)];
        let n_layers = rng.gen_range(1..=3usize);
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let m = materials[rng.gen_range(0..materials.len())].clone();
            let mm = (rng.gen_range(5..=25) as f64).round();
            layers.push(TaskLayer { material_id: m, thickness: q(mm, "mm") });
        }
        let front = &db.materials[&layers[0].material_id];
        let (k, rho, cp) = (front["k"].value, front["rho"].value, front["cp"].value);
        let t_end = [10.0, 20.0, 30.0][rng.gen_range(0..3)];
        let kind = if rng.gen_bool(0.5) { FluxKind::Triangular } else { FluxKind::Constant };
        let limit = match regime {
            RegimeContext::NominalReentry => 2.0e6,
            RegimeContext::ModerateAblation => 5.0e6,
            RegimeContext::HighHeatFlux => 2.0e7,
            RegimeContext::ExtremeThermochemical => 1.0e8,
        };
        let cap_flux = (CLEAN_SURFACE_CAP - 300.0) / surface_rise_estimate(1.0, t_end, k, rho, cp);
        let q_max = cap_flux.min(limit);
        let q_peak_kw = (rng.gen_range(0.2..0.9) * q_max / 1e3).round().max(1.0);
        let t_peak = if kind == FluxKind::Triangular { (t_end / 3.0).round() } else { t_end };
        let total_mm: f64 = layers.iter().map(|l| l.thickness.value).sum();
        let times: Vec<f64> = (1..=4).map(|i| t_end * i as f64 / 4.0).collect();
        let probes = vec![
            ProbeSpec { name: "surface".into(), position_m: 0.0, times_s: times.clone() },
            ProbeSpec { name: "back_wall".into(), position_m: total_mm / 1e3, times_s: times },
        ];
        let n_nodes = rng.gen_range(31..=51usize);
        let task = TaskInstance {
            task_id: format!("syn-{:04}", out.len()),
            task_type: TaskType::T3,
            regime,
            spec: TaskSpec {
                layers,
                flux: crate::artifact::FluxSpec { kind, q_peak: q(q_peak_kw, "kW/m^2"), t_peak: q(t_peak, "s"), t_end: q(t_end, "s") },
                back_adiabatic: true,
                initial_temperature: q(300.0, "K"),
                duration: Some(q(t_end, "s")),
                probes,
                n_nodes: Some(n_nodes),
                artifacts: None,
                step_budget: Some(BENCH_STEP_BUDGET),
            },
            strata: vec![format!("layers_{n_layers}"), format!("{kind:?}").to_lowercase(), regime.name().to_string()],
            expected: json!({}),
        };
        let Ok(pkg) = generate_template(&task, db) else { continue };
        let ok = crate::gates::evaluate(&pkg, catalog, db, regime, crate::gates::EvalMode::Strict).map(|r| r.ready);
        if ok.unwrap_or(false) {
            out.push(task);
        }
    }
    out
}

/// One to three faults on distinct targets, sampled from a stream keyed by
/// task and seed so every strategy sees the same faulty package.
pub fn sample_faults(pkg: &ArtifactPackage, seed: u64) -> Vec<FaultSpec> {
    let mut rng = stream_rng(seed, 0xFA17);
    let n_faults = rng.gen_range(1..=3usize);
    let n_layers = pkg.spec.layers.len();
    let mut used = std::collections::BTreeSet::new();
    let mut faults = Vec::new();
    let mut guard = 0;
    while faults.len() < n_faults && guard < 50 {
        guard += 1;
        let layer = rng.gen_range(0..n_layers);
        let prop = ["k", "rho", "cp"][rng.gen_range(0..3)];
        let path = format!("layers[{layer}].{prop}");
        let f = match rng.gen_range(0..10) {
            0..=3 => {
                let factor = [100.0, 1000.0, 0.01, 10.0][rng.gen_range(0..4)];
                FaultSpec::new(FaultKind::UnitScale, path).with("factor", factor)
            }
            4 => FaultSpec::new(FaultKind::UnitScale, format!("layers[{layer}].thickness")).with("factor", 1000.0),
            5 => FaultSpec::new(FaultKind::NegativeProperty, path),
            6 => FaultSpec::new(FaultKind::OutOfRange, path).with("factor", 3.0),
            7 => FaultSpec::new(FaultKind::UnstableDt, "sim.dt").with("fo", rng.gen_range(1.5..6.0)),
            8 => FaultSpec::new(FaultKind::MissingAuditEntry, "audit"),
            _ => FaultSpec::new(FaultKind::MissingArtifact, "declared_artifacts"),
        };
        let key = match f.kind {
            FaultKind::UnstableDt | FaultKind::MissingAuditEntry | FaultKind::MissingArtifact => format!("{:?}", f.kind),
            _ => f.target.clone(),
        };
        if used.insert(key) {
            faults.push(f);
        }
    }
    faults.sort_by_key(|f| matches!(f.kind, FaultKind::UnstableDt));
    faults
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task_id: String,
    pub seed: u64,
    pub strategy: String,
    pub regime: RegimeContext,
    pub strata: Vec<String>,
    pub faults: Vec<String>,
    pub first_pass_gates: [bool; 5],
    pub final_gates: [bool; 5],
    pub ready: bool,
    pub iterations: usize,
    pub rcfe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub runs: usize,
    pub mean_rcfe: f64,
    pub rcfe_ci: (f64, f64),
    pub mean_iterations: f64,
    pub ready_rate: f64,
    pub rework_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub strategies: Vec<StrategySummary>,
    pub pair_tests: Vec<PairTest>,
}

#[derive(Clone)]
pub struct BenchSetup<'a> {
    pub catalog: &'a AssetCatalog,
    pub cdg: &'a Cdg,
    pub db: &'a MaterialDb,
    pub budget: usize,
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
}

pub const ALL_STRATEGIES: [&str; 4] = ["cdg_severity", "cdg_topological", "flat_checklist", "random"];

fn fault_label(f: &FaultSpec) -> String {
    let factor = f.params.get("factor").map(|v| format!(" x{v}")).unwrap_or_default();
    format!("{:?}:{}{}", f.kind, f.target, factor)
}

/// Run every (task, seed, strategy) combination. Work is spread across a
/// thread pool; rows come back sorted by (task, seed, strategy).
pub fn run_bench(
    tasks: &[TaskInstance],
    setup: &BenchSetup,
    mut sink: Option<&mut Vec<RepairEpisode>>,
) -> Result<BenchReport, RepairError> {
    let jobs: Vec<(usize, u64)> = (0..tasks.len()).flat_map(|t| setup.seeds.iter().map(move |&s| (t, s))).collect();
    let results: Vec<Result<Vec<(BenchRow, Vec<RepairEpisode>)>, RepairError>> = jobs
        .par_iter()
        .map(|&(ti, seed)| {
            let task = &tasks[ti];
            let clean = generate_template(task, setup.db)?;
            let fault_seed = derive_seed(seed, ti as u64);
            let faults = sample_faults(&clean, fault_seed);
            let (faulty, _) = inject_faults(&clean, &faults, fault_seed)?;
            let rs = RepairSetup::new(setup.catalog, setup.cdg, setup.db, task.regime).with_budget(setup.budget);
            let first = rs.evaluate(&faulty)?;
            let mut rows = Vec::new();
            for name in &setup.strategies {
                let strategy = Strategy::parse(name, derive_seed(fault_seed, 0x5EED))
                    .ok_or_else(|| RepairError::UnknownAction(format!("strategy {name}")))?;
                let (_, trace) = repair_loop(&faulty, &rs, &strategy)?;
                let final_gates = trace.final_gates;
                let row = BenchRow {
                    task_id: task.task_id.clone(),
                    seed,
                    strategy: strategy.name().to_string(),
                    regime: task.regime,
                    strata: task.strata.clone(),
                    faults: faults.iter().map(fault_label).collect(),
                    first_pass_gates: first.pass_vector(),
                    final_gates,
                    ready: trace.is_ready(),
                    iterations: trace.iterations.len(),
                    rcfe: rcfe(&trace).ok(),
                };
                rows.push((row, trace.episodes));
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        for (row, eps) in r? {
            if let Some(s) = sink.as_deref_mut() {
                s.extend(eps);
            }
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| (&a.task_id, a.seed, &a.strategy).cmp(&(&b.task_id, b.seed, &b.strategy)));
    summarize_rows(rows, setup)
}

fn summarize_rows(rows: Vec<BenchRow>, setup: &BenchSetup) -> Result<BenchReport, RepairError> {
    let mut by_strategy: BTreeMap<String, Vec<&BenchRow>> = BTreeMap::new();
    for r in &rows {
        by_strategy.entry(r.strategy.clone()).or_default().push(r);
    }
    let names: Vec<String> = setup
        .strategies
        .iter()
        .filter_map(|s| Strategy::parse(s, 0).map(|x| x.name().to_string()))
        .collect();
    let mean_iter = |rs: &[&BenchRow]| rs.iter().map(|r| r.iterations as f64).sum::<f64>() / rs.len().max(1) as f64;
    let random_iters = by_strategy.get("random").map(|rs| mean_iter(rs));
    let mut strategies = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let Some(rs) = by_strategy.get(name) else { continue };
        let vals: Vec<f64> = rs.iter().filter_map(|r| r.rcfe).collect();
        let mean_rcfe = if vals.is_empty() { 0.0 } else { vals.iter().sum::<f64>() / vals.len() as f64 };
        let rcfe_ci = bootstrap_ci(&vals, 1000, 0.95, derive_seed(0xC1, i as u64)).unwrap_or((0.0, 0.0));
        let iters = mean_iter(rs);
        strategies.push(StrategySummary {
            strategy: name.clone(),
            runs: rs.len(),
            mean_rcfe,
            rcfe_ci,
            mean_iterations: iters,
            ready_rate: rs.iter().filter(|r| r.ready).count() as f64 / rs.len() as f64,
            rework_reduction: random_iters.map(|b| rework_reduction(iters, b)).unwrap_or(0.0),
        });
    }
    // Adjacent pairs in the listed order, tested on ready-within-budget.
    let mut pairs = Vec::new();
    for w in names.windows(2) {
        let (Some(a), Some(b)) = (by_strategy.get(&w[0]), by_strategy.get(&w[1])) else { continue };
        pairs.push((w[0].clone(), w[1].clone(), a.iter().map(|r| r.ready).collect(), b.iter().map(|r| r.ready).collect()));
    }
    let pair_tests = mcnemar_holm(&pairs).map_err(|e| RepairError::NoApplicableRepair { node: "bench".into(), reason: e.to_string() })?;
    Ok(BenchReport { rows, strategies, pair_tests })
}

pub const CSV_HEADER: &str = "task_id,type,strata,seed,strategy,u,p,n,e,a,eesr,rcfe,iterations,faults";

pub fn rows_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let g = r.final_gates.map(|b| u8::from(b).to_string());
        s.push_str(&format!(
            "{},T3,{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.task_id,
            r.strata.join("|"),
            r.seed,
            r.strategy,
            g[0],
            g[1],
            g[2],
            g[3],
            g[4],
            u8::from(r.ready),
            r.rcfe.map(|v| format!("{v:.6}")).unwrap_or_default(),
            r.iterations,
            r.faults.join("|")
        ));
    }
    s
}
