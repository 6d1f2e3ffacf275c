//! One PASS/FAIL line per acceptance criterion. Exits nonzero when any fails.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cclg::artifact::{generate_template, inject_faults, ArtifactPackage, FaultKind, FaultSpec};
use cclg::assets::{Category, Gate, RegimeContext};
use cclg::audit::{acs, AuditTrail, EntryKey, EntryPayload, MemoSection, RequiredEntryPolicy, RetrievalPurpose};
use cclg::bench::{run_bench, synthetic_tasks, BenchSetup, ALL_STRATEGIES};
use cclg::cdg::{calibrate, synthetic_episodes, weight_error, CalibrationOptions, Cdg, CdgEdge, CdgNode, RepairEpisode};
use cclg::cli::{halved_grid, max_rise_change};
use cclg::executor::{
    fourier_number, front_layer_oracle, solve_fd, DtMode, OracleSample, ProbeSample, SimResult, SimStatus,
};
use cclg::fixtures;
use cclg::gates::{evaluate, EvalMode, GateReport, ViolationDetail};
use cclg::metrics::{
    eesr, eesr_decomposition, eesr_vectors, micro_f1, rouge_l, score_t3, score_t4, spec_complete, EesrVariant,
    Stage, TaskOutcome,
};
use cclg::rng::derive_seed;
use cclg::units::{convert, parse_unit, strings_equivalent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cclg");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn case_packages() -> (ArtifactPackage, ArtifactPackage) {
    let clean = generate_template(&fixtures::case_task(), &fixtures::case_materials()).unwrap();
    let fault = FaultSpec::new(FaultKind::UnitScale, "layers[0].k").with("factor", 100.0);
    let (faulty, _) = inject_faults(&clean, &[fault], 0).unwrap();
    (clean, faulty)
}

fn c1_fourier() -> Verdict {
    let (clean, faulty) = case_packages();
    let cfg = clean.sim_config().unwrap();
    let dx = cfg.dx();
    let front = cfg.layers[0].clone();
    let k_faulty = faulty.si_value("layers[0].k").unwrap();
    let start = Instant::now();
    let lo = fourier_number(front.k, front.rho, front.cp, dx, 5e-4).unwrap();
    let hi = fourier_number(k_faulty, front.rho, front.cp, dx, 5e-4).unwrap();
    let elapsed = start.elapsed();
    let dt = cfg.effective_dt();
    let lo_t = fourier_number(front.k, front.rho, front.cp, dx, dt).unwrap();
    let hi_t = fourier_number(k_faulty, front.rho, front.cp, dx, dt).unwrap();
    let ok = |v: f64, target: f64, tol: f64| (v - target).abs() <= tol;
    let pass = ok(lo, 0.43, 0.01) && ok(hi, 43.0, 0.5) && ok(lo_t, 0.43, 0.01) && ok(hi_t, 43.0, 0.5);
    verdict(
        pass && within(elapsed, Duration::from_millis(1)),
        format!(
            "dt=5e-4: Fo {lo:.4} / {hi:.2}; template dt={dt:.4e}: Fo {lo_t:.4} / {hi_t:.2}; {:.1} us",
            elapsed.as_secs_f64() * 1e6
        ),
    )
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn c2_case_study() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = Command::new(BIN).current_dir(tmp.path()).args(["--out", "cs", "case-study"]).output().unwrap();
    let elapsed = start.elapsed();
    if out.status.code() != Some(0) {
        return verdict(false, format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let dir = tmp.path().join("cs");
    let s = read_json(&dir.join("case_summary.json"));
    let gates: Vec<bool> = s["first_pass"]["gates"].as_array().unwrap().iter().map(|v| v.as_bool().unwrap()).collect();
    let first_ok = gates == [false, false, false, false, true];
    let cdg = &s["cdg"];
    let cdg_ok = cdg["iterations"] == 1 && cdg["rcfe"].as_f64() == Some(3.0) && cdg["ready"] == true;
    let flat = &s["flat"];
    let flat_ok = flat["terminal"] == "budget_exhausted" && flat["iterations"] == 8 && flat["ready"] == false;
    let trace = read_json(&dir.join("trace_flat.json"));
    let targets: Vec<String> = trace["iterations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["chosen_node"].as_str().unwrap().to_string())
        .collect();
    let no_unit = targets.iter().all(|t| !t.starts_with("u_"));
    let starts_exec = targets.first().is_some_and(|t| t.starts_with("e_"));
    let pass = first_ok && cdg_ok && flat_ok && no_unit && starts_exec && within(elapsed, Duration::from_secs(10));
    verdict(
        pass,
        format!(
            "first pass {gates:?}; cdg {} iter RCFE {} ready {}; flat {} after {} (targets {}); {:.2} s",
            cdg["iterations"],
            cdg["rcfe"],
            cdg["ready"],
            flat["terminal"],
            flat["iterations"],
            targets.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn c3_priority() -> Verdict {
    let g = Cdg::default_graph();
    let expected = [("u_k", 2.84), ("p_bounds_k", 1.67), ("n_fourier", 0.93), ("e_runs", 0.0)];
    let sev = BTreeMap::new();
    let mut parts = Vec::new();
    let mut pass = true;
    for (node, want) in expected {
        let got = g.gain(node, RegimeContext::NominalReentry, false, &sev).unwrap();
        pass &= (got - want).abs() <= 1e-9;
        parts.push(format!("{node} {got:.6}"));
    }
    let violated: BTreeSet<String> = expected.iter().map(|(n, _)| n.to_string()).collect();
    let top = g.priority(&violated, RegimeContext::NominalReentry, false, &sev).unwrap();
    pass &= top == "u_k";
    verdict(pass, format!("gains {}; priority {top}", parts.join(", ")))
}

fn c4_solver() -> Verdict {
    let (clean, _) = case_packages();
    let task = fixtures::case_task();
    let start = Instant::now();
    let cfg = clean.sim_config().unwrap();
    let sim = solve_fd(&cfg);
    let times: Vec<f64> = cfg.probe_times.iter().copied().filter(|&t| t > 0.0 && t <= 15.0).collect();
    let oracle = front_layer_oracle(&cfg, 0.0, &times);
    let mut worst: f64 = 0.0;
    let mut worst_t = 0.0;
    for o in &oracle {
        let Some(ts) = sim.probe(0.0, o.time_s) else { continue };
        let err = (ts - (sim.t_init + o.delta_t)).abs() / o.delta_t.abs().max(1.0);
        if err > worst {
            worst = err;
            worst_t = o.time_s;
        }
    }
    let energy = sim.energy_residual();
    let fine = solve_fd(&halved_grid(&cfg));
    let grid = max_rise_change(&sim, &fine);
    let elapsed = start.elapsed();
    let mut probes = Vec::new();
    for (name, x, key) in [("interface", 0.015, "reported_interface_k"), ("back_wall", 0.035, "reported_back_wall_k")] {
        let reported: Vec<f64> =
            task.expected[key].as_array().unwrap().iter().filter_map(Value::as_f64).collect();
        let oracle_at = front_layer_oracle(&cfg, x, &[10.0, 20.0, 30.0]);
        for (j, t) in [10.0, 20.0, 30.0].into_iter().enumerate() {
            probes.push(format!(
                "{name}@{t}s sim {:.0} / semi-inf {:.0} / reported {:.0}",
                sim.probe(x, t).unwrap_or(f64::NAN),
                sim.t_init + oracle_at[j].delta_t,
                reported.get(j).copied().unwrap_or(f64::NAN)
            ));
        }
    }
    let pass = sim.completed()
        && !oracle.is_empty()
        && worst < 0.03
        && energy < 0.005
        && grid < 0.01
        && within(elapsed, Duration::from_secs(30));
    verdict(
        pass,
        format!(
            "surface max rel error {:.2}% at t={worst_t} s (limit 3%); energy residual {energy:.2e}; grid halving {:.3}%; {:.2} s\n         probes: {}",
            100.0 * worst,
            100.0 * grid,
            elapsed.as_secs_f64(),
            probes.join("; ")
        ),
    )
}

fn diverge_with(faulty: &ArtifactPackage, dt: f64) -> SimResult {
    let mut cfg = faulty.sim_config().unwrap();
    cfg.dt_mode = DtMode::Fixed { dt };
    cfg.t_end = cfg.t_end.max(10.0 * dt);
    solve_fd(&cfg)
}

fn c5_divergence() -> Verdict {
    let (_, faulty) = case_packages();
    let describe = |r: &SimResult| match r.status {
        SimStatus::Diverged { at_time } => format!("diverged at {at_time} s, max {:.3e} K", r.max_temperature),
        ref s => format!("{s:?}"),
    };
    let literal = diverge_with(&faulty, 0.5);
    let reading = diverge_with(&faulty, 5e-4);
    let pass = matches!(literal.status, SimStatus::Diverged { at_time } if at_time <= 0.5)
        && literal.max_temperature > 1e5;
    verdict(pass, format!("dt=0.5: {}; dt=5e-4: {}", describe(&literal), describe(&reading)))
}

fn c6_ordering() -> Verdict {
    let catalog = fixtures::default_catalog();
    let db = fixtures::bench_materials();
    let graph = Cdg::default_graph();
    let tasks = synthetic_tasks(200, 0, &db, &catalog);
    let setup = BenchSetup {
        catalog: &catalog,
        cdg: &graph,
        db: &db,
        budget: cclg::repair::DEFAULT_BUDGET,
        strategies: ALL_STRATEGIES.map(String::from).to_vec(),
        seeds: (0..5).map(|i| derive_seed(0, i)).collect(),
    };
    let start = Instant::now();
    let report = run_bench(&tasks, &setup, None).unwrap();
    let elapsed = start.elapsed();
    let s = &report.strategies;
    let rcfe_ordered = s.windows(2).all(|w| w[0].mean_rcfe > w[1].mean_rcfe);
    let iter_ordered = s.windows(2).all(|w| w[0].mean_iterations < w[1].mean_iterations);
    let significant = report.pair_tests.iter().all(|p| p.p_holm < 0.05);
    let random_zero = s.iter().find(|x| x.strategy == "random").is_some_and(|x| x.rework_reduction == 0.0);
    let table: Vec<String> = s
        .iter()
        .map(|x| {
            format!(
                "{} RCFE {:.3} iter {:.3} ready {:.3} rework {:.1}%",
                x.strategy,
                x.mean_rcfe,
                x.mean_iterations,
                x.ready_rate,
                100.0 * x.rework_reduction
            )
        })
        .collect();
    let tests: Vec<String> =
        report.pair_tests.iter().map(|p| format!("{}>{} {}/{} p_holm {:.2e}", p.a, p.b, p.a_only, p.b_only, p.p_holm)).collect();
    verdict(
        rcfe_ordered
            && iter_ordered
            && significant
            && random_zero
            && s.len() == 4
            && within(elapsed, Duration::from_secs(300)),
        format!(
            "{} runs; rcfe ordered {rcfe_ordered}, iterations ordered {iter_ordered}, significant {significant}, random 0% {random_zero}; {:.1} s\n         {}\n         {}",
            report.rows.len(),
            elapsed.as_secs_f64(),
            table.join("; "),
            tests.join("; ")
        ),
    )
}

fn pair_corpus(n: usize, resolved: bool) -> Vec<RepairEpisode> {
    (0..n)
        .map(|i| {
            RepairEpisode::new(
                format!("d{i}"),
                "t",
                RegimeContext::NominalReentry,
                [("u_k".to_string(), true), ("p_bounds_k".to_string(), true)].into(),
                "u_k",
                "unit_rescale",
                [("u_k".to_string(), false), ("p_bounds_k".to_string(), !resolved)].into(),
            )
        })
        .collect()
}

fn c7_calibration() -> Verdict {
    let base = Cdg::default_graph();
    let flat_edges = base
        .edges()
        .iter()
        .map(|e| CdgEdge { weights: RegimeContext::ALL.iter().map(|r| (*r, 0.7)).collect(), ..e.clone() })
        .collect();
    let truth = Cdg::new(base.nodes().to_vec(), flat_edges).unwrap();
    let start = Instant::now();
    let opts = CalibrationOptions { holdout: 0.2, seed: 7, alpha: 0.0 };
    let eps = synthetic_episodes(&truth, &[RegimeContext::NominalReentry], 4206, 0.8, 0.1, 7).unwrap();
    let (_, report) = calibrate(&eps, truth.nodes(), opts).unwrap();
    let truth_err = weight_error(&report, &truth);
    let all = synthetic_episodes(&base, &RegimeContext::ALL, 4206, 0.8, 0.1, 7).unwrap();
    let (_, all_report) = calibrate(&all, base.nodes(), opts).unwrap();
    let nodes = vec![
        CdgNode { id: "u_k".into(), tier: Category::Unit, default_severity: 3 },
        CdgNode { id: "p_bounds_k".into(), tier: Category::Physical, default_severity: 2 },
    ];
    let exact = CalibrationOptions { holdout: 0.0, seed: 0, alpha: 0.0 };
    let w = |resolved| {
        let (_, r) = calibrate(&pair_corpus(200, resolved), &nodes, exact).unwrap();
        r.edges[0].w_hat[&RegimeContext::NominalReentry]
    };
    let (always, never) = (w(true), w(false));
    let elapsed = start.elapsed();
    verdict(
        eps.len() >= 4000
            && report.heldout_mae <= 0.08
            && always == 1.0
            && never == 0.0
            && within(elapsed, Duration::from_secs(60)),
        format!(
            "w=0.7 graph, nominal regime: {} episodes ({} train / {} held out), held-out MAE {:.4}, error vs generating graph {truth_err:.4}; degenerate w_hat {always} / {never}; {:.2} s\n         shipped graph over all four regimes: held-out MAE {:.4}, error vs generating graph {:.4}",
            eps.len(),
            report.n_train,
            report.n_heldout,
            report.heldout_mae,
            elapsed.as_secs_f64(),
            all_report.heldout_mae,
            weight_error(&all_report, &base)
        ),
    )
}

fn brute_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let is_subseq = |idx: &[usize]| {
        let mut j = 0;
        for &i in idx {
            while j < b.len() && b[j] != a[i] {
                j += 1;
            }
            if j == b.len() {
                return false;
            }
            j += 1;
        }
        true
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let idx: Vec<usize> = (0..a.len()).filter(|i| mask & (1 << i) != 0).collect();
        if idx.len() > best && is_subseq(&idx) {
            best = idx.len();
        }
    }
    best
}

fn f_measure(hit: usize, n_a: usize, n_b: usize) -> f64 {
    if n_a == 0 && n_b == 0 {
        1.0
    } else {
        2.0 * hit as f64 / (n_a + n_b) as f64
    }
}

fn random_vectors(rng: &mut ChaCha8Rng) -> Vec<[bool; 5]> {
    let n = rng.gen_range(1..=10);
    (0..n).map(|_| std::array::from_fn(|_| rng.gen_bool(0.6))).collect()
}

fn random_payload(rng: &mut ChaCha8Rng) -> EntryPayload {
    let field = ["layers[0].k", "layers[0].rho", "layers[1].cp"][rng.gen_range(0..3)].to_string();
    match rng.gen_range(0..5) {
        0 => EntryPayload::RetrievalSource {
            field,
            doc_id: "db".into(),
            page: 1,
            confidence: 0.9,
            purpose: if rng.gen_bool(0.5) { RetrievalPurpose::Repair } else { RetrievalPurpose::Generation },
        },
        1 => EntryPayload::UnitConversion { field, from: "W/(cm·K)".into(), to: "W/(m·K)".into(), factor: 100.0 },
        2 => EntryPayload::ValidationOutcome {
            gate: Gate::ALL[rng.gen_range(0..5)],
            passed: rng.gen_bool(0.5),
            iteration: rng.gen_range(0..3),
            note: None,
        },
        3 => EntryPayload::DesignMemoSection { name: MemoSection::ALL[rng.gen_range(0..MemoSection::ALL.len())], text: "x".into() },
        _ => EntryPayload::ArtifactManifest { names: vec!["sim_result.json".into()] },
    }
}

fn c8_metrics() -> Verdict {
    const TRIALS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures: Vec<String> = Vec::new();
    let mut note = |ok: bool, what: &str| {
        if !ok && !failures.iter().any(|f| f == what) {
            failures.push(what.to_string());
        }
    };

    for _ in 0..TRIALS {
        let v = random_vectors(&mut rng);
        let n = v.len() as f64;
        let count = |k: usize| v.iter().filter(|g| g.iter().filter(|p| **p).count() >= k).count() as f64 / n;
        let rates: Vec<f64> = (0..5).map(|g| v.iter().filter(|x| x[g]).count() as f64 / n).collect();
        let macro_gate = rates.iter().sum::<f64>() / 5.0;
        let best = rates.iter().copied().fold(0.0, f64::max);
        let full = eesr_vectors(&v, EesrVariant::Full).unwrap();
        note((full - count(5)).abs() < 1e-12, "eesr full");
        let mut prev = full;
        for k in (0..=5).rev() {
            let got = eesr_vectors(&v, EesrVariant::KOf5(k)).unwrap();
            note((got - count(k)).abs() < 1e-12, "eesr k-of-5");
            note(got >= prev, "eesr k-of-5 chain");
            prev = got;
        }
        let m = eesr_vectors(&v, EesrVariant::MacroGate).unwrap();
        let b = eesr_vectors(&v, EesrVariant::BestGate).unwrap();
        note((m - macro_gate).abs() < 1e-12, "eesr macro");
        note((b - best).abs() < 1e-12, "eesr best-gate");
        note(full <= m + 1e-12 && m <= b + 1e-12, "eesr full <= macro <= best");
    }

    let (clean, _) = case_packages();
    let strict = evaluate(&clean, &fixtures::case_catalog(), &fixtures::case_materials(), RegimeContext::NominalReentry, EvalMode::Strict).unwrap();
    let strict = GateReport { execution: None, ..strict };
    for _ in 0..TRIALS {
        let mut pkg = clean.clone();
        let complete = rng.gen_bool(0.7);
        if !complete {
            pkg.quantity_mut("layers[0].k").unwrap().unit = String::new();
        }
        let positions = [0.0, 0.015];
        let times = [1.0, 2.0, 3.0];
        let mut probes = Vec::new();
        for &x in &positions {
            for &t in &times {
                if rng.gen_bool(0.8) {
                    probes.push(ProbeSample { position_m: x, time_s: t, temperature_k: 300.0 + rng.gen_range(0.0..200.0) });
                }
            }
        }
        let completed = rng.gen_bool(0.8);
        let sim = SimResult {
            status: if completed { SimStatus::Completed } else { SimStatus::Diverged { at_time: 1.0 } },
            effective_dt: 1e-3,
            fourier_numbers: vec![0.4],
            t_init: 300.0,
            steps: 1,
            max_temperature: 500.0,
            min_temperature: 300.0,
            probes: probes.clone(),
            node_x: vec![],
            field: None,
            energy_stored: 0.0,
            energy_in: 0.0,
        };
        let n_oracle = rng.gen_range(1..=6);
        let oracle: Vec<OracleSample> = (0..n_oracle)
            .map(|_| {
                let (x, t) = (positions[rng.gen_range(0..2)], times[rng.gen_range(0..3)]);
                let base = probes.iter().find(|p| p.position_m == x && p.time_s == t).map_or(50.0, |p| p.temperature_k - 300.0);
                let spread = if rng.gen_bool(0.5) { 0.015 } else { 0.1 };
                OracleSample { position_m: x, time_s: t, delta_t: base * (1.0 + rng.gen_range(-spread..spread)) + rng.gen_range(-0.5..0.5) }
            })
            .collect();
        let mut worst: Option<f64> = None;
        for o in &oracle {
            if let Some(p) = probes.iter().find(|p| p.position_m == o.position_m && p.time_s == o.time_s) {
                let e = (p.temperature_k - 300.0 - o.delta_t).abs() / o.delta_t.abs().max(1.0);
                worst = Some(worst.map_or(e, |w: f64| w.max(e)));
            }
        }
        let func = completed && worst.is_some_and(|w| w <= 0.02);
        let expect = u8::from(complete && completed && func);
        let got = score_t3(&pkg, &sim, &oracle, &strict).unwrap();
        note(spec_complete(&pkg) == complete, "spec completeness");
        note(got.si_g == expect, "si-g");
    }

    let names: Vec<String> = (0..10).map(|i| format!("a{i}")).collect();
    for _ in 0..TRIALS {
        let declared: Vec<String> = names.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
        let produced: Vec<String> = names.iter().filter(|_| rng.gen_bool(0.7)).cloned().collect();
        let executed = rng.gen_bool(0.7);
        let a = rng.gen_range(0.0..=1.0);
        let expect = if executed && declared.iter().all(|d| produced.contains(d)) { a } else { 0.0 };
        note(score_t4(executed, &produced, &declared, a) == expect, "pp-a");
    }

    for _ in 0..TRIALS {
        let mut trail = AuditTrail::new();
        for _ in 0..rng.gen_range(0..=10) {
            trail.push(random_payload(&mut rng)).unwrap();
        }
        let mut keys = BTreeSet::new();
        for _ in 0..rng.gen_range(1..=10) {
            keys.insert(random_payload(&mut rng).key());
        }
        let present: Vec<EntryKey> = trail.entries().iter().map(|e| e.payload.key()).collect();
        let hit = keys.iter().filter(|k| present.contains(k)).count();
        let expect = hit as f64 / keys.len() as f64;
        let got = acs(&trail, &RequiredEntryPolicy { keys }).unwrap();
        note((got - expect).abs() < 1e-12, "acs");
    }

    for _ in 0..TRIALS {
        let a: BTreeSet<u8> = (0..10).filter(|_| rng.gen_bool(0.4)).collect();
        let b: BTreeSet<u8> = (0..10).filter(|_| rng.gen_bool(0.4)).collect();
        let tp = a.intersection(&b).count();
        let expect = f_measure(tp, a.len(), b.len());
        note((micro_f1(&a, &b) - expect).abs() < 1e-12, "micro-f1");
        let x: Vec<u8> = (0..rng.gen_range(0..=10)).map(|_| rng.gen_range(0..4)).collect();
        let y: Vec<u8> = (0..rng.gen_range(0..=10)).map(|_| rng.gen_range(0..4)).collect();
        let expect = f_measure(brute_lcs(&x, &y), x.len(), y.len());
        note((rouge_l(&x, &y) - expect).abs() < 1e-12, "rouge-l");
    }

    for _ in 0..TRIALS {
        let n = rng.gen_range(1..=10);
        let outcomes: Vec<TaskOutcome> = (0..n)
            .map(|i| {
                let first: [bool; 5] = std::array::from_fn(|_| rng.gen_bool(0.5));
                let first_ready = first.iter().all(|p| *p);
                TaskOutcome {
                    task_id: format!("t{i}"),
                    task_type: cclg::artifact::TaskType::T3,
                    strata: vec![],
                    first_pass_gates: first,
                    gate_report: strict.clone(),
                    first_pass_ready: first_ready,
                    post_repair_ready: first_ready || rng.gen_bool(0.6),
                    trace: None,
                    scores: BTreeMap::new(),
                }
            })
            .collect();
        let d = eesr_decomposition(&outcomes).unwrap();
        note((d.lang + d.scaffold).to_bits() == d.full.to_bits(), "decomposition identity");
        let full = eesr(&outcomes, EesrVariant::Full, Stage::ScaffoldFull).unwrap();
        let lang = eesr(&outcomes, EesrVariant::Full, Stage::Lang).unwrap();
        note((d.full - full).abs() < 1e-12 && d.lang == lang, "decomposition vs stage rates");
    }

    let pass = failures.is_empty();
    verdict(
        pass,
        if pass {
            format!("{TRIALS} trials each: eesr variants and chain, SI-G, PP-A, ACS, micro-F1, ROUGE-L, decomposition")
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    )
}

fn snapshot_twice(root: &Path, out: &str, args: &[&str], envs: [&[(&str, &str)]; 2]) -> Result<(), String> {
    let mut snaps = Vec::new();
    for env in envs {
        let o = Command::new(BIN)
            .current_dir(root)
            .envs(env.iter().copied())
            .args(["--out", out])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        if !matches!(o.status.code(), Some(0) | Some(1)) {
            return Err(format!("{}: exit {:?} {}", args[0], o.status.code(), String::from_utf8_lossy(&o.stderr)));
        }
        snaps.push(support::bytes_of_dir(&root.join(out)));
    }
    if snaps[0].is_empty() {
        return Err(format!("{}: no outputs", args[0]));
    }
    if snaps[0] != snaps[1] {
        let differing: Vec<&String> =
            snaps[0].keys().chain(snaps[1].keys()).filter(|k| snaps[0].get(*k) != snaps[1].get(*k)).collect();
        return Err(format!("{}: differs in {differing:?}", args[0]));
    }
    Ok(())
}

fn c9_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let mats = fx.join("case_materials.json").display().to_string();
    let cat = fx.join("case_catalog.json").display().to_string();
    std::fs::write(root.join("faults.json"), r#"[{"kind":"unit_scale","target":"layers[0].k","params":{"factor":100}}]"#).unwrap();
    let prep = Command::new(BIN)
        .current_dir(root)
        .args(["--out", "inputs", "inject", "--faults", "faults.json", "--materials", &mats])
        .output()
        .unwrap();
    if prep.status.code() != Some(0) {
        return verdict(false, format!("inject setup failed: {}", String::from_utf8_lossy(&prep.stderr)));
    }
    let plain: &[(&str, &str)] = &[];
    let runs: Vec<(&str, Vec<&str>, [&[(&str, &str)]; 2])> = vec![
        ("validate", vec!["validate", "inputs/faulty_package.json", "--diagnostic", "--materials", &mats, "--catalog", &cat], [plain, plain]),
        ("execute", vec!["execute", "inputs/package.json", "--field"], [plain, plain]),
        ("repair", vec!["repair", "inputs/faulty_package.json", "--materials", &mats, "--catalog", &cat], [plain, plain]),
        ("inject", vec!["inject"], [plain, plain]),
        ("calibrate", vec!["calibrate", "--synthetic", "500", "--regime", "all"], [plain, plain]),
        (
            "bench",
            vec!["bench", "--synthetic", "6", "--seeds", "1,2", "--emit-episodes", "det_bench/episodes.jsonl"],
            [&[("RAYON_NUM_THREADS", "1")], &[("RAYON_NUM_THREADS", "4")]],
        ),
        ("score", vec!["score", "--synthetic", "3"], [plain, plain]),
        ("case-study", vec!["case-study"], [plain, plain]),
    ];
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut good = Vec::new();
    for (name, args, envs) in &runs {
        match snapshot_twice(root, &format!("det_{name}"), args, *envs) {
            Ok(()) => good.push(*name),
            Err(e) => bad.push(e),
        }
    }
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!("byte-identical reruns: {} (bench at 1 and 4 threads); {:.1} s", good.join(", "), start.elapsed().as_secs_f64())
        } else {
            bad.join("; ")
        },
    )
}

const BASES: [&str; 6] = ["m", "g", "s", "W", "J", "Pa"];
const PREFIXES: [&str; 4] = ["", "k", "c", "m"];

fn random_unit(rng: &mut ChaCha8Rng) -> (String, String, String) {
    let n = rng.gen_range(1..=3);
    let terms: Vec<(usize, i32)> = (0..n).map(|_| (rng.gen_range(0..BASES.len()), rng.gen_range(1..=2))).collect();
    let render = |rng: &mut ChaCha8Rng, denominator_k: bool| {
        let mut s: Vec<String> = terms
            .iter()
            .map(|&(b, e)| {
                let p = PREFIXES[rng.gen_range(0..PREFIXES.len())];
                if e == 1 { format!("{p}{}", BASES[b]) } else { format!("{p}{}^{e}", BASES[b]) }
            })
            .collect();
        if denominator_k {
            s = vec![format!("{}/K", s.join("·"))];
        }
        s.join("·")
    };
    let per_k = rng.gen_bool(0.5);
    (render(rng, per_k), render(rng, per_k), render(rng, !per_k))
}

fn c10_units() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures: Vec<String> = Vec::new();
    let mut note = |ok: bool, what: String| {
        if !ok && failures.len() < 5 {
            failures.push(what);
        }
    };
    for _ in 0..2000 {
        let (a, b, other) = random_unit(&mut rng);
        let (ua, ub, uo) = (parse_unit(&a).unwrap(), parse_unit(&b).unwrap(), parse_unit(&other).unwrap());
        let x = rng.gen_range(-1e6..1e6);
        let back = convert(convert(x, &ua, &ub).unwrap(), &ub, &ua).unwrap();
        note((back - x).abs() <= 1e-9 * x.abs().max(1.0), format!("round trip {a} -> {b}"));
        let ab = strings_equivalent(&a, &b).unwrap();
        let ba = strings_equivalent(&b, &a).unwrap();
        let ratio_ok = match (ab.scale_ratio, ba.scale_ratio) {
            (Some(r), Some(s)) => (r * s - 1.0).abs() < 1e-12,
            _ => false,
        };
        note(ab.equivalent && ba.equivalent && ratio_ok, format!("equivalence {a} ~ {b}"));
        note(ua.dims == uo.dims || !strings_equivalent(&a, &other).unwrap().equivalent, format!("{a} vs {other}"));
    }
    let celsius = strings_equivalent("degC", "Celsius").unwrap();
    note(celsius.equivalent && celsius.scale_ratio == Some(1.0), "degC ~ Celsius".into());
    let k = convert(25.0, &parse_unit("Celsius").unwrap(), &parse_unit("K").unwrap()).unwrap();
    note((k - 298.15).abs() < 1e-9, format!("25 Celsius = {k} K"));
    let per_cm = strings_equivalent("W/(cm·K)", "W/(m·K)").unwrap();
    let ratio = per_cm.scale_ratio.unwrap_or(f64::NAN);
    note((ratio - 100.0).abs() < 1e-9, format!("W/(cm·K) ratio {ratio}"));

    let (_, faulty) = case_packages();
    let report =
        evaluate(&faulty, &fixtures::case_catalog(), &fixtures::case_materials(), RegimeContext::NominalReentry, EvalMode::Diagnostic).unwrap();
    let detected: Vec<f64> = report
        .gate(Gate::Unit)
        .violations
        .iter()
        .filter(|v| v.field.as_deref() == Some("layers[0].k"))
        .filter_map(|v| match v.detail {
            ViolationDetail::Magnitude { scale_ratio, .. } => Some(scale_ratio),
            _ => None,
        })
        .collect();
    note(detected.iter().any(|r| (r - 100.0).abs() < 1e-9), format!("gate scale ratios {detected:?}"));
    let pass = failures.is_empty();
    verdict(
        pass,
        if pass {
            format!("2000 random round-trip/equivalence trials; degC == Celsius; W/(cm·K) ratio {ratio}; unit gate scale ratio {detected:?}")
        } else {
            failures.join("; ")
        },
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("fourier gate math", c1_fourier),
        ("case-study golden behavior", c2_case_study),
        ("priority rule", c3_priority),
        ("solver vs analytical oracle", c4_solver),
        ("divergence detection", c5_divergence),
        ("strategy ordering", c6_ordering),
        ("calibration", c7_calibration),
        ("metric math", c8_metrics),
        ("determinism", c9_determinism),
        ("unit system", c10_units),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!("{} {:>2}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
