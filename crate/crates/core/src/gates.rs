//! The five verification gates, the Ready predicate and the violation bitmap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::artifact::{layer_field, si_unit_for, ArtifactPackage, MaterialDb, LAYER_PROPERTIES};
use crate::assets::{AssetCatalog, Category, ConstraintAsset, Gate, RegimeContext, Severity};
use crate::audit::{EntryKey, MemoSection};
use crate::executor::{fourier_number, solve_fd, SimConfig, SimResult, SimStatus, FOURIER_LIMIT};
use crate::units::{convert, parse_unit, unit_equivalent, Quantity, UnitError, SCALE_TOLERANCE};

pub const BUILTIN_RUN_ASSET: &str = "builtin:e_runs";
pub const RUN_NODE: &str = "e_runs";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error("execution gate required but no executor is bound")]
    ExecutorUnavailable,
    #[error(transparent)]
    Unit(#[from] UnitError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Strict,
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ViolationDetail {
    UnitMismatch { expected_unit: String, found_unit: String, scale_ratio: Option<f64> },
    Magnitude { expected_unit: String, found_unit: String, value: f64, reference: f64, scale_ratio: f64 },
    Positivity { value: f64 },
    Bounds { value: f64, range: [f64; 2] },
    FluxLimit { value: f64, limit: f64 },
    Fourier { layer: usize, fo: f64, limit: f64 },
    Grid { reason: String },
    Horizon { duration: f64, required: f64 },
    Probe { position_m: f64, time_s: f64, reason: String },
    Execution { status: String },
    Response { min_temperature: f64, max_temperature: f64, cap: f64 },
    StepBudget { planned: Option<u64>, budget: u64 },
    Audit { rule: String, missing: Vec<String> },
    Unevaluable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub node_id: String,
    pub asset_id: String,
    pub gate: Gate,
    pub severity: Severity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub detail: ViolationDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub gate: Gate,
    pub evaluated: bool,
    pub passed: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub mode: EvalMode,
    pub per_gate: Vec<GateOutcome>,
    /// node id → violated.
    pub bitmap: BTreeMap<String, bool>,
    pub ready: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution: Option<SimResult>,
}

impl GateReport {
    pub fn gate(&self, g: Gate) -> &GateOutcome {
        &self.per_gate[g.index()]
    }

    pub fn violated_nodes(&self) -> BTreeSet<String> {
        self.bitmap.iter().filter(|(_, v)| **v).map(|(k, _)| k.clone()).collect()
    }

    pub fn violations(&self) -> impl Iterator<Item = &Violation> {
        self.per_gate.iter().flat_map(|g| g.violations.iter())
    }

    pub fn violations_for<'a>(&'a self, node: &'a str) -> impl Iterator<Item = &'a Violation> + 'a {
        self.violations().filter(move |v| v.node_id == node)
    }

    pub fn first_failing_gate(&self) -> Option<Gate> {
        self.per_gate.iter().find(|g| g.evaluated && !g.passed).map(|g| g.gate)
    }

    pub fn failing_gates(&self) -> Vec<Gate> {
        self.per_gate.iter().filter(|g| g.evaluated && !g.passed).map(|g| g.gate).collect()
    }

    /// Pass indicator per gate (unevaluated counts as not passed).
    pub fn pass_vector(&self) -> [bool; 5] {
        let mut out = [false; 5];
        for g in &self.per_gate {
            out[g.gate.index()] = g.evaluated && g.passed;
        }
        out
    }

    /// Highest violation severity currently recorded against a node.
    pub fn node_severity(&self, node: &str) -> Option<Severity> {
        self.violations_for(node).map(|v| v.severity).max()
    }
}

/// Product over the five gates of the pass indicator.
pub fn ready(report: &GateReport) -> bool {
    report.per_gate.len() == Gate::ALL.len() && report.per_gate.iter().all(|g| g.evaluated && g.passed)
}

pub trait Executor: Sync {
    fn run(&self, cfg: &SimConfig) -> SimResult;
}

/// The in-process explicit solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceExecutor;

impl Executor for ReferenceExecutor {
    fn run(&self, cfg: &SimConfig) -> SimResult {
        solve_fd(cfg)
    }
}

pub struct Verifier<'a> {
    pub catalog: &'a AssetCatalog,
    pub db: &'a MaterialDb,
    pub executor: Option<&'a dyn Executor>,
}

/// Evaluate with the reference executor bound.
pub fn evaluate(
    pkg: &ArtifactPackage,
    catalog: &AssetCatalog,
    db: &MaterialDb,
    regime: RegimeContext,
    mode: EvalMode,
) -> Result<GateReport, GateError> {
    Verifier { catalog, db, executor: Some(&ReferenceExecutor) }.evaluate(pkg, regime, mode)
}

/// Pass iff the value lies in `[lo, hi]` (after conversion) and is positive.
pub fn physics_bounds_check(value: &Quantity, range: [f64; 2], range_unit: &str) -> Result<Option<ViolationDetail>, UnitError> {
    let from = parse_unit(&value.unit)?;
    let to = parse_unit(range_unit)?;
    let v = convert(value.value, &from, &to)?;
    if v <= 0.0 {
        return Ok(Some(ViolationDetail::Positivity { value: v }));
    }
    if v < range[0] || v > range[1] {
        return Ok(Some(ViolationDetail::Bounds { value: v, range }));
    }
    Ok(None)
}

fn snap_power_of_ten(r: f64) -> f64 {
    let p = r.log10().round();
    let snapped = 10f64.powi(p as i32);
    if ((r - snapped) / snapped).abs() <= SCALE_TOLERANCE {
        snapped
    } else {
        r
    }
}

fn band_param(asset: &ConstraintAsset, default: [f64; 2]) -> [f64; 2] {
    asset
        .validator
        .params
        .get("band")
        .and_then(|v| serde_json::from_value::<[f64; 2]>(v.clone()).ok())
        .unwrap_or(default)
}

struct Ctx<'a> {
    pkg: &'a ArtifactPackage,
    db: &'a MaterialDb,
    regime: RegimeContext,
    sim: Option<&'a SimResult>,
    cfg: Option<&'a SimConfig>,
}

fn violation(asset: &ConstraintAsset, field: Option<String>, detail: ViolationDetail) -> Violation {
    Violation {
        node_id: asset.node_id.clone(),
        asset_id: asset.id.clone(),
        gate: asset.category.gate(),
        severity: asset.severity,
        field,
        detail,
    }
}

/// Dimension check on one quantity; returns the SI value when dims match.
fn check_dims(asset: &ConstraintAsset, path: &str, q: &Quantity, expected: &str, out: &mut Vec<Violation>) -> Option<f64> {
    let found = match parse_unit(&q.unit) {
        Ok(u) => u,
        Err(e) => {
            out.push(violation(asset, Some(path.into()), ViolationDetail::Unevaluable { reason: e.to_string() }));
            return None;
        }
    };
    let exp = parse_unit(expected).expect("expected units are in the grammar");
    let check = unit_equivalent(&found, &exp);
    if !check.equivalent {
        out.push(violation(
            asset,
            Some(path.into()),
            ViolationDetail::UnitMismatch { expected_unit: expected.into(), found_unit: q.unit.clone(), scale_ratio: None },
        ));
        return None;
    }
    Some(convert(q.value, &found, &exp).expect("dims equal"))
}

fn in_band(v: f64, band: [f64; 2]) -> bool {
    v >= band[0] && v <= band[1]
}

/// Power of ten that brings `v` closest to the band's logarithmic centre.
fn band_ratio(v: f64, band: [f64; 2]) -> f64 {
    let centre = 0.5 * (band[0].log10() + band[1].log10());
    10f64.powi((v.log10() - centre).round() as i32)
}

fn unit_property(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let prop = asset.validator.param_str("property").unwrap_or("k");
    let expected = asset.validator.param_str("expected_unit").unwrap_or_else(|| si_unit_for(prop));
    for (i, layer) in ctx.pkg.spec.layers.iter().enumerate() {
        let path = layer_field(i, prop);
        let Some(q) = ctx.pkg.quantity(&path) else { continue };
        let Some(v) = check_dims(asset, &path, q, expected, out) else { continue };
        let Ok(entry) = ctx.db.entry(&layer.material_id, prop) else { continue };
        let (Ok(reference), Ok(range)) = (
            entry.quantity().value_in(expected),
            ctx.db.range_in(&layer.material_id, prop, expected),
        ) else {
            continue;
        };
        if v <= 0.0 || reference <= 0.0 || in_band(v, range) {
            continue;
        }
        let ratio = v / reference;
        if ratio.log10().abs() >= 1.0 - 1e-9 {
            out.push(violation(
                asset,
                Some(path),
                ViolationDetail::Magnitude {
                    expected_unit: expected.into(),
                    found_unit: q.unit.clone(),
                    value: v,
                    reference,
                    scale_ratio: snap_power_of_ten(ratio),
                },
            ));
        }
    }
}

fn unit_banded(asset: &ConstraintAsset, ctx: &Ctx, paths: &[String], expected: &str, band: [f64; 2], out: &mut Vec<Violation>) {
    for path in paths {
        let Some(q) = ctx.pkg.quantity(path) else { continue };
        let Some(v) = check_dims(asset, path, q, expected, out) else { continue };
        if v > 0.0 && !in_band(v, band) {
            let ratio = band_ratio(v, band);
            out.push(violation(
                asset,
                Some(path.clone()),
                ViolationDetail::Magnitude {
                    expected_unit: expected.into(),
                    found_unit: q.unit.clone(),
                    value: v,
                    reference: v / ratio,
                    scale_ratio: ratio,
                },
            ));
        }
    }
}

fn positivity(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let mut paths: Vec<String> = Vec::new();
    for i in 0..ctx.pkg.spec.layers.len() {
        paths.push(layer_field(i, "thickness"));
        paths.extend(LAYER_PROPERTIES.map(|p| layer_field(i, p)));
    }
    paths.push("initial_temperature".into());
    for path in paths {
        match ctx.pkg.si_value(&path) {
            Ok(v) if v > 0.0 => {}
            Ok(v) => out.push(violation(asset, Some(path), ViolationDetail::Positivity { value: v })),
            Err(e) => out.push(violation(asset, Some(path), ViolationDetail::Unevaluable { reason: e.to_string() })),
        }
    }
}

fn property_bounds(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let props: Vec<String> = asset
        .validator
        .params
        .get("properties")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| LAYER_PROPERTIES.iter().map(|s| s.to_string()).collect());
    let relax = ctx.pkg.sim.bounds_relaxation.max(0.0);
    for (i, layer) in ctx.pkg.spec.layers.iter().enumerate() {
        for prop in &props {
            let path = layer_field(i, prop);
            let unit = si_unit_for(prop);
            let Ok(range) = ctx.db.range_in(&layer.material_id, prop, unit) else { continue };
            let widened = [range[0] * (1.0 - relax), range[1] * (1.0 + relax)];
            let Some(q) = ctx.pkg.quantity(&path) else { continue };
            match q.value_in(unit) {
                Ok(v) if in_band(v, widened) => {}
                Ok(v) => out.push(violation(asset, Some(path), ViolationDetail::Bounds { value: v, range: widened })),
                Err(e) => out.push(violation(asset, Some(path), ViolationDetail::Unevaluable { reason: e.to_string() })),
            }
        }
    }
}

fn regime_flux_limit(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let limit = asset
        .validator
        .params
        .get("limits")
        .and_then(|m| m.get(ctx.regime.name()))
        .and_then(Value::as_f64)
        .unwrap_or(f64::INFINITY);
    match ctx.pkg.si_value("boundary.front.q_peak") {
        Ok(q) if q <= limit => {}
        Ok(q) => out.push(violation(asset, Some("boundary.front.q_peak".into()), ViolationDetail::FluxLimit { value: q, limit })),
        Err(e) => out.push(violation(asset, None, ViolationDetail::Unevaluable { reason: e.to_string() })),
    }
}

fn unevaluable(asset: &ConstraintAsset, why: &str, out: &mut Vec<Violation>) {
    out.push(violation(asset, None, ViolationDetail::Unevaluable { reason: why.into() }));
}

fn fourier_stability(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let Some(cfg) = ctx.cfg else { return unevaluable(asset, "configuration does not compile", out) };
    let (dx, dt) = (cfg.dx(), cfg.effective_dt());
    if !(dt.is_finite() && dt > 0.0) {
        return unevaluable(asset, &format!("time step {dt} is not positive"), out);
    }
    for (i, l) in cfg.layers.iter().enumerate() {
        match fourier_number(l.k, l.rho, l.cp, dx, dt) {
            Ok(fo) if fo <= FOURIER_LIMIT => {}
            Ok(fo) => out.push(violation(
                asset,
                Some(layer_field(i, "k")),
                ViolationDetail::Fourier { layer: i, fo, limit: FOURIER_LIMIT },
            )),
            Err(e) => out.push(violation(asset, Some(layer_field(i, "rho")), ViolationDetail::Unevaluable { reason: e.to_string() })),
        }
    }
}

fn grid_resolution(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let Some(cfg) = ctx.cfg else { return unevaluable(asset, "configuration does not compile", out) };
    let min_per_layer = asset.validator.param_f64("min_nodes_per_layer").unwrap_or(2.0);
    let max_nodes = asset.validator.param_f64("max_nodes").unwrap_or(20_000.0);
    if cfg.n_nodes < 3 || cfg.n_nodes as f64 > max_nodes {
        out.push(violation(asset, None, ViolationDetail::Grid { reason: format!("n_nodes {} outside [3, {max_nodes}]", cfg.n_nodes) }));
        return;
    }
    let dx = cfg.dx();
    for (i, l) in cfg.layers.iter().enumerate() {
        if l.thickness / dx < min_per_layer {
            out.push(violation(
                asset,
                Some(layer_field(i, "thickness")),
                ViolationDetail::Grid { reason: format!("layer {i} spans {:.2} cells (< {min_per_layer})", l.thickness / dx) },
            ));
        }
    }
}

fn time_horizon(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let Some(cfg) = ctx.cfg else { return unevaluable(asset, "configuration does not compile", out) };
    let latest_probe = cfg.probe_times.iter().copied().fold(0.0, f64::max);
    let required = cfg.flux.t_end.max(latest_probe);
    if cfg.t_end + 1e-12 < required {
        out.push(violation(asset, Some("duration".into()), ViolationDetail::Horizon { duration: cfg.t_end, required }));
    }
}

fn probe_validity(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let Some(cfg) = ctx.cfg else { return unevaluable(asset, "configuration does not compile", out) };
    let length = cfg.total_thickness();
    for p in &ctx.pkg.spec.outputs {
        if !(p.position_m >= 0.0 && p.position_m <= length * (1.0 + 1e-12)) {
            out.push(violation(
                asset,
                None,
                ViolationDetail::Probe { position_m: p.position_m, time_s: f64::NAN, reason: format!("outside [0, {length}] m") },
            ));
        }
        for &t in &p.times_s {
            if !(t >= 0.0 && t <= cfg.t_end) {
                out.push(violation(
                    asset,
                    None,
                    ViolationDetail::Probe { position_m: p.position_m, time_s: t, reason: format!("outside [0, {}] s", cfg.t_end) },
                ));
            }
        }
    }
}

fn status_name(s: &SimStatus) -> String {
    match s {
        SimStatus::Completed => "completed".into(),
        SimStatus::Diverged { at_time } => format!("diverged at {at_time} s"),
        SimStatus::InvalidInput { reason } => format!("invalid input: {reason}"),
    }
}

fn runs_to_completion(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    match ctx.sim {
        Some(r) if r.completed() => {}
        Some(r) => out.push(violation(asset, None, ViolationDetail::Execution { status: status_name(&r.status) })),
        None => unevaluable(asset, "configuration does not compile", out),
    }
}

fn bounded_response(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let Some(r) = ctx.sim.filter(|r| r.completed()) else { return };
    let cap = asset.validator.param_f64("max_temperature").unwrap_or(5000.0);
    let tol = asset.validator.param_f64("undershoot_tolerance").unwrap_or(1.0);
    if r.max_temperature > cap || r.min_temperature < r.t_init - tol {
        out.push(violation(
            asset,
            None,
            ViolationDetail::Response { min_temperature: r.min_temperature, max_temperature: r.max_temperature, cap },
        ));
    }
}

fn outputs_present(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let (Some(r), Some(cfg)) = (ctx.sim.filter(|r| r.completed()), ctx.cfg) else { return };
    for &t in &cfg.probe_times {
        for &x in &cfg.probe_positions {
            if !r.probe(x, t).is_some_and(f64::is_finite) {
                out.push(violation(
                    asset,
                    None,
                    ViolationDetail::Probe { position_m: x, time_s: t, reason: "missing output".into() },
                ));
            }
        }
    }
}

fn step_budget(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let Some(cfg) = ctx.cfg else { return unevaluable(asset, "configuration does not compile", out) };
    let planned = cfg.planned_steps();
    if !planned.is_some_and(|n| n <= cfg.step_budget) {
        out.push(violation(asset, None, ViolationDetail::StepBudget { planned, budget: cfg.step_budget }));
    }
}

/// Audit rule names and the CDG node each reports against.
pub const AUDIT_RULES: [(&str, &str); 5] = [
    ("retrieval", "a_provenance"),
    ("conversion", "a_conversion_log"),
    ("validation", "a_validation_log"),
    ("memo", "a_memo"),
    ("manifest", "a_artifact_manifest"),
];

/// Structural audit check: missing keys (or names) per rule.
pub fn audit_structural_gaps(pkg: &ArtifactPackage) -> Vec<(&'static str, Vec<String>)> {
    let trail = &pkg.audit;
    let keys = trail.keys();
    let mut gaps = Vec::new();
    let missing_retrieval: Vec<String> = pkg
        .property_paths()
        .into_iter()
        .filter(|f| !keys.contains(&EntryKey::retrieval(f)) && !keys.contains(&EntryKey::repair_retrieval(f)))
        .collect();
    gaps.push(("retrieval", missing_retrieval));
    let mut missing_conv = Vec::new();
    for path in pkg.quantity_paths() {
        let q = pkg.quantity(&path).expect("listed path");
        let prop = path.rsplit('.').next().unwrap_or(&path);
        let (Ok(found), Ok(target)) = (parse_unit(&q.unit), parse_unit(si_unit_for(prop))) else { continue };
        let needs = found.dims == target.dims
            && (found.affine != target.affine || ((found.scale - target.scale) / target.scale).abs() > SCALE_TOLERANCE);
        if needs && !keys.contains(&EntryKey::conversion(&path)) {
            missing_conv.push(path);
        }
    }
    gaps.push(("conversion", missing_conv));
    let mut missing_val = Vec::new();
    if let Some(last) = trail.last_validation_pass() {
        for pass in 0..=last {
            for g in Gate::ALL {
                let k = EntryKey::validation(g, pass);
                if !keys.contains(&k) {
                    missing_val.push(k.discriminator);
                }
            }
        }
    }
    gaps.push(("validation", missing_val));
    let missing_memo: Vec<String> = MemoSection::ALL
        .iter()
        .filter(|m| !keys.contains(&EntryKey::memo(**m)))
        .map(|m| m.name().to_string())
        .collect();
    gaps.push(("memo", missing_memo));
    let manifest: BTreeSet<&str> = trail.manifest().unwrap_or(&[]).iter().map(String::as_str).collect();
    let mut missing_art: Vec<String> =
        pkg.declared_artifacts.iter().filter(|a| !manifest.contains(a.as_str())).cloned().collect();
    if trail.manifest().is_none() {
        missing_art.insert(0, "manifest".into());
    }
    gaps.push(("manifest", missing_art));
    gaps
}

fn audit_policy(asset: &ConstraintAsset, ctx: &Ctx, out: &mut Vec<Violation>) {
    let rules: Vec<String> = asset
        .validator
        .params
        .get("rules")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_else(|| AUDIT_RULES.iter().map(|(r, _)| r.to_string()).collect());
    for (rule, missing) in audit_structural_gaps(ctx.pkg) {
        if missing.is_empty() || !rules.iter().any(|r| r == rule) {
            continue;
        }
        let node = AUDIT_RULES.iter().find(|(r, _)| *r == rule).map(|(_, n)| *n).unwrap_or("a_provenance");
        out.push(Violation {
            node_id: node.into(),
            asset_id: asset.id.clone(),
            gate: Gate::Audit,
            severity: asset.severity,
            field: None,
            detail: ViolationDetail::Audit { rule: rule.into(), missing },
        });
    }
}

fn run_validator(asset: &ConstraintAsset, ctx: &Ctx) -> Vec<Violation> {
    let mut out = Vec::new();
    let pkg = ctx.pkg;
    let all_layers = |prop: &str| (0..pkg.spec.layers.len()).map(|i| layer_field(i, prop)).collect::<Vec<_>>();
    match asset.validator.kind.as_str() {
        "unit_property" => unit_property(asset, ctx, &mut out),
        "unit_flux" => {
            let unit = asset.validator.param_str("expected_unit").unwrap_or("W/m^2");
            unit_banded(asset, ctx, &["boundary.front.q_peak".into()], unit, band_param(asset, [1e3, 1e8]), &mut out)
        }
        "unit_length" => {
            let unit = asset.validator.param_str("expected_unit").unwrap_or("m");
            unit_banded(asset, ctx, &all_layers("thickness"), unit, band_param(asset, [1e-4, 1.0]), &mut out)
        }
        "unit_temperature" => {
            let unit = asset.validator.param_str("expected_unit").unwrap_or("K");
            unit_banded(asset, ctx, &["initial_temperature".into()], unit, band_param(asset, [1.0, 5000.0]), &mut out)
        }
        "positivity" => positivity(asset, ctx, &mut out),
        "property_bounds" => property_bounds(asset, ctx, &mut out),
        "regime_flux_limit" => regime_flux_limit(asset, ctx, &mut out),
        "fourier_stability" => fourier_stability(asset, ctx, &mut out),
        "grid_resolution" => grid_resolution(asset, ctx, &mut out),
        "time_horizon" => time_horizon(asset, ctx, &mut out),
        "probe_validity" => probe_validity(asset, ctx, &mut out),
        "runs_to_completion" => runs_to_completion(asset, ctx, &mut out),
        "bounded_response" => bounded_response(asset, ctx, &mut out),
        "outputs_present" => outputs_present(asset, ctx, &mut out),
        "step_budget" => step_budget(asset, ctx, &mut out),
        "audit_policy" => audit_policy(asset, ctx, &mut out),
        other => unreachable!("validator kind {other} passed load-time registry check"),
    }
    out
}

pub fn builtin_run_asset() -> ConstraintAsset {
    serde_json::from_value(serde_json::json!({
        "id": BUILTIN_RUN_ASSET,
        "category": "execution",
        "node_id": RUN_NODE,
        "severity": "critical",
        "applicability": {"regimes": "any", "materials": "any"},
        "validator": {"kind": "runs_to_completion", "params": {}},
        "repair": {"kind": "reduce_dt_factor", "params": {"factor": 10.0}},
        "source": {"doc_id": "builtin", "page": 0, "confidence": 1.0}
    }))
    .expect("builtin asset is well formed")
}

impl<'a> Verifier<'a> {
    pub fn new(catalog: &'a AssetCatalog, db: &'a MaterialDb) -> Self {
        Verifier { catalog, db, executor: Some(&ReferenceExecutor) }
    }

    /// Assets evaluated under one gate, including the built-in run check when
    /// the catalog has no execution assets.
    pub fn gate_assets(&self, pkg: &ArtifactPackage, regime: RegimeContext, gate: Gate) -> Vec<ConstraintAsset> {
        let materials: BTreeSet<String> = pkg.spec.layers.iter().map(|l| l.material_id.clone()).collect();
        let mut assets: Vec<ConstraintAsset> = self
            .catalog
            .applicable_assets(regime, &materials)
            .into_iter()
            .filter(|a| a.category == gate.category())
            .cloned()
            .collect();
        assets.sort_by(|a, b| a.id.cmp(&b.id));
        if gate == Gate::Execution && self.catalog.in_category(Category::Execution).next().is_none() {
            assets.push(builtin_run_asset());
        }
        assets
    }

    pub fn evaluate(&self, pkg: &ArtifactPackage, regime: RegimeContext, mode: EvalMode) -> Result<GateReport, GateError> {
        let cfg = pkg.sim_config().ok();
        let mut per_gate = Vec::with_capacity(5);
        let mut bitmap: BTreeMap<String, bool> = BTreeMap::new();
        let mut sim: Option<SimResult> = None;
        let mut stopped = false;
        for gate in Gate::ALL {
            let assets = self.gate_assets(pkg, regime, gate);
            for a in &assets {
                bitmap.entry(a.node_id.clone()).or_insert(false);
            }
            if gate == Gate::Audit {
                for (_, node) in AUDIT_RULES {
                    if assets.iter().any(|a| a.validator.kind == "audit_policy") {
                        bitmap.entry(node.to_string()).or_insert(false);
                    }
                }
            }
            if stopped {
                per_gate.push(GateOutcome { gate, evaluated: false, passed: false, violations: vec![] });
                continue;
            }
            if gate == Gate::Execution && !assets.is_empty() {
                let exec = self.executor.ok_or(GateError::ExecutorUnavailable)?;
                sim = cfg.as_ref().map(|c| exec.run(c));
            }
            let ctx = Ctx { pkg, db: self.db, regime, sim: sim.as_ref(), cfg: cfg.as_ref() };
            let mut violations = Vec::new();
            for a in &assets {
                violations.extend(run_validator(a, &ctx));
            }
            for v in &violations {
                bitmap.insert(v.node_id.clone(), true);
            }
            let passed = violations.is_empty();
            per_gate.push(GateOutcome { gate, evaluated: true, passed, violations });
            if !passed && mode == EvalMode::Strict {
                stopped = true;
            }
        }
        let mut report = GateReport { mode, per_gate, bitmap, ready: false, execution: sim };
        report.ready = ready(&report);
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_check_examples() {
        let unit = "W/(m·K)";
        assert_eq!(physics_bounds_check(&Quantity::new(21.5, unit), [10.0, 30.0], unit).unwrap(), None);
        assert_eq!(
            physics_bounds_check(&Quantity::new(2150.0, unit), [10.0, 30.0], unit).unwrap(),
            Some(ViolationDetail::Bounds { value: 2150.0, range: [10.0, 30.0] })
        );
        assert!(matches!(
            physics_bounds_check(&Quantity::new(-1.0, unit), [10.0, 30.0], unit).unwrap(),
            Some(ViolationDetail::Positivity { .. })
        ));
        assert!(physics_bounds_check(&Quantity::new(1.0, "kg/m^3"), [10.0, 30.0], unit).is_err());
    }

    #[test]
    fn snapping_only_near_powers_of_ten() {
        assert_eq!(snap_power_of_ten(100.000000000001), 100.0);
        assert_eq!(snap_power_of_ten(0.01 * (1.0 + 1e-12)), 0.01);
        assert_eq!(snap_power_of_ten(23.0), 23.0);
    }

    #[test]
    fn band_ratio_recovers_thousand() {
        assert_eq!(band_ratio(15.0, [1e-4, 1.0]), 1000.0);
        assert_eq!(band_ratio(8e8, [1e3, 1e8]), 1000.0);
    }

    fn case_pair() -> (ArtifactPackage, ArtifactPackage) {
        use crate::artifact::{generate_template, inject_fault, FaultKind, FaultSpec};
        use crate::fixtures;
        let pkg = generate_template(&fixtures::case_task(), &fixtures::case_materials()).unwrap();
        let (faulty, _) = inject_fault(&pkg, &FaultSpec::new(FaultKind::UnitScale, "layers[0].k").with("factor", 100.0), 1).unwrap();
        (pkg, faulty)
    }

    #[test]
    fn faulty_case_fails_four_gates() {
        let (_, faulty) = case_pair();
        let cat = crate::fixtures::case_catalog();
        let db = crate::fixtures::case_materials();
        let r = evaluate(&faulty, &cat, &db, RegimeContext::NominalReentry, EvalMode::Diagnostic).unwrap();
        assert_eq!(r.pass_vector(), [false, false, false, false, true]);
        assert!(!r.ready);
        let violated: Vec<_> = r.violated_nodes().into_iter().collect();
        assert_eq!(violated, vec!["e_runs", "n_fourier", "p_bounds_k", "u_k"]);
        let unit = &r.gate(Gate::Unit).violations[0];
        match &unit.detail {
            ViolationDetail::Magnitude { scale_ratio, .. } => assert_eq!(*scale_ratio, 100.0),
            d => panic!("unexpected {d:?}"),
        }
        match &r.gate(Gate::Numerical).violations[0].detail {
            ViolationDetail::Fourier { fo, .. } => assert!((fo - 43.0).abs() < 1e-6, "{fo}"),
            d => panic!("unexpected {d:?}"),
        }
    }

    #[test]
    fn strict_mode_short_circuits_at_unit() {
        let (_, faulty) = case_pair();
        let cat = crate::fixtures::case_catalog();
        let db = crate::fixtures::case_materials();
        let r = evaluate(&faulty, &cat, &db, RegimeContext::NominalReentry, EvalMode::Strict).unwrap();
        assert!(r.gate(Gate::Unit).evaluated && !r.gate(Gate::Unit).passed);
        for g in [Gate::Physics, Gate::Numerical, Gate::Execution, Gate::Audit] {
            assert!(!r.gate(g).evaluated);
        }
        assert_eq!(r.first_failing_gate(), Some(Gate::Unit));
        assert!(r.execution.is_none());
    }

    #[test]
    fn clean_case_is_ready_in_strict_mode() {
        let (pkg, _) = case_pair();
        let cat = crate::fixtures::case_catalog();
        let db = crate::fixtures::case_materials();
        let r = evaluate(&pkg, &cat, &db, RegimeContext::NominalReentry, EvalMode::Strict).unwrap();
        assert!(r.ready, "{:?}", r.failing_gates());
        assert!(r.violated_nodes().is_empty());
    }

    #[test]
    fn default_catalog_agrees_on_clean_case() {
        let (pkg, _) = case_pair();
        let cat = crate::fixtures::default_catalog();
        let db = crate::fixtures::case_materials();
        let r = evaluate(&pkg, &cat, &db, RegimeContext::NominalReentry, EvalMode::Diagnostic).unwrap();
        assert!(r.ready, "{:?}", r.violations().collect::<Vec<_>>());
        assert_eq!(r.bitmap.len(), 23);
    }
}
