//! Closed-loop repair: target selection strategies, the action library, the
//! budgeted loop, scored best-first search, and trace/episode recording.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::artifact::{conversion_factor, si_unit_for, ArtifactError, ArtifactPackage, MaterialDb, LAYER_PROPERTIES};
use crate::assets::{AssetCatalog, Gate, KindSpec, RegimeContext};
use crate::audit::{EntryPayload, MemoSection, RetrievalPurpose};
use crate::cdg::{Cdg, CdgError, RepairEpisode};
use crate::executor::{stable_dt_limit, DtMode, DEFAULT_SAFETY};
use crate::gates::{builtin_run_asset, EvalMode, GateError, GateReport, Verifier, ViolationDetail, BUILTIN_RUN_ASSET};
use crate::rng::stream_rng;
use crate::units::Quantity;

pub const DEFAULT_BUDGET: usize = 8;
pub const DEFAULT_BEAM: usize = 4;

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("no applicable repair for {node}: {reason}")]
    NoApplicableRepair { node: String, reason: String },
    #[error("unregistered repair kind {0}")]
    UnknownAction(String),
    #[error("trace has no iterations")]
    EmptyTrace,
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Cdg(#[from] CdgError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

fn no_repair(node: &str, reason: impl Into<String>) -> RepairError {
    RepairError::NoApplicableRepair { node: node.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Random { seed: u64 },
    FlatChecklist { order: Vec<Gate> },
    CdgTopological,
    CdgSeverity,
}

impl Strategy {
    pub const DEFAULT_FLAT_ORDER: [Gate; 5] = [Gate::Execution, Gate::Numerical, Gate::Physics, Gate::Unit, Gate::Audit];

    pub fn flat() -> Self {
        Strategy::FlatChecklist { order: Self::DEFAULT_FLAT_ORDER.to_vec() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random { .. } => "random",
            Strategy::FlatChecklist { .. } => "flat_checklist",
            Strategy::CdgTopological => "cdg_topological",
            Strategy::CdgSeverity => "cdg_severity",
        }
    }

    /// Accepts the CLI spellings (`random`, `flat`, `cdg`, `cdg-severity`)
    /// as well as the canonical names.
    pub fn parse(s: &str, seed: u64) -> Option<Self> {
        match s {
            "random" => Some(Strategy::Random { seed }),
            "flat" | "flat_checklist" => Some(Strategy::flat()),
            "cdg" | "cdg_topological" => Some(Strategy::CdgTopological),
            "cdg-severity" | "cdg_severity" => Some(Strategy::CdgSeverity),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let Strategy::FlatChecklist { order } = self {
            let set: BTreeSet<Gate> = order.iter().copied().collect();
            if order.len() != 5 || set.len() != 5 {
                return Err("flat order must be a permutation of the five gates".into());
            }
        }
        Ok(())
    }
}

/// The eight symptom-level actions available to checklist and random
/// strategies, in checklist order.
pub fn symptom_playbook() -> Vec<KindSpec> {
    let spec = |kind: &str, params: Value| KindSpec {
        kind: kind.into(),
        params: serde_json::from_value(params).expect("object literal"),
    };
    vec![
        spec("reduce_dt_factor", json!({"factor": 10.0})),
        spec("reduce_dt_factor", json!({"factor": 5.0, "and_halve_dx": true})),
        spec("clamp_or_lookup", json!({"mode": "clamp", "property": "k", "range": [0.01, 500.0]})),
        spec("relax_bounds", json!({"fraction": 0.1})),
        spec("reduce_flux", json!({"factor": 0.8})),
        spec("switch_scheme_flag", json!({"scheme": "implicit_euler"})),
        spec("tighten_tolerance", json!({"factor": 0.1})),
        spec("raise_iteration_limit", json!({"factor": 10, "reset_dt": true})),
    ]
}

/// State shared by every action in one repair run.
#[derive(Debug, Clone, Copy)]
pub struct ActionContext<'a> {
    pub db: &'a MaterialDb,
    pub regime: RegimeContext,
    /// Time step at loop start, restored by `reset_dt`.
    pub initial_dt: Option<f64>,
}

fn param_f64(a: &KindSpec, key: &str, default: f64) -> f64 {
    a.param_f64(key).unwrap_or(default)
}

fn param_bool(a: &KindSpec, key: &str) -> bool {
    a.params.get(key).and_then(Value::as_bool).unwrap_or(false)
}

fn current_dt(pkg: &ArtifactPackage) -> Result<f64, ArtifactError> {
    Ok(pkg.sim_config()?.effective_dt())
}

fn layer_prop(path: &str) -> Option<(usize, &str)> {
    let rest = path.strip_prefix("layers[")?;
    let (idx, field) = rest.split_once("].")?;
    let i = idx.parse().ok()?;
    LAYER_PROPERTIES.contains(&field).then_some((i, field))
}

fn push(pkg: &mut ArtifactPackage, payload: EntryPayload) {
    pkg.audit.push(payload).expect("repair entries are schema-valid");
}

/// Replace a layer property with its database value and log the retrieval.
fn lookup_property(pkg: &mut ArtifactPackage, db: &MaterialDb, path: &str, i: usize, prop: &str) -> Result<String, RepairError> {
    let material = pkg.spec.layers.get(i).ok_or_else(|| no_repair(path, "layer index out of range"))?.material_id.clone();
    let entry = db.entry(&material, prop)?;
    let before = pkg.quantity(path).cloned();
    *pkg.quantity_mut(path).expect("layer property path") = entry.quantity();
    push(
        pkg,
        EntryPayload::RetrievalSource {
            field: path.to_string(),
            doc_id: entry.source.doc_id.clone(),
            page: entry.source.page,
            confidence: entry.source.confidence,
            purpose: RetrievalPurpose::Repair,
        },
    );
    let before = before.map(|q| format!("{} {}", q.value, q.unit)).unwrap_or_default();
    Ok(format!(
        "{path} {before} -> {} {} from {} p{} (confidence {})",
        entry.value, entry.unit, entry.source.doc_id, entry.source.page, entry.source.confidence
    ))
}

fn unit_rescale(pkg: &mut ArtifactPackage, node: &str, report: &GateReport, db: &MaterialDb) -> Result<Vec<String>, RepairError> {
    let mut notes = Vec::new();
    for v in report.violations_for(node) {
        let Some(path) = v.field.as_deref() else { continue };
        match &v.detail {
            ViolationDetail::Magnitude { expected_unit, found_unit, value, scale_ratio, .. } => {
                let factor = 1.0 / scale_ratio;
                let fixed = value / scale_ratio;
                let Some(q) = pkg.quantity_mut(path) else { continue };
                *q = Quantity::new(fixed, expected_unit.clone());
                push(
                    pkg,
                    EntryPayload::UnitConversion {
                        field: path.to_string(),
                        from: found_unit.clone(),
                        to: expected_unit.clone(),
                        factor,
                    },
                );
                notes.push(format!("{path} {value} {found_unit} x {factor:e} -> {fixed} {expected_unit}"));
                if let Some((i, prop)) = layer_prop(path) {
                    let material = &pkg.spec.layers[i].material_id;
                    if let Ok(entry) = db.entry(material, prop) {
                        let src = entry.source.clone();
                        push(
                            pkg,
                            EntryPayload::RetrievalSource {
                                field: path.to_string(),
                                doc_id: src.doc_id,
                                page: src.page,
                                confidence: src.confidence,
                                purpose: RetrievalPurpose::Repair,
                            },
                        );
                    }
                }
            }
            ViolationDetail::UnitMismatch { .. } => {
                if let Some((i, prop)) = layer_prop(path) {
                    notes.push(lookup_property(pkg, db, path, i, prop)?);
                }
            }
            _ => {}
        }
    }
    if notes.is_empty() {
        return Err(no_repair(node, "no rescalable unit violation"));
    }
    Ok(notes)
}

fn clamp_or_lookup(pkg: &mut ArtifactPackage, node: &str, action: &KindSpec, report: &GateReport, db: &MaterialDb) -> Result<Vec<String>, RepairError> {
    let mode = action.param_str("mode").unwrap_or("lookup");
    let fixed_range: Option<[f64; 2]> = action.params.get("range").and_then(|v| serde_json::from_value(v.clone()).ok());
    let mut fields: Vec<String> = report.violations_for(node).filter_map(|v| v.field.clone()).collect();
    fields.dedup();
    if fields.is_empty() && fixed_range.is_some() {
        // Symptom-level clamp: act on the most diffusive layer.
        let prop = action.param_str("property").unwrap_or("k");
        let layers = pkg.layers_si()?;
        let stiffest = (0..layers.len())
            .max_by(|&a, &b| layers[a].diffusivity().total_cmp(&layers[b].diffusivity()))
            .ok_or_else(|| no_repair(node, "no layers"))?;
        fields.push(crate::artifact::layer_field(stiffest, prop));
    }
    let mut notes = Vec::new();
    for path in fields {
        match (mode, layer_prop(&path)) {
            ("lookup", Some((i, prop))) => notes.push(lookup_property(pkg, db, &path, i, prop)?),
            (_, prop) => {
                let unit = prop.map(|(_, p)| si_unit_for(p)).unwrap_or_else(|| {
                    let last = path.rsplit('.').next().unwrap_or(&path);
                    si_unit_for(last)
                });
                let range = match (fixed_range, prop) {
                    (Some(r), _) => Some(r),
                    (None, Some((i, p))) => db.range_in(&pkg.spec.layers[i].material_id, p, unit).ok(),
                    (None, None) => None,
                };
                let Some(q) = pkg.quantity(&path).cloned() else { continue };
                let v = q.value_in(unit).map_err(ArtifactError::from)?;
                let new = match range {
                    Some([lo, hi]) => v.abs().clamp(lo, hi),
                    None if v < 0.0 => -v,
                    None => continue,
                };
                if new != v {
                    *pkg.quantity_mut(&path).expect("path exists") = Quantity::new(new, unit);
                    notes.push(format!("{path} {} {} clamped to {new} {unit}", q.value, q.unit));
                } else {
                    notes.push(format!("{path} already within bounds"));
                }
            }
        }
    }
    if notes.is_empty() {
        return Err(no_repair(node, "no field to clamp or look up"));
    }
    Ok(notes)
}

fn add_artifact(pkg: &mut ArtifactPackage) -> Vec<String> {
    let mut names: Vec<String> = pkg.audit.manifest().map(<[String]>::to_vec).unwrap_or_default();
    let present: BTreeSet<String> = names.iter().cloned().collect();
    let missing: Vec<String> = pkg.declared_artifacts.iter().filter(|a| !present.contains(*a)).cloned().collect();
    if missing.is_empty() && pkg.audit.manifest().is_some() {
        return vec!["manifest already complete".into()];
    }
    names.extend(missing.iter().cloned());
    push(pkg, EntryPayload::ArtifactManifest { names });
    vec![format!("manifest extended with [{}]", missing.join(", "))]
}

fn add_audit_entries(pkg: &mut ArtifactPackage, node: &str, report: &GateReport, db: &MaterialDb) -> Result<Vec<String>, RepairError> {
    let mut notes = Vec::new();
    let gaps: Vec<(String, Vec<String>)> = report
        .violations_for(node)
        .filter_map(|v| match &v.detail {
            ViolationDetail::Audit { rule, missing } => Some((rule.clone(), missing.clone())),
            _ => None,
        })
        .collect();
    for (rule, missing) in gaps {
        match rule.as_str() {
            "retrieval" => {
                for field in missing {
                    let Some((i, prop)) = layer_prop(&field) else { continue };
                    let entry = db.entry(&pkg.spec.layers[i].material_id, prop)?;
                    let src = entry.source.clone();
                    push(
                        pkg,
                        EntryPayload::RetrievalSource {
                            field: field.clone(),
                            doc_id: src.doc_id.clone(),
                            page: src.page,
                            confidence: src.confidence,
                            purpose: RetrievalPurpose::Generation,
                        },
                    );
                    notes.push(format!("retrieval {field} <- {} p{}", src.doc_id, src.page));
                }
            }
            "conversion" => {
                for field in missing {
                    let Some(q) = pkg.quantity(&field).cloned() else { continue };
                    let prop = field.rsplit('.').next().unwrap_or(&field);
                    let target = si_unit_for(prop);
                    if let Some(factor) = conversion_factor(&q, target)? {
                        push(pkg, EntryPayload::UnitConversion { field: field.clone(), from: q.unit.clone(), to: target.into(), factor });
                        notes.push(format!("conversion {field} {} -> {target}", q.unit));
                    }
                }
            }
            "validation" => {
                for key in missing {
                    let Some((g, it)) = key.split_once('@') else { continue };
                    let (Some(gate), Ok(iteration)) = (Gate::parse(g), it.parse::<u32>()) else { continue };
                    let passed = report.gate(gate).evaluated && report.gate(gate).passed;
                    push(pkg, EntryPayload::ValidationOutcome { gate, passed, iteration, note: Some("backfilled".into()) });
                    notes.push(format!("validation {key}"));
                }
            }
            "memo" => {
                for name in missing {
                    let Some(section) = MemoSection::ALL.iter().copied().find(|m| m.name() == name) else { continue };
                    let text = memo_text(pkg, section);
                    push(pkg, EntryPayload::DesignMemoSection { name: section, text });
                    notes.push(format!("memo {name}"));
                }
            }
            "manifest" => notes.extend(add_artifact(pkg)),
            _ => {}
        }
    }
    if notes.is_empty() {
        notes.push("no missing entries".into());
    }
    Ok(notes)
}

fn memo_text(pkg: &ArtifactPackage, section: MemoSection) -> String {
    match section {
        MemoSection::ProblemFraming => format!("{}-layer conduction stack, task {}.", pkg.spec.layers.len(), pkg.spec.task_id),
        MemoSection::Decomposition => format!("Explicit finite differences on {} nodes.", pkg.sim.n_nodes),
        MemoSection::RegimeConditions => format!("Regime {}.", pkg.spec.regime),
    }
}

/// Apply one registered repair action to a copy of `pkg`.
///
/// `report` is the diagnostic report the action responds to; actions that
/// need violation details (scale ratios, flux limits, audit gaps) read them
/// from there.
pub fn apply_repair(
    pkg: &ArtifactPackage,
    node: &str,
    action: &KindSpec,
    report: &GateReport,
    ctx: &ActionContext,
) -> Result<(ArtifactPackage, String), RepairError> {
    let mut out = pkg.clone();
    let notes: Vec<String> = match action.kind.as_str() {
        "unit_rescale" => unit_rescale(&mut out, node, report, ctx.db)?,
        "clamp_or_lookup" => clamp_or_lookup(&mut out, node, action, report, ctx.db)?,
        "set_stable_dt" => {
            let safety = param_f64(action, "safety", DEFAULT_SAFETY);
            let cfg = out.sim_config()?;
            let dt = safety * stable_dt_limit(&cfg.layers, cfg.dx());
            if !(dt.is_finite() && dt > 0.0) {
                return Err(no_repair(node, "stability limit undefined for current properties"));
            }
            out.sim.dt_mode = DtMode::Fixed { dt };
            vec![format!("dt -> {dt:.6e} s ({safety} x stability limit)")]
        }
        "reduce_dt_factor" => {
            let factor = param_f64(action, "factor", 10.0);
            if !(factor > 1.0) {
                return Err(no_repair(node, format!("factor {factor} does not reduce dt")));
            }
            let dt = current_dt(&out)? / factor;
            out.sim.dt_mode = DtMode::Fixed { dt };
            let mut v = vec![format!("dt / {factor} -> {dt:.6e} s")];
            if param_bool(action, "and_halve_dx") {
                out.sim.n_nodes = 2 * out.sim.n_nodes - 1;
                v.push(format!("n_nodes -> {}", out.sim.n_nodes));
            }
            v
        }
        "halve_dx" => {
            out.sim.n_nodes = 2 * out.sim.n_nodes.max(2) - 1;
            vec![format!("n_nodes -> {}", out.sim.n_nodes)]
        }
        "switch_scheme_flag" => {
            let scheme = action.param_str("scheme").unwrap_or("implicit_euler").to_string();
            let before = std::mem::replace(&mut out.sim.scheme, scheme.clone());
            vec![format!("scheme {before} -> {scheme}")]
        }
        "relax_bounds" => {
            let f = param_f64(action, "fraction", 0.1);
            out.sim.bounds_relaxation += f;
            vec![format!("bounds relaxation -> {}", out.sim.bounds_relaxation)]
        }
        "reduce_flux" => {
            let limit = report.violations_for(node).find_map(|v| match v.detail {
                ViolationDetail::FluxLimit { limit, .. } => Some(limit),
                _ => None,
            });
            let q = out.quantity("boundary.front.q_peak").cloned().expect("flux path");
            let new = match limit {
                Some(l) if param_bool(action, "to_limit") => Quantity::new(l, "W/m^2"),
                _ => Quantity::new(q.value * param_f64(action, "factor", 0.8), q.unit.clone()),
            };
            let note = format!("q_peak {} {} -> {} {}", q.value, q.unit, new.value, new.unit);
            *out.quantity_mut("boundary.front.q_peak").expect("flux path") = new;
            vec![note]
        }
        "tighten_tolerance" => {
            out.sim.tolerance *= param_f64(action, "factor", 0.1);
            vec![format!("tolerance -> {:e}", out.sim.tolerance)]
        }
        "raise_iteration_limit" => {
            let f = param_f64(action, "factor", 10.0).max(1.0);
            out.sim.iteration_limit = (out.sim.iteration_limit as f64 * f).min(u32::MAX as f64) as u32;
            out.sim.step_budget = (out.sim.step_budget as f64 * f).min(u64::MAX as f64 / 2.0) as u64;
            let mut v = vec![format!("iteration limit -> {}, step budget -> {}", out.sim.iteration_limit, out.sim.step_budget)];
            if param_bool(action, "reset_dt") {
                if let Some(dt) = ctx.initial_dt {
                    out.sim.dt_mode = DtMode::Fixed { dt };
                    v.push(format!("dt reset -> {dt:.6e} s"));
                }
            }
            v
        }
        "extend_time_horizon" => {
            let required = report
                .violations_for(node)
                .find_map(|v| match v.detail {
                    ViolationDetail::Horizon { required, .. } => Some(required),
                    _ => None,
                })
                .ok_or_else(|| no_repair(node, "no horizon violation"))?;
            out.spec.duration = Quantity::new(required, "s");
            vec![format!("duration -> {required} s")]
        }
        "clip_probes" => {
            let cfg = out.sim_config()?;
            let (length, t_end) = (cfg.total_thickness(), cfg.t_end);
            let mut changed = 0;
            for p in &mut out.spec.outputs {
                let x = p.position_m.clamp(0.0, length);
                if x != p.position_m || p.position_m.is_nan() {
                    p.position_m = if x.is_nan() { 0.0 } else { x };
                    changed += 1;
                }
                let before = p.times_s.len();
                p.times_s.retain(|t| *t >= 0.0 && *t <= t_end);
                changed += before - p.times_s.len();
            }
            vec![format!("{changed} probe entries clipped")]
        }
        "add_audit_entry" => add_audit_entries(&mut out, node, report, ctx.db)?,
        "add_artifact" => add_artifact(&mut out),
        other => return Err(RepairError::UnknownAction(other.to_string())),
    };
    Ok((out, notes.join("; ")))
}

/// Scores an intermediate repair state in [0, 1].
pub trait StateScorer {
    fn score(&self, report: &GateReport) -> f64;
}

/// `1 - open severity / total severity`, with node severities taken from
/// the graph defaults.
#[derive(Debug, Clone)]
pub struct SeverityScorer {
    severities: BTreeMap<String, u8>,
    total: f64,
}

impl SeverityScorer {
    pub fn new(cdg: &Cdg) -> Self {
        let severities: BTreeMap<String, u8> = cdg.nodes().iter().map(|n| (n.id.clone(), n.default_severity)).collect();
        let total = severities.values().map(|&s| s as f64).sum::<f64>().max(1.0);
        SeverityScorer { severities, total }
    }
}

impl StateScorer for SeverityScorer {
    fn score(&self, report: &GateReport) -> f64 {
        let open: f64 = report
            .violated_nodes()
            .iter()
            .map(|n| self.severities.get(n).copied().unwrap_or(2) as f64)
            .sum();
        (1.0 - open / self.total).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl StateScorer for ConstantScorer {
    fn score(&self, _: &GateReport) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    Ready,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub violated_before: BTreeMap<String, bool>,
    pub chosen_node: String,
    pub action_kind: String,
    pub action_detail: String,
    pub violated_after: BTreeMap<String, bool>,
    pub scorer_value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl IterationRecord {
    /// Nodes other than the target that went from violated to resolved.
    pub fn downstream_resolved(&self) -> Vec<String> {
        self.violated_before
            .iter()
            .filter(|(n, &v)| v && **n != self.chosen_node && !self.violated_after.get(*n).copied().unwrap_or(false))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairTrace {
    pub strategy: String,
    pub budget: usize,
    pub iterations: Vec<IterationRecord>,
    pub terminal: Terminal,
    /// Gate pass vector of the final state.
    pub final_gates: [bool; 5],
    pub episodes: Vec<RepairEpisode>,
}

impl RepairTrace {
    pub fn is_ready(&self) -> bool {
        self.terminal == Terminal::Ready
    }

    pub fn targeted_nodes(&self) -> Vec<&str> {
        self.iterations.iter().map(|i| i.chosen_node.as_str()).collect()
    }
}

/// Downstream (non-target) resolutions per repair action.
pub fn rcfe(trace: &RepairTrace) -> Result<f64, RepairError> {
    if trace.iterations.is_empty() {
        return Err(RepairError::EmptyTrace);
    }
    let resolved: usize = trace.iterations.iter().map(|i| i.downstream_resolved().len()).sum();
    Ok(resolved as f64 / trace.iterations.len() as f64)
}

/// Everything a repair run reads.
#[derive(Clone, Copy)]
pub struct RepairSetup<'a> {
    pub catalog: &'a AssetCatalog,
    pub cdg: &'a Cdg,
    pub db: &'a MaterialDb,
    pub regime: RegimeContext,
    pub budget: usize,
}

impl<'a> RepairSetup<'a> {
    pub fn new(catalog: &'a AssetCatalog, cdg: &'a Cdg, db: &'a MaterialDb, regime: RegimeContext) -> Self {
        RepairSetup { catalog, cdg, db, regime, budget: DEFAULT_BUDGET }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.budget = budget;
        self
    }

    fn verifier(&self) -> Verifier<'a> {
        Verifier::new(self.catalog, self.db)
    }

    pub fn evaluate(&self, pkg: &ArtifactPackage) -> Result<GateReport, RepairError> {
        Ok(self.verifier().evaluate(pkg, self.regime, EvalMode::Diagnostic)?)
    }
}

/// The repair named by the node's own catalog asset, or by the asset that
/// raised its violation.
pub fn designated_action(catalog: &AssetCatalog, node: &str, report: &GateReport) -> Option<KindSpec> {
    if let Some(a) = catalog.for_node(node).next() {
        return Some(a.repair.clone());
    }
    report.violations_for(node).find_map(|v| catalog.get(&v.asset_id).map(|a| a.repair.clone()))
}

fn designated_or_builtin(catalog: &AssetCatalog, node: &str, report: &GateReport) -> Option<KindSpec> {
    designated_action(catalog, node, report).or_else(|| {
        report.violations_for(node).any(|v| v.asset_id == BUILTIN_RUN_ASSET).then(|| builtin_run_asset().repair)
    })
}

fn log_validation(pkg: &mut ArtifactPackage, report: &GateReport, pass: u32) {
    let fo = pkg.sim_config().ok().map(|c| c.fourier_numbers().into_iter().fold(0.0, f64::max));
    for g in &report.per_gate {
        let note = match (g.gate, fo) {
            (Gate::Numerical, Some(fo)) => Some(format!("max Fo = {fo:.4}")),
            _ if !g.evaluated => Some("not evaluated".into()),
            _ => None,
        };
        push(pkg, EntryPayload::ValidationOutcome { gate: g.gate, passed: g.evaluated && g.passed, iteration: pass, note });
    }
}

fn cdg_candidates(setup: &RepairSetup, report: &GateReport) -> BTreeSet<String> {
    let violated = report.violated_nodes();
    let known: BTreeSet<String> = violated.iter().filter(|n| setup.cdg.contains(n)).cloned().collect();
    if known.is_empty() {
        violated
    } else {
        known
    }
}

fn severity_map(report: &GateReport) -> BTreeMap<String, u8> {
    report
        .violated_nodes()
        .into_iter()
        .filter_map(|n| report.node_severity(&n).map(|s| (n, s.weight())))
        .collect()
}

struct Selector {
    strategy: Strategy,
    rng: rand_chacha::ChaCha8Rng,
    playbook: Vec<KindSpec>,
    playbook_uses: usize,
}

impl Selector {
    fn new(strategy: &Strategy) -> Self {
        let seed = match strategy {
            Strategy::Random { seed } => *seed,
            _ => 0,
        };
        Selector { strategy: strategy.clone(), rng: stream_rng(seed, 0x7e9a), playbook: symptom_playbook(), playbook_uses: 0 }
    }

    fn next_playbook(&mut self) -> KindSpec {
        let a = self.playbook[self.playbook_uses % self.playbook.len()].clone();
        self.playbook_uses += 1;
        a
    }

    fn select(&mut self, setup: &RepairSetup, report: &GateReport) -> Result<(String, Option<KindSpec>), RepairError> {
        match &self.strategy {
            Strategy::Random { .. } => {
                let nodes: Vec<String> = report.violated_nodes().into_iter().collect();
                let node = nodes.choose(&mut self.rng).expect("called only when violations exist").clone();
                let mut pool = self.playbook.clone();
                if let Some(a) = designated_action(setup.catalog, &node, report) {
                    pool.push(a);
                }
                let action = pool[self.rng.gen_range(0..pool.len())].clone();
                Ok((node, Some(action)))
            }
            Strategy::FlatChecklist { order } => {
                let node = order
                    .iter()
                    .find_map(|g| report.gate(*g).violations.first().map(|v| v.node_id.clone()))
                    .or_else(|| report.violated_nodes().into_iter().next())
                    .expect("called only when violations exist");
                let action = match designated_action(setup.catalog, &node, report) {
                    Some(a) => a,
                    None => self.next_playbook(),
                };
                Ok((node, Some(action)))
            }
            Strategy::CdgTopological | Strategy::CdgSeverity => {
                let weighted = matches!(self.strategy, Strategy::CdgSeverity);
                let sev = if weighted { severity_map(report) } else { BTreeMap::new() };
                let candidates = cdg_candidates(setup, report);
                let node = if candidates.iter().all(|n| setup.cdg.contains(n)) {
                    setup.cdg.priority(&candidates, setup.regime, weighted, &sev)?
                } else {
                    candidates.into_iter().next().expect("nonempty")
                };
                let action = designated_or_builtin(setup.catalog, &node, report);
                Ok((node, action))
            }
        }
    }
}

fn initial_dt(pkg: &ArtifactPackage) -> Option<f64> {
    match pkg.sim.dt_mode {
        DtMode::Fixed { dt } => Some(dt),
        DtMode::Adaptive { .. } => current_dt(pkg).ok(),
    }
}

/// One step: apply `action` to `node`, re-evaluate, and record.
fn step(
    setup: &RepairSetup,
    pkg: &ArtifactPackage,
    report: &GateReport,
    node: &str,
    action: Option<KindSpec>,
    ctx: &ActionContext,
    pass: u32,
    scorer: &dyn StateScorer,
) -> Result<(ArtifactPackage, GateReport, IterationRecord), RepairError> {
    let outcome = match &action {
        Some(a) => apply_repair(pkg, node, a, report, ctx),
        None => Err(no_repair(node, "no designated repair")),
    };
    let (next_pkg, next_report, detail, error) = match outcome {
        Ok((mut p, detail)) => {
            let r = setup.evaluate(&p)?;
            log_validation(&mut p, &r, pass);
            (p, r, detail, None)
        }
        Err(e @ (RepairError::NoApplicableRepair { .. } | RepairError::UnknownAction(_))) => {
            (pkg.clone(), report.clone(), String::new(), Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    let rec = IterationRecord {
        iteration: pass as usize,
        violated_before: report.bitmap.clone(),
        chosen_node: node.to_string(),
        action_kind: action.map(|a| a.kind).unwrap_or_else(|| "none".into()),
        action_detail: detail,
        violated_after: next_report.bitmap.clone(),
        scorer_value: scorer.score(&next_report),
        error,
    };
    Ok((next_pkg, next_report, rec))
}

fn episode_for(pkg: &ArtifactPackage, regime: RegimeContext, strategy: &str, rec: &IterationRecord) -> RepairEpisode {
    RepairEpisode::new(
        format!("{}:{}:{}", pkg.spec.task_id, strategy, rec.iteration),
        pkg.spec.task_id.clone(),
        regime,
        rec.violated_before.clone(),
        rec.chosen_node.clone(),
        rec.action_kind.clone(),
        rec.violated_after.clone(),
    )
}

/// Validate, pick a target, repair, re-validate; stop at ready or budget.
pub fn repair_loop(
    pkg: &ArtifactPackage,
    setup: &RepairSetup,
    strategy: &Strategy,
) -> Result<(ArtifactPackage, RepairTrace), RepairError> {
    strategy.validate().map_err(|reason| no_repair("strategy", reason))?;
    let scorer = SeverityScorer::new(setup.cdg);
    let ctx = ActionContext { db: setup.db, regime: setup.regime, initial_dt: initial_dt(pkg) };
    let mut cur = pkg.clone();
    let mut report = setup.evaluate(&cur)?;
    log_validation(&mut cur, &report, 0);
    let mut selector = Selector::new(strategy);
    let mut iterations = Vec::new();
    let mut episodes = Vec::new();
    while !report.ready && iterations.len() < setup.budget {
        let (node, action) = selector.select(setup, &report)?;
        let pass = iterations.len() as u32 + 1;
        let (p, r, rec) = step(setup, &cur, &report, &node, action, &ctx, pass, &scorer)?;
        episodes.push(episode_for(&cur, setup.regime, strategy.name(), &rec));
        iterations.push(rec);
        cur = p;
        report = r;
    }
    let terminal = if report.ready { Terminal::Ready } else { Terminal::BudgetExhausted };
    let trace = RepairTrace {
        strategy: strategy.name().into(),
        budget: setup.budget,
        iterations,
        terminal,
        final_gates: report.pass_vector(),
        episodes,
    };
    Ok((cur, trace))
}

struct SearchState {
    pkg: ArtifactPackage,
    report: GateReport,
    path: Vec<IterationRecord>,
    score: f64,
    order: u64,
}

/// Best-first search over repair states.
///
/// Each expansion tries the designated repair on the top-`beam` violated
/// nodes by graph priority. The frontier pops the highest score; equal
/// scores pop the most recently inserted state, and children are inserted
/// lowest priority first, so a constant scorer walks the priority order
/// depth-first.
pub fn tree_search(
    pkg: &ArtifactPackage,
    setup: &RepairSetup,
    scorer: &dyn StateScorer,
    beam: usize,
) -> Result<(ArtifactPackage, RepairTrace), RepairError> {
    let ctx = ActionContext { db: setup.db, regime: setup.regime, initial_dt: initial_dt(pkg) };
    let mut root_pkg = pkg.clone();
    let root_report = setup.evaluate(&root_pkg)?;
    log_validation(&mut root_pkg, &root_report, 0);
    let finish = |state: SearchState, terminal: Terminal| {
        let episodes = state
            .path
            .iter()
            .map(|r| episode_for(&state.pkg, setup.regime, "tree_search", r))
            .collect();
        let trace = RepairTrace {
            strategy: "tree_search".into(),
            budget: setup.budget,
            iterations: state.path,
            terminal,
            final_gates: state.report.pass_vector(),
            episodes,
        };
        (state.pkg, trace)
    };
    let root = SearchState { score: scorer.score(&root_report), pkg: root_pkg, report: root_report, path: vec![], order: 0 };
    if root.report.ready {
        return Ok(finish(root, Terminal::Ready));
    }
    let mut counter = 1u64;
    let mut frontier = vec![root];
    let mut best: Option<SearchState> = None;
    let mut expansions = 0;
    while expansions < setup.budget {
        let Some(idx) = (0..frontier.len()).max_by(|&a, &b| {
            frontier[a].score.total_cmp(&frontier[b].score).then(frontier[a].order.cmp(&frontier[b].order))
        }) else {
            break;
        };
        let state = frontier.swap_remove(idx);
        expansions += 1;
        let candidates = cdg_candidates(setup, &state.report);
        let ranked: Vec<String> = if candidates.iter().all(|n| setup.cdg.contains(n)) {
            setup.cdg.ranked(&candidates, setup.regime, false, &BTreeMap::new())?.into_iter().map(|(n, _)| n).collect()
        } else {
            candidates.into_iter().collect()
        };
        let mut children = Vec::new();
        for node in ranked.into_iter().take(beam) {
            let action = designated_or_builtin(setup.catalog, &node, &state.report);
            let pass = state.path.len() as u32 + 1;
            let (p, r, rec) = step(setup, &state.pkg, &state.report, &node, action, &ctx, pass, scorer)?;
            let mut path = state.path.clone();
            path.push(rec);
            let child = SearchState { score: scorer.score(&r), pkg: p, report: r, path, order: 0 };
            if child.report.ready {
                return Ok(finish(child, Terminal::Ready));
            }
            children.push(child);
        }
        for mut child in children.into_iter().rev() {
            child.order = counter;
            counter += 1;
            let better = best.as_ref().is_none_or(|b| child.score > b.score);
            if better {
                best = Some(SearchState {
                    pkg: child.pkg.clone(),
                    report: child.report.clone(),
                    path: child.path.clone(),
                    score: child.score,
                    order: child.order,
                });
            }
            frontier.push(child);
        }
        if best.is_none() {
            best = Some(state);
        }
    }
    let best = best.expect("at least one expansion when budget > 0 or root returned");
    Ok(finish(best, Terminal::BudgetExhausted))
}
