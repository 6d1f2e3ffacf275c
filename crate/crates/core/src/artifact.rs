//! Artifact packages, the deterministic template generator, fault injection
//! and the external-generator subprocess hook.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::assets::RegimeContext;
use crate::audit::{AuditTrail, EntryPayload, MemoSection, RetrievalPurpose};
use crate::executor::{
    stable_dt_limit, DtMode, FluxKind, HeatFluxProfile, Layer, SimConfig, DEFAULT_DIVERGENCE_THRESHOLD,
    DEFAULT_SAFETY, DEFAULT_STEP_BUDGET,
};
use crate::units::{parse_unit, Quantity, UnitError};

pub const DEFAULT_NODES: usize = 300;
pub const OUTPUT_CAP_BYTES: usize = 4 * 1024 * 1024;
pub const DEFAULT_ARTIFACTS: [&str; 3] = ["temperature_field.csv", "probe_temperatures.json", "sim_result.json"];

pub const SI_CONDUCTIVITY: &str = "W/(m·K)";
pub const SI_DENSITY: &str = "kg/m^3";
pub const SI_HEAT_CAPACITY: &str = "J/(kg·K)";
pub const SI_FLUX: &str = "W/m^2";
pub const SI_LENGTH: &str = "m";
pub const SI_TIME: &str = "s";
pub const SI_TEMPERATURE: &str = "K";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("unknown material {0}")]
    UnknownMaterial(String),
    #[error("material {material} lacks property {property}")]
    MissingProperty { material: String, property: String },
    #[error("bad fault target {0}")]
    BadTarget(String),
    #[error("bad fault parameters: {0}")]
    BadFaultParams(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error("generator timed out after {0:?}")]
    GeneratorTimeout(Duration),
    #[error("generator protocol error: {0}")]
    GeneratorProtocolError(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    T1,
    T2,
    T3,
    T4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub material_id: String,
    pub thickness: Quantity,
    pub k: Quantity,
    pub rho: Quantity,
    pub cp: Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxSpec {
    pub kind: FluxKind,
    pub q_peak: Quantity,
    pub t_peak: Quantity,
    pub t_end: Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub front: FluxSpec,
    pub back_adiabatic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSpec {
    pub name: String,
    pub position_m: f64,
    pub times_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalSpec {
    pub task_id: String,
    pub task_type: TaskType,
    pub regime: RegimeContext,
    pub layers: Vec<LayerSpec>,
    pub boundary: BoundarySpec,
    pub initial_temperature: Quantity,
    pub duration: Quantity,
    pub outputs: Vec<ProbeSpec>,
}

/// Solver-facing settings as written by the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub n_nodes: usize,
    pub dt_mode: DtMode,
    pub divergence_threshold: f64,
    pub step_budget: u64,
    /// Declared integration scheme. The reference executor is always explicit.
    pub scheme: String,
    pub tolerance: f64,
    pub iteration_limit: u32,
    /// Fractional widening applied to property bounds by the physics gate.
    pub bounds_relaxation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPackage {
    pub spec: CanonicalSpec,
    pub sim: SimSettings,
    pub declared_artifacts: Vec<String>,
    pub audit: AuditTrail,
}

/// Layer property names in field-path order.
pub const LAYER_PROPERTIES: [&str; 3] = ["k", "rho", "cp"];

pub fn layer_field(i: usize, prop: &str) -> String {
    format!("layers[{i}].{prop}")
}

pub fn si_unit_for(prop: &str) -> &'static str {
    match prop {
        "k" => SI_CONDUCTIVITY,
        "rho" => SI_DENSITY,
        "cp" => SI_HEAT_CAPACITY,
        "thickness" => SI_LENGTH,
        "q_peak" => SI_FLUX,
        "t_peak" | "t_end" | "duration" => SI_TIME,
        _ => SI_TEMPERATURE,
    }
}

fn parse_layer_path(path: &str) -> Option<(usize, &str)> {
    let rest = path.strip_prefix("layers[")?;
    let close = rest.find(']')?;
    let idx = rest[..close].parse().ok()?;
    let prop = rest[close + 1..].strip_prefix('.')?;
    Some((idx, prop))
}

impl ArtifactPackage {
    pub fn quantity(&self, path: &str) -> Option<&Quantity> {
        if let Some((i, prop)) = parse_layer_path(path) {
            let l = self.spec.layers.get(i)?;
            return match prop {
                "k" => Some(&l.k),
                "rho" => Some(&l.rho),
                "cp" => Some(&l.cp),
                "thickness" => Some(&l.thickness),
                _ => None,
            };
        }
        match path {
            "boundary.front.q_peak" => Some(&self.spec.boundary.front.q_peak),
            "boundary.front.t_peak" => Some(&self.spec.boundary.front.t_peak),
            "boundary.front.t_end" => Some(&self.spec.boundary.front.t_end),
            "initial_temperature" => Some(&self.spec.initial_temperature),
            "duration" => Some(&self.spec.duration),
            _ => None,
        }
    }

    pub fn quantity_mut(&mut self, path: &str) -> Option<&mut Quantity> {
        if let Some((i, prop)) = parse_layer_path(path) {
            let l = self.spec.layers.get_mut(i)?;
            return match prop {
                "k" => Some(&mut l.k),
                "rho" => Some(&mut l.rho),
                "cp" => Some(&mut l.cp),
                "thickness" => Some(&mut l.thickness),
                _ => None,
            };
        }
        match path {
            "boundary.front.q_peak" => Some(&mut self.spec.boundary.front.q_peak),
            "boundary.front.t_peak" => Some(&mut self.spec.boundary.front.t_peak),
            "boundary.front.t_end" => Some(&mut self.spec.boundary.front.t_end),
            "initial_temperature" => Some(&mut self.spec.initial_temperature),
            "duration" => Some(&mut self.spec.duration),
            _ => None,
        }
    }

    /// Every quantity path in the package, in a fixed order.
    pub fn quantity_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.spec.layers.len() {
            out.push(layer_field(i, "thickness"));
            for p in LAYER_PROPERTIES {
                out.push(layer_field(i, p));
            }
        }
        out.extend(
            ["boundary.front.q_peak", "boundary.front.t_peak", "boundary.front.t_end", "initial_temperature", "duration"]
                .map(String::from),
        );
        out
    }

    /// Material property paths (k, ρ, cp for each layer).
    pub fn property_paths(&self) -> Vec<String> {
        (0..self.spec.layers.len())
            .flat_map(|i| LAYER_PROPERTIES.map(|p| layer_field(i, p)))
            .collect()
    }

    pub fn si_value(&self, path: &str) -> Result<f64, ArtifactError> {
        let q = self.quantity(path).ok_or_else(|| ArtifactError::BadTarget(path.to_string()))?;
        let prop = path.rsplit('.').next().unwrap_or(path);
        Ok(q.value_in(si_unit_for(prop))?)
    }

    pub fn flux_profile(&self) -> Result<HeatFluxProfile, ArtifactError> {
        Ok(HeatFluxProfile {
            kind: self.spec.boundary.front.kind,
            q_peak: self.si_value("boundary.front.q_peak")?,
            t_peak: self.si_value("boundary.front.t_peak")?,
            t_end: self.si_value("boundary.front.t_end")?,
        })
    }

    pub fn layers_si(&self) -> Result<Vec<Layer>, ArtifactError> {
        (0..self.spec.layers.len())
            .map(|i| {
                Ok(Layer {
                    k: self.si_value(&layer_field(i, "k"))?,
                    rho: self.si_value(&layer_field(i, "rho"))?,
                    cp: self.si_value(&layer_field(i, "cp"))?,
                    thickness: self.si_value(&layer_field(i, "thickness"))?,
                })
            })
            .collect()
    }

    /// Compile the package into an executor configuration (SI units).
    pub fn sim_config(&self) -> Result<SimConfig, ArtifactError> {
        let mut positions: Vec<f64> = self.spec.outputs.iter().map(|p| p.position_m).collect();
        positions.sort_by(f64::total_cmp);
        positions.dedup();
        let mut times: Vec<f64> = self.spec.outputs.iter().flat_map(|p| p.times_s.iter().copied()).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        Ok(SimConfig {
            layers: self.layers_si()?,
            n_nodes: self.sim.n_nodes,
            dt_mode: self.sim.dt_mode,
            t_end: self.si_value("duration")?,
            flux: self.flux_profile()?,
            t_init: self.si_value("initial_temperature")?,
            divergence_threshold: self.sim.divergence_threshold,
            step_budget: self.sim.step_budget,
            probe_positions: positions,
            probe_times: times,
            record_field: false,
        })
    }

    /// Structural invariants of a package.
    pub fn validate(&self) -> Result<(), ArtifactError> {
        let bad = |m: String| Err(ArtifactError::SchemaError(m));
        if self.spec.layers.is_empty() {
            return bad("at least one layer required".into());
        }
        for path in self.quantity_paths() {
            let q = self.quantity(&path).expect("listed path exists");
            if q.unit.trim().is_empty() {
                return bad(format!("{path} lacks a unit string"));
            }
            if !q.value.is_finite() {
                return bad(format!("{path} is not finite"));
            }
        }
        for (i, l) in self.spec.layers.iter().enumerate() {
            if l.thickness.value <= 0.0 {
                return bad(format!("layers[{i}].thickness must be positive"));
            }
        }
        if matches!(self.spec.task_type, TaskType::T3 | TaskType::T4) && self.declared_artifacts.is_empty() {
            return bad("declared_artifacts must be nonempty".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self, ArtifactError> {
        let pkg: ArtifactPackage = serde_json::from_str(text).map_err(|e| ArtifactError::SchemaError(e.to_string()))?;
        pkg.validate()?;
        Ok(pkg)
    }
}

/// Serialize with sorted object keys.
pub fn canonical_json<T: Serialize>(v: &T) -> String {
    let value = serde_json::to_value(v).expect("serializable");
    serde_json::to_string_pretty(&value).expect("value serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub doc_id: String,
    pub page: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyEntry {
    pub value: f64,
    pub unit: String,
    pub valid_range: [f64; 2],
    pub source: SourceInfo,
}

impl PropertyEntry {
    pub fn quantity(&self) -> Quantity {
        Quantity::new(self.value, self.unit.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialDb {
    pub version: u32,
    pub materials: BTreeMap<String, BTreeMap<String, PropertyEntry>>,
}

impl MaterialDb {
    pub fn from_json_str(text: &str) -> Result<Self, ArtifactError> {
        let db: MaterialDb = serde_json::from_str(text).map_err(|e| ArtifactError::SchemaError(e.to_string()))?;
        for (m, props) in &db.materials {
            for (p, e) in props {
                if !(e.valid_range[0] < e.valid_range[1]) {
                    return Err(ArtifactError::SchemaError(format!("{m}.{p}: valid_range lo must be < hi")));
                }
                if !(0.0..=1.0).contains(&e.source.confidence) {
                    return Err(ArtifactError::SchemaError(format!("{m}.{p}: confidence outside [0,1]")));
                }
                parse_unit(&e.unit)?;
            }
        }
        Ok(db)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArtifactError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn entry(&self, material: &str, property: &str) -> Result<&PropertyEntry, ArtifactError> {
        let props = self.materials.get(material).ok_or_else(|| ArtifactError::UnknownMaterial(material.to_string()))?;
        props.get(property).ok_or_else(|| ArtifactError::MissingProperty {
            material: material.to_string(),
            property: property.to_string(),
        })
    }

    /// Valid range converted into `unit`.
    pub fn range_in(&self, material: &str, property: &str, unit: &str) -> Result<[f64; 2], ArtifactError> {
        let e = self.entry(material, property)?;
        let from = parse_unit(&e.unit)?;
        let to = parse_unit(unit)?;
        Ok([
            crate::units::convert(e.valid_range[0], &from, &to)?,
            crate::units::convert(e.valid_range[1], &from, &to)?,
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLayer {
    pub material_id: String,
    pub thickness: Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub layers: Vec<TaskLayer>,
    pub flux: FluxSpec,
    #[serde(default = "yes")]
    pub back_adiabatic: bool,
    pub initial_temperature: Quantity,
    #[serde(default)]
    pub duration: Option<Quantity>,
    #[serde(default)]
    pub probes: Vec<ProbeSpec>,
    #[serde(default)]
    pub n_nodes: Option<usize>,
    #[serde(default)]
    pub artifacts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_budget: Option<u64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    #[serde(rename = "type")]
    pub task_type: TaskType,
    pub regime: RegimeContext,
    pub spec: TaskSpec,
    #[serde(default)]
    pub strata: Vec<String>,
    #[serde(default)]
    pub expected: Value,
}

impl TaskInstance {
    pub fn from_json_str(text: &str) -> Result<Self, ArtifactError> {
        serde_json::from_str(text).map_err(|e| ArtifactError::SchemaError(e.to_string()))
    }
}

pub fn conversion_factor(q: &Quantity, target: &str) -> Result<Option<f64>, ArtifactError> {
    let from = parse_unit(&q.unit)?;
    let to = parse_unit(target)?;
    if from.affine || to.affine {
        return Ok((from.affine != to.affine).then_some(1.0));
    }
    let f = from.scale / to.scale;
    Ok((!crate::units::scales_equal(f, 1.0)).then_some(f))
}

/// Deterministic, db-driven stand-in for a generator: copies material data
/// verbatim and writes a complete audit skeleton.
pub fn generate_template(task: &TaskInstance, db: &MaterialDb) -> Result<ArtifactPackage, ArtifactError> {
    let mut layers = Vec::with_capacity(task.spec.layers.len());
    for tl in &task.spec.layers {
        if !db.materials.contains_key(&tl.material_id) {
            return Err(ArtifactError::UnknownMaterial(tl.material_id.clone()));
        }
        let get = |p: &str| db.entry(&tl.material_id, p).map(PropertyEntry::quantity);
        layers.push(LayerSpec {
            material_id: tl.material_id.clone(),
            thickness: tl.thickness.clone(),
            k: get("k")?,
            rho: get("rho")?,
            cp: get("cp")?,
        });
    }
    let flux = task.spec.flux.clone();
    let duration = task.spec.duration.clone().unwrap_or_else(|| flux.t_end.clone());
    let declared: Vec<String> = task
        .spec
        .artifacts
        .clone()
        .unwrap_or_else(|| DEFAULT_ARTIFACTS.iter().map(|s| s.to_string()).collect());
    let mut pkg = ArtifactPackage {
        spec: CanonicalSpec {
            task_id: task.task_id.clone(),
            task_type: task.task_type,
            regime: task.regime,
            layers,
            boundary: BoundarySpec { front: flux, back_adiabatic: task.spec.back_adiabatic },
            initial_temperature: task.spec.initial_temperature.clone(),
            duration,
            outputs: task.spec.probes.clone(),
        },
        sim: SimSettings {
            n_nodes: task.spec.n_nodes.unwrap_or(DEFAULT_NODES),
            dt_mode: DtMode::Adaptive { safety: DEFAULT_SAFETY },
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            step_budget: task.spec.step_budget.unwrap_or(DEFAULT_STEP_BUDGET),
            scheme: "explicit_euler".into(),
            tolerance: 1e-6,
            iteration_limit: 100,
            bounds_relaxation: 0.0,
        },
        declared_artifacts: declared.clone(),
        audit: AuditTrail::new(),
    };
    // Adaptive stepping is materialized as the fixed step it resolves to for
    // the generated properties; later edits to properties do not move it.
    let layers_si = pkg.layers_si()?;
    let dx = layers_si.iter().map(|l| l.thickness).sum::<f64>() / (pkg.sim.n_nodes as f64 - 1.0);
    pkg.sim.dt_mode = DtMode::Fixed { dt: DEFAULT_SAFETY * stable_dt_limit(&layers_si, dx) };

    let mut trail = AuditTrail::new();
    let names: Vec<String> = pkg.spec.layers.iter().map(|l| format!("{} {} {}", l.material_id, l.thickness.value, l.thickness.unit)).collect();
    let memo = [
        (
            MemoSection::ProblemFraming,
            format!(
                "1D transient conduction through {} layer(s) [{}], {:?} front flux peaking at {} {}, {} back wall, initial {} {}.",
                names.len(),
                names.join(", "),
                pkg.spec.boundary.front.kind,
                pkg.spec.boundary.front.q_peak.value,
                pkg.spec.boundary.front.q_peak.unit,
                if pkg.spec.boundary.back_adiabatic { "adiabatic" } else { "open" },
                pkg.spec.initial_temperature.value,
                pkg.spec.initial_temperature.unit
            ),
        ),
        (
            MemoSection::Decomposition,
            format!(
                "Explicit Euler on a uniform {}-node grid; harmonic-mean interface conductivity; stability requires Fo_i = k_i dt/(rho_i cp_i dx^2) <= 0.5 for every layer.",
                pkg.sim.n_nodes
            ),
        ),
        (MemoSection::RegimeConditions, format!("Regime {}; non-ablating, conduction-dominated.", pkg.spec.regime)),
    ];
    for (name, text) in memo {
        trail.push(EntryPayload::DesignMemoSection { name, text }).expect("memo entry valid");
    }
    for (i, tl) in task.spec.layers.iter().enumerate() {
        for p in LAYER_PROPERTIES {
            let e = db.entry(&tl.material_id, p)?;
            trail
                .push(EntryPayload::RetrievalSource {
                    field: layer_field(i, p),
                    doc_id: e.source.doc_id.clone(),
                    page: e.source.page,
                    confidence: e.source.confidence,
                    purpose: RetrievalPurpose::Generation,
                })
                .map_err(|err| ArtifactError::SchemaError(err.to_string()))?;
        }
    }
    for path in pkg.quantity_paths() {
        let q = pkg.quantity(&path).expect("listed path exists");
        let prop = path.rsplit('.').next().unwrap_or(&path);
        let target = si_unit_for(prop);
        if let Some(factor) = conversion_factor(q, target)? {
            trail
                .push(EntryPayload::UnitConversion { field: path.clone(), from: q.unit.clone(), to: target.into(), factor })
                .map_err(|err| ArtifactError::SchemaError(err.to_string()))?;
        }
    }
    trail.push(EntryPayload::ArtifactManifest { names: declared }).expect("manifest valid");
    pkg.audit = trail;
    Ok(pkg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    UnitScale,
    NegativeProperty,
    OutOfRange,
    UnstableDt,
    MissingAuditEntry,
    MissingArtifact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, target: impl Into<String>) -> Self {
        FaultSpec { kind, target: target.into(), params: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    fn f64_param(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(Value::as_f64)
    }
}

/// What the injector did; kept by the harness, never placed in the package.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub fault: FaultSpec,
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultLedger {
    pub records: Vec<FaultRecord>,
}

/// Apply one fault; returns the faulted copy and the ledger record.
pub fn inject_fault(pkg: &ArtifactPackage, fault: &FaultSpec, seed: u64) -> Result<(ArtifactPackage, FaultRecord), ArtifactError> {
    let mut out = pkg.clone();
    let detail = match fault.kind {
        FaultKind::UnitScale | FaultKind::OutOfRange => {
            let default = if fault.kind == FaultKind::OutOfRange { Some(3.0) } else { None };
            let factor = fault
                .f64_param("factor")
                .or(default)
                .ok_or_else(|| ArtifactError::BadFaultParams("unit_scale requires factor".into()))?;
            if !(factor.is_finite() && factor > 0.0) {
                return Err(ArtifactError::BadFaultParams(format!("factor {factor} must be > 0")));
            }
            let q = out.quantity_mut(&fault.target).ok_or_else(|| ArtifactError::BadTarget(fault.target.clone()))?;
            let before = q.value;
            q.value *= factor;
            if let Some(label) = fault.params.get("relabel").and_then(Value::as_str) {
                q.unit = label.to_string();
            }
            format!("{} {before} -> {} {}", fault.target, q.value, q.unit)
        }
        FaultKind::NegativeProperty => {
            let q = out.quantity_mut(&fault.target).ok_or_else(|| ArtifactError::BadTarget(fault.target.clone()))?;
            let before = q.value;
            q.value = -q.value.abs().max(f64::MIN_POSITIVE);
            format!("{} {before} -> {}", fault.target, q.value)
        }
        FaultKind::UnstableDt => {
            if fault.target != "sim.dt" {
                return Err(ArtifactError::BadTarget(fault.target.clone()));
            }
            let fo = fault.f64_param("fo").unwrap_or(2.0);
            if !(fo.is_finite() && fo > 0.5) {
                return Err(ArtifactError::BadFaultParams(format!("fo {fo} must exceed 0.5")));
            }
            let layers = out.layers_si()?;
            let dx = layers.iter().map(|l| l.thickness).sum::<f64>() / (out.sim.n_nodes as f64 - 1.0);
            let dt = fo * 2.0 * stable_dt_limit(&layers, dx);
            out.sim.dt_mode = DtMode::Fixed { dt };
            format!("sim.dt -> {dt} (Fo {fo} on stiffest layer)")
        }
        FaultKind::MissingAuditEntry => {
            if fault.target != "audit" && !fault.target.starts_with("audit.") {
                return Err(ArtifactError::BadTarget(fault.target.clone()));
            }
            let wanted = fault.target.strip_prefix("audit.");
            let candidates: Vec<usize> = out
                .audit
                .entries()
                .iter()
                .enumerate()
                .filter(|(_, e)| match (&e.payload, wanted) {
                    (EntryPayload::RetrievalSource { field, .. }, Some(w)) => field == w,
                    (EntryPayload::DesignMemoSection { name, .. }, Some(w)) => name.name() == w,
                    (EntryPayload::RetrievalSource { .. } | EntryPayload::DesignMemoSection { .. }, None) => true,
                    _ => false,
                })
                .map(|(i, _)| i)
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let &drop_idx = candidates.choose(&mut rng).ok_or_else(|| ArtifactError::BadTarget(fault.target.clone()))?;
            let kept: Vec<_> = out.audit.entries().iter().enumerate().filter(|(i, _)| *i != drop_idx).map(|(_, e)| e.clone()).collect();
            let dropped = out.audit.entries()[drop_idx].payload.key();
            out.audit = AuditTrail::from_entries(kept).expect("subsequence keeps order");
            format!("removed {dropped}")
        }
        FaultKind::MissingArtifact => {
            if fault.target != "declared_artifacts" {
                return Err(ArtifactError::BadTarget(fault.target.clone()));
            }
            let names = out.audit.manifest().map(<[String]>::to_vec).unwrap_or_default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let victim = names.choose(&mut rng).cloned().ok_or_else(|| ArtifactError::BadTarget(fault.target.clone()))?;
            let kept: Vec<_> = out
                .audit
                .entries()
                .iter()
                .map(|e| match &e.payload {
                    EntryPayload::ArtifactManifest { names } => crate::audit::ProvenanceEntry {
                        seq: e.seq,
                        payload: EntryPayload::ArtifactManifest { names: names.iter().filter(|n| **n != victim).cloned().collect() },
                    },
                    _ => e.clone(),
                })
                .collect();
            out.audit = AuditTrail::from_entries(kept).expect("same order");
            format!("dropped artifact {victim} from manifest")
        }
    };
    Ok((out, FaultRecord { fault: fault.clone(), seed, detail }))
}

/// Apply faults in order; seeds are derived per fault by index.
pub fn inject_faults(pkg: &ArtifactPackage, faults: &[FaultSpec], seed: u64) -> Result<(ArtifactPackage, FaultLedger), ArtifactError> {
    let mut cur = pkg.clone();
    let mut ledger = FaultLedger::default();
    for (i, f) in faults.iter().enumerate() {
        let (next, rec) = inject_fault(&cur, f, crate::rng::derive_seed(seed, i as u64))?;
        cur = next;
        ledger.records.push(rec);
    }
    Ok((cur, ledger))
}

/// Run an external generator: task JSON on stdin, one package JSON on stdout.
pub fn external_generate(command: &[String], task: &TaskInstance, timeout: Duration) -> Result<ArtifactPackage, ArtifactError> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| ArtifactError::GeneratorProtocolError("empty command".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()?;
    let mut line = serde_json::to_string(task).expect("task serializes");
    line.push('\n');
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || {
        let _ = stdin.write_all(line.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let res = (&mut stdout).take(OUTPUT_CAP_BYTES as u64 + 1).read_to_end(&mut buf);
        res.map(|_| buf)
    });
    let status = match child.wait_timeout(timeout)? {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(ArtifactError::GeneratorTimeout(timeout));
        }
    };
    let _ = writer.join();
    let buf = reader
        .join()
        .map_err(|_| ArtifactError::GeneratorProtocolError("reader thread panicked".into()))??;
    if buf.len() > OUTPUT_CAP_BYTES {
        return Err(ArtifactError::GeneratorProtocolError("output exceeds 4 MiB cap".into()));
    }
    if !status.success() {
        return Err(ArtifactError::GeneratorProtocolError(format!("generator exited with {status}")));
    }
    let text = String::from_utf8(buf).map_err(|_| ArtifactError::GeneratorProtocolError("output is not UTF-8".into()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != 1 {
        return Err(ArtifactError::GeneratorProtocolError(format!("expected one JSON line, got {}", lines.len())));
    }
    let value: Value =
        serde_json::from_str(lines[0]).map_err(|e| ArtifactError::GeneratorProtocolError(format!("malformed JSON: {e}")))?;
    let pkg: ArtifactPackage = serde_json::from_value(value).map_err(|e| ArtifactError::SchemaError(e.to_string()))?;
    pkg.validate()?;
    Ok(pkg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn case() -> ArtifactPackage {
        generate_template(&fixtures::case_task(), &fixtures::case_materials()).unwrap()
    }

    #[test]
    fn case_grid_spacing() {
        let cfg = case().sim_config().unwrap();
        // 35 mm over 300 nodes
        assert!((cfg.dx() * 1e3 - 0.117).abs() < 0.001, "{}", cfg.dx());
        assert!((cfg.fourier_numbers()[0] - 0.43).abs() < 1e-9);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(case().to_json(), case().to_json());
    }

    #[test]
    fn unknown_material_rejected() {
        let mut t = fixtures::case_task();
        t.spec.layers[0].material_id = "Unobtainium".into();
        assert!(matches!(generate_template(&t, &fixtures::case_materials()), Err(ArtifactError::UnknownMaterial(m)) if m == "Unobtainium"));
    }

    #[test]
    fn unit_scale_fault_on_case_conductivity() {
        let pkg = case();
        let (faulty, rec) = inject_fault(&pkg, &FaultSpec::new(FaultKind::UnitScale, "layers[0].k").with("factor", 100.0), 7).unwrap();
        assert_eq!(faulty.spec.layers[0].k, Quantity::new(2150.0, "W/(m·K)"));
        assert_eq!(pkg.spec.layers[0].k.value, 21.5);
        assert!(rec.detail.contains("2150"));
        assert_eq!(faulty.audit, pkg.audit);
    }

    #[test]
    fn unstable_dt_exceeds_limit() {
        let pkg = case();
        let (faulty, _) = inject_fault(&pkg, &FaultSpec::new(FaultKind::UnstableDt, "sim.dt").with("fo", 0.8), 1).unwrap();
        let cfg = faulty.sim_config().unwrap();
        let limit = stable_dt_limit(&cfg.layers, cfg.dx());
        assert!((limit - 5.8e-4).abs() < 0.1e-4, "{limit}");
        assert!(cfg.effective_dt() > limit);
    }

    #[test]
    fn bad_target_rejected() {
        let r = inject_fault(&case(), &FaultSpec::new(FaultKind::UnitScale, "layers[9].k").with("factor", 2.0), 0);
        assert!(matches!(r, Err(ArtifactError::BadTarget(_))));
    }

    #[test]
    fn empty_fault_list_is_identity() {
        let pkg = case();
        let (same, ledger) = inject_faults(&pkg, &[], 3).unwrap();
        assert_eq!(same, pkg);
        assert!(ledger.records.is_empty());
    }

    #[test]
    fn disjoint_faults_commute() {
        let pkg = case();
        let a = FaultSpec::new(FaultKind::UnitScale, "layers[0].k").with("factor", 100.0);
        let b = FaultSpec::new(FaultKind::NegativeProperty, "layers[1].cp");
        let ab = inject_fault(&inject_fault(&pkg, &a, 1).unwrap().0, &b, 2).unwrap().0;
        let ba = inject_fault(&inject_fault(&pkg, &b, 2).unwrap().0, &a, 1).unwrap().0;
        assert_eq!(ab, ba);
    }

    #[test]
    fn flux_in_kilowatts_logs_conversion() {
        let pkg = case();
        assert!(pkg.audit.has(&crate::audit::EntryKey::conversion("boundary.front.q_peak")));
        assert_eq!(pkg.flux_profile().unwrap().q_peak, 8e5);
    }
}
