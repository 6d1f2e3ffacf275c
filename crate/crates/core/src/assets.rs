//! Constraint assets: executable constraint definitions loaded from JSON and
//! indexed by category, CDG node and id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("schema error at {field}: {reason}")]
    SchemaError { field: String, reason: String },
    #[error("duplicate asset id {0}")]
    DuplicateId(String),
    #[error("asset {asset} references unknown CDG node {node}")]
    UnknownNode { asset: String, node: String },
    #[error("io error reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn schema(field: impl Into<String>, reason: impl Into<String>) -> AssetError {
    AssetError::SchemaError { field: field.into(), reason: reason.into() }
}

/// Constraint category; also the CDG tier (unit=0 .. audit=4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Unit,
    #[serde(alias = "physics")]
    Physical,
    Numerical,
    Execution,
    Audit,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Unit, Category::Physical, Category::Numerical, Category::Execution, Category::Audit];

    pub fn tier(self) -> u8 {
        self as u8
    }

    pub fn gate(self) -> Gate {
        Gate::ALL[self as usize]
    }
}

/// The five verification gates in lifecycle order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Unit,
    #[serde(alias = "physical")]
    Physics,
    Numerical,
    Execution,
    Audit,
}

impl Gate {
    pub const ALL: [Gate; 5] = [Gate::Unit, Gate::Physics, Gate::Numerical, Gate::Execution, Gate::Audit];

    pub fn category(self) -> Category {
        Category::ALL[self as usize]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Gate::Unit => "unit",
            Gate::Physics => "physics",
            Gate::Numerical => "numerical",
            Gate::Execution => "execution",
            Gate::Audit => "audit",
        }
    }

    pub fn parse(s: &str) -> Option<Gate> {
        match s {
            "unit" => Some(Gate::Unit),
            "physics" | "physical" => Some(Gate::Physics),
            "numerical" => Some(Gate::Numerical),
            "execution" => Some(Gate::Execution),
            "audit" => Some(Gate::Audit),
            _ => None,
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Severity {
    Minor = 1,
    Major = 2,
    Critical = 3,
}

impl Severity {
    pub fn weight(self) -> u8 {
        self as u8
    }

    pub fn from_level(level: i64) -> Option<Severity> {
        match level {
            1 => Some(Severity::Minor),
            2 => Some(Severity::Major),
            3 => Some(Severity::Critical),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Severity::Minor => "minor",
            Severity::Major => "major",
            Severity::Critical => "critical",
        }
    }
}

impl Serialize for Severity {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Severity {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        let parsed = match &v {
            Value::String(s) => match s.as_str() {
                "minor" => Some(Severity::Minor),
                "major" => Some(Severity::Major),
                "critical" => Some(Severity::Critical),
                _ => None,
            },
            Value::Number(n) => n.as_i64().and_then(Severity::from_level),
            _ => None,
        };
        parsed.ok_or_else(|| serde::de::Error::custom(format!("invalid severity {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeContext {
    NominalReentry,
    ModerateAblation,
    HighHeatFlux,
    #[serde(alias = "extreme_thermal_chemical")]
    ExtremeThermochemical,
}

impl RegimeContext {
    pub const ALL: [RegimeContext; 4] = [
        RegimeContext::NominalReentry,
        RegimeContext::ModerateAblation,
        RegimeContext::HighHeatFlux,
        RegimeContext::ExtremeThermochemical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeContext::NominalReentry => "nominal_reentry",
            RegimeContext::ModerateAblation => "moderate_ablation",
            RegimeContext::HighHeatFlux => "high_heat_flux",
            RegimeContext::ExtremeThermochemical => "extreme_thermochemical",
        }
    }

    pub fn parse(s: &str) -> Option<RegimeContext> {
        RegimeContext::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl fmt::Display for RegimeContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Either the literal `"any"` or an explicit set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope<T: Ord> {
    Any,
    Only(BTreeSet<T>),
}

impl<T: Ord> Scope<T> {
    pub fn admits(&self, item: &T) -> bool {
        match self {
            Scope::Any => true,
            Scope::Only(set) => set.contains(item),
        }
    }

    pub fn intersects<'a>(&self, mut items: impl Iterator<Item = &'a T>) -> bool
    where
        T: 'a,
    {
        match self {
            Scope::Any => true,
            Scope::Only(set) => items.any(|i| set.contains(i)),
        }
    }
}

impl<T: Ord + Serialize> Serialize for Scope<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Scope::Any => s.serialize_str("any"),
            Scope::Only(set) => set.serialize(s),
        }
    }
}

impl<'de, T: Ord + Deserialize<'de>> Deserialize<'de> for Scope<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T: Ord> {
            Word(String),
            Set(BTreeSet<T>),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Word(w) if w == "any" => Ok(Scope::Any),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected \"any\" or a list, got {w:?}"))),
            Raw::Set(s) => Ok(Scope::Only(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Applicability {
    pub regimes: Scope<RegimeContext>,
    pub materials: Scope<String>,
}

/// A validator or repair binding: a registered kind plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSpec {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl KindSpec {
    pub fn param_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(Value::as_str)
    }

    pub fn param_f64(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(Value::as_f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub doc_id: String,
    pub page: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAsset {
    pub id: String,
    pub category: Category,
    pub node_id: String,
    pub severity: Severity,
    pub applicability: Applicability,
    pub validator: KindSpec,
    pub repair: KindSpec,
    pub source: SourceRef,
}

pub const VALIDATOR_KINDS: &[(&str, Category)] = &[
    ("unit_property", Category::Unit),
    ("unit_flux", Category::Unit),
    ("unit_temperature", Category::Unit),
    ("unit_length", Category::Unit),
    ("positivity", Category::Physical),
    ("property_bounds", Category::Physical),
    ("regime_flux_limit", Category::Physical),
    ("fourier_stability", Category::Numerical),
    ("grid_resolution", Category::Numerical),
    ("time_horizon", Category::Numerical),
    ("probe_validity", Category::Numerical),
    ("runs_to_completion", Category::Execution),
    ("bounded_response", Category::Execution),
    ("outputs_present", Category::Execution),
    ("step_budget", Category::Execution),
    ("audit_policy", Category::Audit),
];

pub const REPAIR_KINDS: &[&str] = &[
    "unit_rescale",
    "clamp_or_lookup",
    "set_stable_dt",
    "add_audit_entry",
    "add_artifact",
    "reduce_dt_factor",
    "halve_dx",
    "switch_scheme_flag",
    "relax_bounds",
    "reduce_flux",
    "tighten_tolerance",
    "raise_iteration_limit",
    "extend_time_horizon",
    "clip_probes",
];

pub fn validator_category(kind: &str) -> Option<Category> {
    VALIDATOR_KINDS.iter().find(|(k, _)| *k == kind).map(|(_, c)| *c)
}

pub fn is_repair_kind(kind: &str) -> bool {
    REPAIR_KINDS.contains(&kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CatalogFile {
    version: u32,
    assets: Vec<ConstraintAsset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssetCatalog {
    assets: Vec<ConstraintAsset>,
    by_id: BTreeMap<String, usize>,
    by_node: BTreeMap<String, Vec<usize>>,
    by_category: BTreeMap<Category, Vec<usize>>,
}

const REQUIRED_ASSET_FIELDS: &[&str] =
    &["id", "category", "node_id", "severity", "applicability", "validator", "repair", "source"];

impl AssetCatalog {
    pub fn new(assets: Vec<ConstraintAsset>) -> Result<Self, AssetError> {
        let mut by_id = BTreeMap::new();
        let mut by_node: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_category: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
        for (i, a) in assets.iter().enumerate() {
            validate_asset(a, i)?;
            if by_id.insert(a.id.clone(), i).is_some() {
                return Err(AssetError::DuplicateId(a.id.clone()));
            }
            by_node.entry(a.node_id.clone()).or_default().push(i);
            by_category.entry(a.category).or_default().push(i);
        }
        Ok(AssetCatalog { assets, by_id, by_node, by_category })
    }

    pub fn assets(&self) -> &[ConstraintAsset] {
        &self.assets
    }

    pub fn len(&self) -> usize {
        self.assets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assets.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ConstraintAsset> {
        self.by_id.get(id).map(|&i| &self.assets[i])
    }

    pub fn for_node(&self, node: &str) -> impl Iterator<Item = &ConstraintAsset> {
        self.by_node.get(node).into_iter().flatten().map(|&i| &self.assets[i])
    }

    pub fn in_category(&self, c: Category) -> impl Iterator<Item = &ConstraintAsset> {
        self.by_category.get(&c).into_iter().flatten().map(|&i| &self.assets[i])
    }

    pub fn counts_by_category(&self) -> BTreeMap<Category, usize> {
        self.by_category.iter().map(|(c, v)| (*c, v.len())).collect()
    }

    /// Every referenced node must exist in `nodes`.
    pub fn check_nodes<'a>(&self, nodes: impl IntoIterator<Item = &'a str>) -> Result<(), AssetError> {
        let known: BTreeSet<&str> = nodes.into_iter().collect();
        for a in &self.assets {
            if !known.contains(a.node_id.as_str()) {
                return Err(AssetError::UnknownNode { asset: a.id.clone(), node: a.node_id.clone() });
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, AssetError> {
        let root: Value = serde_json::from_str(text).map_err(|e| schema("$", e.to_string()))?;
        let obj = root.as_object().ok_or_else(|| schema("$", "expected object"))?;
        match obj.get("version").and_then(Value::as_u64) {
            Some(1) => {}
            Some(v) => return Err(schema("version", format!("unsupported version {v}"))),
            None => return Err(schema("version", "required")),
        }
        let raw = obj
            .get("assets")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("assets", "required"))?;
        let mut assets = Vec::with_capacity(raw.len());
        for (i, item) in raw.iter().enumerate() {
            let o = item.as_object().ok_or_else(|| schema(format!("assets[{i}]"), "expected object"))?;
            for f in REQUIRED_ASSET_FIELDS {
                if !o.contains_key(*f) {
                    return Err(schema(*f, "required"));
                }
            }
            for f in REQUIRED_ASSET_FIELDS {
                // field-level decode errors name the offending field
                decode_field(f, &o[*f])?;
            }
            let asset: ConstraintAsset =
                serde_json::from_value(item.clone()).map_err(|e| schema(format!("assets[{i}]"), e.to_string()))?;
            assets.push(asset);
        }
        AssetCatalog::new(assets)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AssetError> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p)
            .map_err(|source| AssetError::Io { path: p.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// Canonical JSON: sorted keys, shortest round-trip floats.
    pub fn to_canonical_json(&self) -> String {
        let file = CatalogFile { version: 1, assets: self.assets.clone() };
        let v = serde_json::to_value(&file).expect("catalog serializes");
        serde_json::to_string_pretty(&v).expect("value serializes")
    }

    /// Assets applicable to a regime and material set, in catalog order.
    pub fn applicable_assets(&self, regime: RegimeContext, materials: &BTreeSet<String>) -> Vec<&ConstraintAsset> {
        self.assets
            .iter()
            .filter(|a| a.applicability.regimes.admits(&regime) && a.applicability.materials.intersects(materials.iter()))
            .collect()
    }
}

fn decode_field(field: &str, v: &Value) -> Result<(), AssetError> {
    let res = match field {
        "id" | "node_id" => serde_json::from_value::<String>(v.clone()).map(drop),
        "category" => serde_json::from_value::<Category>(v.clone()).map(drop),
        "severity" => serde_json::from_value::<Severity>(v.clone()).map(drop),
        "applicability" => serde_json::from_value::<Applicability>(v.clone()).map(drop),
        "validator" | "repair" => serde_json::from_value::<KindSpec>(v.clone()).map(drop),
        "source" => serde_json::from_value::<SourceRef>(v.clone()).map(drop),
        _ => Ok(()),
    };
    res.map_err(|e| schema(field, e.to_string()))
}

fn validate_asset(a: &ConstraintAsset, i: usize) -> Result<(), AssetError> {
    if a.id.is_empty() {
        return Err(schema(format!("assets[{i}].id"), "must be nonempty"));
    }
    if !(0.0..=1.0).contains(&a.source.confidence) {
        return Err(schema("source.confidence", "must lie in [0,1]"));
    }
    match validator_category(&a.validator.kind) {
        None => return Err(schema("validator.kind", format!("unregistered kind {:?}", a.validator.kind))),
        Some(c) if c != a.category => {
            return Err(schema(
                "validator.kind",
                format!("kind {:?} belongs to category {c:?}, asset is {:?}", a.validator.kind, a.category),
            ))
        }
        Some(_) => {}
    }
    if !is_repair_kind(&a.repair.kind) {
        return Err(schema("repair.kind", format!("unregistered kind {:?}", a.repair.kind)));
    }
    Ok(())
}

pub fn applicable_assets<'a>(
    catalog: &'a AssetCatalog,
    regime: RegimeContext,
    materials: &BTreeSet<String>,
) -> Vec<&'a ConstraintAsset> {
    catalog.applicable_assets(regime, materials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal(id: &str, regimes: Value) -> Value {
        json!({
            "id": id,
            "category": "unit",
            "node_id": "u_k",
            "severity": "critical",
            "applicability": {"regimes": regimes, "materials": "any"},
            "validator": {"kind": "unit_property", "params": {"property": "k", "expected_unit": "W/(m·K)"}},
            "repair": {"kind": "unit_rescale", "params": {}},
            "source": {"doc_id": "STD-1", "page": 1, "confidence": 0.9}
        })
    }

    fn catalog_of(items: Vec<Value>) -> Result<AssetCatalog, AssetError> {
        AssetCatalog::from_json_str(&json!({"version": 1, "assets": items}).to_string())
    }

    #[test]
    fn loads_single_minimal_asset() {
        let c = catalog_of(vec![minimal("a1", json!("any"))]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.get("a1").unwrap().severity, Severity::Critical);
    }

    #[test]
    fn missing_severity_is_schema_error() {
        let mut a = minimal("a1", json!("any"));
        a.as_object_mut().unwrap().remove("severity");
        match catalog_of(vec![a]) {
            Err(AssetError::SchemaError { field, reason }) => {
                assert_eq!(field, "severity");
                assert_eq!(reason, "required");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = catalog_of(vec![minimal("a1", json!("any")), minimal("a1", json!("any"))]);
        assert!(matches!(r, Err(AssetError::DuplicateId(id)) if id == "a1"));
    }

    #[test]
    fn severity_accepts_levels_and_names() {
        let mut a = minimal("a1", json!("any"));
        a["severity"] = json!(2);
        assert_eq!(catalog_of(vec![a]).unwrap().get("a1").unwrap().severity, Severity::Major);
        let mut b = minimal("a1", json!("any"));
        b["severity"] = json!(4);
        assert!(matches!(catalog_of(vec![b]), Err(AssetError::SchemaError { field, .. }) if field == "severity"));
    }

    #[test]
    fn unregistered_kinds_rejected_at_load() {
        let mut a = minimal("a1", json!("any"));
        a["validator"]["kind"] = json!("magic");
        assert!(matches!(catalog_of(vec![a]), Err(AssetError::SchemaError { field, .. }) if field == "validator.kind"));
        let mut b = minimal("a1", json!("any"));
        b["repair"]["kind"] = json!("pray");
        assert!(matches!(catalog_of(vec![b]), Err(AssetError::SchemaError { field, .. }) if field == "repair.kind"));
    }

    #[test]
    fn confidence_out_of_range_rejected() {
        let mut a = minimal("a1", json!("any"));
        a["source"]["confidence"] = json!(1.5);
        assert!(catalog_of(vec![a]).is_err());
    }

    #[test]
    fn regime_scope_filters() {
        let c = catalog_of(vec![minimal("any", json!("any")), minimal("hot", json!(["high_heat_flux"]))]).unwrap();
        let mats: BTreeSet<String> = ["C-Phen".to_string()].into();
        let nominal: Vec<_> = c.applicable_assets(RegimeContext::NominalReentry, &mats).iter().map(|a| a.id.clone()).collect();
        assert_eq!(nominal, vec!["any"]);
        let hot = c.applicable_assets(RegimeContext::HighHeatFlux, &mats);
        assert_eq!(hot.len(), 2);
    }

    #[test]
    fn material_scope_requires_intersection() {
        let mut a = minimal("scoped", json!("any"));
        a["applicability"]["materials"] = json!(["PICA"]);
        let c = catalog_of(vec![a]).unwrap();
        let mats: BTreeSet<String> = ["C-Phen".to_string()].into();
        assert!(c.applicable_assets(RegimeContext::NominalReentry, &mats).is_empty());
        let mats: BTreeSet<String> = ["PICA".to_string(), "C-Phen".to_string()].into();
        assert_eq!(c.applicable_assets(RegimeContext::NominalReentry, &mats).len(), 1);
    }
}
