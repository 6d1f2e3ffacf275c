//! Shipped fixture data: the two-layer case study, the default 23-node
//! catalog and graph, and audit policy templates.
//!
//! Files are embedded at build time. Setting `CCLG_FIXTURES` to a directory
//! makes the loaders read same-named files from there instead.

use std::path::PathBuf;

use crate::artifact::{ArtifactError, MaterialDb, TaskInstance};
use crate::assets::{AssetCatalog, AssetError};
use crate::audit::{AuditError, PolicyTemplate};

pub const CASE_TASK: &str = "case_task.json";
pub const CASE_MATERIALS: &str = "case_materials.json";
pub const CASE_CATALOG: &str = "case_catalog.json";
pub const BENCH_MATERIALS: &str = "bench_materials.json";
pub const DEFAULT_CATALOG: &str = "default_catalog.json";
pub const DEFAULT_CDG: &str = "default_cdg.json";
pub const POLICY_T3: &str = "policy_t3.json";
pub const POLICY_T4: &str = "policy_t4.json";

const EMBEDDED: &[(&str, &str)] = &[
    (CASE_TASK, include_str!("../fixtures/case_task.json")),
    (CASE_MATERIALS, include_str!("../fixtures/case_materials.json")),
    (CASE_CATALOG, include_str!("../fixtures/case_catalog.json")),
    (BENCH_MATERIALS, include_str!("../fixtures/bench_materials.json")),
    (DEFAULT_CATALOG, include_str!("../fixtures/default_catalog.json")),
    (DEFAULT_CDG, include_str!("../fixtures/default_cdg.json")),
    (POLICY_T3, include_str!("../fixtures/policy_t3.json")),
    (POLICY_T4, include_str!("../fixtures/policy_t4.json")),
];

/// Raw text of a fixture file, honouring the `CCLG_FIXTURES` override.
pub fn text(name: &str) -> std::io::Result<String> {
    if let Some(dir) = std::env::var_os("CCLG_FIXTURES") {
        return std::fs::read_to_string(PathBuf::from(dir).join(name));
    }
    EMBEDDED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t.to_string())
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, name.to_string()))
}

pub fn load_task(name: &str) -> Result<TaskInstance, ArtifactError> {
    let raw = text(name)?;
    serde_json::from_str(&raw).map_err(|e| ArtifactError::SchemaError(e.to_string()))
}

pub fn load_materials(name: &str) -> Result<MaterialDb, ArtifactError> {
    MaterialDb::from_json_str(&text(name)?)
}

pub fn load_catalog(name: &str) -> Result<AssetCatalog, AssetError> {
    let raw = text(name).map_err(|source| AssetError::Io { path: name.to_string(), source })?;
    AssetCatalog::from_json_str(&raw)
}

pub fn load_policy(name: &str) -> Result<PolicyTemplate, AuditError> {
    let raw = text(name).map_err(|e| AuditError::SchemaError { kind: "policy".into(), reason: e.to_string() })?;
    PolicyTemplate::from_json_str(&raw)
}

// Panicking conveniences for tests and the case-study driver. The embedded
// copies are validated by this module's own tests.

pub fn case_task() -> TaskInstance {
    load_task(CASE_TASK).expect("case task fixture")
}

pub fn case_materials() -> MaterialDb {
    load_materials(CASE_MATERIALS).expect("case materials fixture")
}

pub fn case_catalog() -> AssetCatalog {
    load_catalog(CASE_CATALOG).expect("case catalog fixture")
}

pub fn bench_materials() -> MaterialDb {
    load_materials(BENCH_MATERIALS).expect("bench materials fixture")
}

pub fn default_catalog() -> AssetCatalog {
    load_catalog(DEFAULT_CATALOG).expect("default catalog fixture")
}

pub fn policy_t3() -> PolicyTemplate {
    load_policy(POLICY_T3).expect("T3 policy fixture")
}
