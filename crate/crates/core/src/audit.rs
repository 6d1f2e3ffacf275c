//! Provenance trail, required-entry policies and the audit completeness score.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::Gate;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AuditError {
    #[error("required-entry policy is empty")]
    EmptyPolicy,
    #[error("schema error in {kind} entry: {reason}")]
    SchemaError { kind: &'static str, reason: String },
    #[error("malformed policy: {0}")]
    BadPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoSection {
    ProblemFraming,
    Decomposition,
    RegimeConditions,
}

impl MemoSection {
    pub const ALL: [MemoSection; 3] =
        [MemoSection::ProblemFraming, MemoSection::Decomposition, MemoSection::RegimeConditions];

    pub fn name(self) -> &'static str {
        match self {
            MemoSection::ProblemFraming => "problem_framing",
            MemoSection::Decomposition => "decomposition",
            MemoSection::RegimeConditions => "regime_conditions",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalPurpose {
    Generation,
    Repair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EntryPayload {
    RetrievalSource {
        field: String,
        doc_id: String,
        page: u32,
        confidence: f64,
        purpose: RetrievalPurpose,
    },
    UnitConversion {
        field: String,
        from: String,
        to: String,
        factor: f64,
    },
    ValidationOutcome {
        gate: Gate,
        passed: bool,
        iteration: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
    },
    DesignMemoSection {
        name: MemoSection,
        text: String,
    },
    ArtifactManifest {
        names: Vec<String>,
    },
}

impl EntryPayload {
    pub fn kind_name(&self) -> &'static str {
        match self {
            EntryPayload::RetrievalSource { .. } => "retrieval_source",
            EntryPayload::UnitConversion { .. } => "unit_conversion",
            EntryPayload::ValidationOutcome { .. } => "validation_outcome",
            EntryPayload::DesignMemoSection { .. } => "design_memo_section",
            EntryPayload::ArtifactManifest { .. } => "artifact_manifest",
        }
    }

    pub fn key(&self) -> EntryKey {
        match self {
            EntryPayload::RetrievalSource { field, purpose, .. } => match purpose {
                RetrievalPurpose::Generation => EntryKey::retrieval(field),
                RetrievalPurpose::Repair => EntryKey::repair_retrieval(field),
            },
            EntryPayload::UnitConversion { field, .. } => EntryKey::conversion(field),
            EntryPayload::ValidationOutcome { gate, iteration, .. } => EntryKey::validation(*gate, *iteration),
            EntryPayload::DesignMemoSection { name, .. } => EntryKey::memo(*name),
            EntryPayload::ArtifactManifest { .. } => EntryKey::manifest(),
        }
    }

    fn validate(&self) -> Result<(), AuditError> {
        let bad = |reason: &str| Err(AuditError::SchemaError { kind: self.kind_name(), reason: reason.to_string() });
        match self {
            EntryPayload::RetrievalSource { field, doc_id, confidence, .. } => {
                if field.is_empty() || doc_id.is_empty() {
                    return bad("field and doc_id must be nonempty");
                }
                if !(0.0..=1.0).contains(confidence) {
                    return bad("confidence must lie in [0,1]");
                }
            }
            EntryPayload::UnitConversion { field, from, to, factor } => {
                if field.is_empty() || from.is_empty() || to.is_empty() {
                    return bad("field, from and to must be nonempty");
                }
                if !(factor.is_finite() && *factor > 0.0) {
                    return bad("factor must be finite and positive");
                }
            }
            EntryPayload::ValidationOutcome { .. } => {}
            EntryPayload::DesignMemoSection { text, .. } => {
                if text.trim().is_empty() {
                    return bad("memo text must be nonempty");
                }
            }
            EntryPayload::ArtifactManifest { names } => {
                if names.iter().any(|n| n.is_empty()) {
                    return bad("artifact names must be nonempty");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: EntryPayload,
}

/// `(kind, discriminator)`; the unit of the completeness score.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryKey {
    pub kind: String,
    pub discriminator: String,
}

impl EntryKey {
    fn new(kind: &str, discriminator: impl Into<String>) -> Self {
        EntryKey { kind: kind.to_string(), discriminator: discriminator.into() }
    }

    pub fn retrieval(field: &str) -> Self {
        Self::new("retrieval_source", field)
    }

    pub fn repair_retrieval(field: &str) -> Self {
        Self::new("retrieval_source", format!("{field}#repair"))
    }

    pub fn conversion(field: &str) -> Self {
        Self::new("unit_conversion", field)
    }

    pub fn validation(gate: Gate, iteration: u32) -> Self {
        Self::new("validation_outcome", format!("{}@{iteration}", gate.name()))
    }

    pub fn memo(name: MemoSection) -> Self {
        Self::new("design_memo_section", name.name())
    }

    pub fn manifest() -> Self {
        Self::new("artifact_manifest", "manifest")
    }
}

impl fmt::Display for EntryKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.discriminator)
    }
}

/// Append-only list of provenance entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AuditTrail {
    entries: Vec<ProvenanceEntry>,
}

impl AuditTrail {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ProvenanceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn next_seq(&self) -> u64 {
        self.entries.last().map_or(0, |e| e.seq + 1)
    }

    /// A new trail with `payload` appended; `self` is left untouched.
    pub fn append(&self, payload: EntryPayload) -> Result<AuditTrail, AuditError> {
        let mut out = self.clone();
        out.push(payload)?;
        Ok(out)
    }

    /// In-place append for single-writer owners.
    pub fn push(&mut self, payload: EntryPayload) -> Result<u64, AuditError> {
        payload.validate()?;
        let seq = self.next_seq();
        self.entries.push(ProvenanceEntry { seq, payload });
        Ok(seq)
    }

    /// Rebuild a trail from entries, checking schema and strictly increasing
    /// sequence numbers.
    pub fn from_entries(entries: Vec<ProvenanceEntry>) -> Result<AuditTrail, AuditError> {
        for (i, e) in entries.iter().enumerate() {
            e.payload.validate()?;
            if i > 0 && e.seq <= entries[i - 1].seq {
                return Err(AuditError::SchemaError {
                    kind: e.payload.kind_name(),
                    reason: format!("sequence number {} not increasing", e.seq),
                });
            }
        }
        Ok(AuditTrail { entries })
    }

    pub fn keys(&self) -> BTreeSet<EntryKey> {
        self.entries.iter().map(|e| e.payload.key()).collect()
    }

    pub fn has(&self, key: &EntryKey) -> bool {
        self.entries.iter().any(|e| &e.payload.key() == key)
    }

    pub fn manifest(&self) -> Option<&[String]> {
        self.entries.iter().rev().find_map(|e| match &e.payload {
            EntryPayload::ArtifactManifest { names } => Some(names.as_slice()),
            _ => None,
        })
    }

    /// Highest validation pass index recorded, if any.
    pub fn last_validation_pass(&self) -> Option<u32> {
        self.entries
            .iter()
            .filter_map(|e| match e.payload {
                EntryPayload::ValidationOutcome { iteration, .. } => Some(iteration),
                _ => None,
            })
            .max()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<AuditTrail, AuditError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ProvenanceEntry = serde_json::from_str(line).map_err(|err| AuditError::SchemaError {
                kind: "entry",
                reason: format!("line {}: {err}", n + 1),
            })?;
            entries.push(e);
        }
        AuditTrail::from_entries(entries)
    }
}

/// A concrete set of required keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredEntryPolicy {
    pub keys: BTreeSet<EntryKey>,
}

/// Task-type policy file; instantiated against the facts of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTemplate {
    pub version: u32,
    pub task_type: String,
    pub retrieval_per_property: bool,
    pub conversion_per_applied_conversion: bool,
    pub repair_retrieval_per_physics_flag: bool,
    pub validation_per_gate_per_pass: bool,
    pub memo_sections: Vec<MemoSection>,
    pub artifact_manifest: bool,
}

/// Facts about a run that a template needs to enumerate keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyContext {
    pub property_fields: Vec<String>,
    /// Fields whose value needed a unit conversion (at generation or repair).
    pub converted_fields: BTreeSet<String>,
    /// Fields flagged by the physics gate at any pass.
    pub physics_flagged: BTreeSet<String>,
    /// Number of validation passes that were run.
    pub passes: u32,
}

impl PolicyTemplate {
    pub fn from_json_str(text: &str) -> Result<Self, AuditError> {
        let t: PolicyTemplate = serde_json::from_str(text).map_err(|e| AuditError::BadPolicy(e.to_string()))?;
        if t.version != 1 {
            return Err(AuditError::BadPolicy(format!("unsupported version {}", t.version)));
        }
        Ok(t)
    }

    pub fn instantiate(&self, ctx: &PolicyContext) -> RequiredEntryPolicy {
        let mut keys = BTreeSet::new();
        if self.retrieval_per_property {
            keys.extend(ctx.property_fields.iter().map(|f| EntryKey::retrieval(f)));
        }
        if self.conversion_per_applied_conversion {
            keys.extend(ctx.converted_fields.iter().map(|f| EntryKey::conversion(f)));
        }
        if self.repair_retrieval_per_physics_flag {
            keys.extend(ctx.physics_flagged.iter().map(|f| EntryKey::repair_retrieval(f)));
        }
        if self.validation_per_gate_per_pass {
            for pass in 0..ctx.passes {
                keys.extend(Gate::ALL.iter().map(|g| EntryKey::validation(*g, pass)));
            }
        }
        keys.extend(self.memo_sections.iter().map(|m| EntryKey::memo(*m)));
        if self.artifact_manifest {
            keys.insert(EntryKey::manifest());
        }
        RequiredEntryPolicy { keys }
    }
}

/// Audit completeness: present required keys over required keys.
pub fn acs(trail: &AuditTrail, policy: &RequiredEntryPolicy) -> Result<f64, AuditError> {
    if policy.keys.is_empty() {
        return Err(AuditError::EmptyPolicy);
    }
    let present = trail.keys();
    let hit = policy.keys.iter().filter(|k| present.contains(*k)).count();
    Ok(hit as f64 / policy.keys.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(field: &str) -> EntryPayload {
        EntryPayload::UnitConversion { field: field.into(), from: "1e-2 W/(m·K)".into(), to: "W/(m·K)".into(), factor: 0.01 }
    }

    #[test]
    fn append_numbers_from_zero_and_leaves_original() {
        let t0 = AuditTrail::new();
        let t1 = t0.append(conv("a")).unwrap();
        let t2 = t1.append(conv("b")).unwrap();
        assert!(t0.is_empty());
        assert_eq!(t1.len(), 1);
        assert_eq!(t1.entries()[0].seq, 0);
        assert_eq!(t2.entries().iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(
            serde_json::to_string(&t1.entries()[0]).unwrap(),
            serde_json::to_string(&t2.entries()[0]).unwrap()
        );
    }

    #[test]
    fn bad_payload_rejected() {
        let bad = EntryPayload::RetrievalSource {
            field: "x".into(),
            doc_id: "D".into(),
            page: 1,
            confidence: 2.0,
            purpose: RetrievalPurpose::Generation,
        };
        assert!(matches!(AuditTrail::new().append(bad), Err(AuditError::SchemaError { .. })));
    }

    #[test]
    fn acs_ratio_and_empty() {
        let keys: BTreeSet<EntryKey> = (0..18).map(|i| EntryKey::conversion(&format!("f{i}"))).collect();
        let policy = RequiredEntryPolicy { keys };
        let mut t = AuditTrail::new();
        assert_eq!(acs(&t, &policy).unwrap(), 0.0);
        for i in 0..11 {
            t.push(conv(&format!("f{i}"))).unwrap();
        }
        assert!((acs(&t, &policy).unwrap() - 11.0 / 18.0).abs() < 1e-12);
        assert!((acs(&t, &policy).unwrap() - 0.611).abs() < 1e-3);
        let empty = RequiredEntryPolicy { keys: BTreeSet::new() };
        assert_eq!(acs(&t, &empty), Err(AuditError::EmptyPolicy));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = AuditTrail::new();
        t.push(conv("layers[0].k")).unwrap();
        t.push(EntryPayload::ValidationOutcome { gate: Gate::Numerical, passed: true, iteration: 1, note: Some("Fo=0.43".into()) })
            .unwrap();
        t.push(EntryPayload::ArtifactManifest { names: vec!["a.csv".into()] }).unwrap();
        let back = AuditTrail::from_jsonl(&t.to_jsonl()).unwrap();
        assert_eq!(back, t);
        assert!(t.to_jsonl().contains("\"kind\":\"unit_conversion\""));
    }

    #[test]
    fn non_increasing_sequence_rejected() {
        let e = ProvenanceEntry { seq: 3, payload: conv("a") };
        assert!(AuditTrail::from_entries(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn template_instantiation_counts() {
        let t = PolicyTemplate {
            version: 1,
            task_type: "T3".into(),
            retrieval_per_property: true,
            conversion_per_applied_conversion: true,
            repair_retrieval_per_physics_flag: true,
            validation_per_gate_per_pass: true,
            memo_sections: MemoSection::ALL.to_vec(),
            artifact_manifest: true,
        };
        let ctx = PolicyContext {
            property_fields: vec!["layers[0].k".into(), "layers[0].rho".into()],
            converted_fields: ["layers[0].k".to_string()].into(),
            physics_flagged: ["layers[0].k".to_string()].into(),
            passes: 2,
        };
        assert_eq!(t.instantiate(&ctx).keys.len(), 2 + 1 + 1 + 10 + 3 + 1);
    }
}
