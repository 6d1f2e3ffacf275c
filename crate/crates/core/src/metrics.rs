//! Benchmark scoring and statistics: the end-to-end success family, task
//! scores T1-T4, repair-efficiency aggregation, stratification, bootstrap
//! intervals and exact McNemar with Holm adjustment.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactPackage, TaskType};
use crate::assets::Gate;
use crate::executor::{compare_to_oracle, OracleSample, SimResult};
use crate::audit::{acs, AuditError, EntryPayload, PolicyContext, PolicyTemplate};
use crate::gates::{audit_structural_gaps, GateReport};
use crate::repair::{rcfe, RepairTrace};
use crate::rng::{derive_seed, stream_rng};
use crate::units::{parse_unit, unit_equivalent, Quantity, UnitError};

pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const T1_TOLERANCE: f64 = 0.05;
pub const T3_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty outcome set")]
    EmptySet,
    #[error("no oracle samples")]
    NoOracle,
    #[error("paired samples differ in length ({0} vs {1})")]
    Misaligned(usize, usize),
    #[error(transparent)]
    Unit(#[from] UnitError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub task_type: TaskType,
    pub strata: Vec<String>,
    /// Gate pass vector of the first (pre-repair) diagnostic pass.
    pub first_pass_gates: [bool; 5],
    /// Report after repair (equal to the first pass when no repair ran).
    pub gate_report: GateReport,
    pub first_pass_ready: bool,
    pub post_repair_ready: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<RepairTrace>,
    pub scores: BTreeMap<String, f64>,
}

impl TaskOutcome {
    pub fn gates(&self, stage: Stage) -> [bool; 5] {
        match stage {
            Stage::Lang => self.first_pass_gates,
            Stage::ScaffoldFull => self.gate_report.pass_vector(),
        }
    }

    pub fn ready(&self, stage: Stage) -> bool {
        match stage {
            Stage::Lang => self.first_pass_ready,
            Stage::ScaffoldFull => self.post_repair_ready,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// First pass, before any repair.
    Lang,
    /// After the verification-and-repair loop.
    ScaffoldFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EesrVariant {
    Full,
    KOf5(usize),
    MacroGate,
    BestGate,
}

/// Per-gate pass rate over gate vectors.
pub fn gate_pass_rates(vectors: &[[bool; 5]]) -> Result<[f64; 5], MetricsError> {
    if vectors.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut rates = [0.0; 5];
    for (g, rate) in rates.iter_mut().enumerate() {
        *rate = vectors.iter().filter(|v| v[g]).count() as f64 / vectors.len() as f64;
    }
    Ok(rates)
}

/// Success-rate variants over plain gate vectors.
pub fn eesr_vectors(vectors: &[[bool; 5]], variant: EesrVariant) -> Result<f64, MetricsError> {
    if vectors.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let n = vectors.len() as f64;
    let passing = |v: &[bool; 5]| v.iter().filter(|p| **p).count();
    Ok(match variant {
        EesrVariant::Full => vectors.iter().filter(|v| passing(v) == 5).count() as f64 / n,
        EesrVariant::KOf5(k) => vectors.iter().filter(|v| passing(v) >= k).count() as f64 / n,
        EesrVariant::MacroGate => gate_pass_rates(vectors)?.iter().sum::<f64>() / 5.0,
        EesrVariant::BestGate => gate_pass_rates(vectors)?.iter().copied().fold(0.0, f64::max),
    })
}

pub fn eesr(outcomes: &[TaskOutcome], variant: EesrVariant, stage: Stage) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if variant == EesrVariant::Full {
        let n = outcomes.iter().filter(|o| o.ready(stage)).count();
        return Ok(n as f64 / outcomes.len() as f64);
    }
    let vectors: Vec<[bool; 5]> = outcomes.iter().map(|o| o.gates(stage)).collect();
    eesr_vectors(&vectors, variant)
}

/// First-pass success, the gain added by repair, and their sum.
///
/// `full` is defined as `lang + scaffold`, so the decomposition holds
/// exactly; the counts carry the exact rationals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EesrDecomposition {
    pub n: usize,
    pub lang_count: usize,
    pub full_count: usize,
    pub lang: f64,
    pub scaffold: f64,
    pub full: f64,
}

pub fn eesr_decomposition(outcomes: &[TaskOutcome]) -> Result<EesrDecomposition, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let n = outcomes.len();
    let lang_count = outcomes.iter().filter(|o| o.first_pass_ready).count();
    let full_count = outcomes.iter().filter(|o| o.post_repair_ready).count();
    let lang = lang_count as f64 / n as f64;
    let scaffold = (full_count as f64 - lang_count as f64) / n as f64;
    Ok(EesrDecomposition { n, lang_count, full_count, lang, scaffold, full: lang + scaffold })
}

/// Success rate per stratum tag (an outcome counts toward every tag it has).
pub fn stratified_eesr(outcomes: &[TaskOutcome], stage: Stage) -> BTreeMap<String, f64> {
    let mut tallies: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        for s in &o.strata {
            let t = tallies.entry(s.clone()).or_default();
            t.1 += 1;
            if o.ready(stage) {
                t.0 += 1;
            }
        }
    }
    tallies.into_iter().map(|(k, (hit, n))| (k, hit as f64 / n as f64)).collect()
}

/// Unit-aware exact match within 5 %, compared in the reference's unit.
pub fn score_t1(answer: &Quantity, reference: &Quantity) -> Result<u8, MetricsError> {
    let r = parse_unit(&reference.unit)?;
    let a = match parse_unit(&answer.unit) {
        Ok(a) => a,
        Err(_) => return Ok(0),
    };
    if !unit_equivalent(&a, &r).equivalent {
        return Ok(0);
    }
    let v = answer.value_in(&reference.unit)?;
    let denom = reference.value.abs();
    let rel = if denom == 0.0 { v.abs() } else { (v - reference.value).abs() / denom };
    Ok(u8::from(rel <= T1_TOLERANCE + 1e-12))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2Score {
    pub micro_f1: f64,
    pub rouge_l: f64,
}

pub fn micro_f1<T: Ord>(extracted: &BTreeSet<T>, reference: &BTreeSet<T>) -> f64 {
    if extracted.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let tp = extracted.intersection(reference).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / extracted.len() as f64;
    let r = tp / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F-measure (beta = 1).
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn score_t2(
    extracted: &BTreeSet<(String, String)>,
    reference: &BTreeSet<(String, String)>,
    candidate_tokens: &[String],
    reference_tokens: &[String],
) -> T2Score {
    T2Score { micro_f1: micro_f1(extracted, reference), rouge_l: rouge_l(candidate_tokens, reference_tokens) }
}

/// All required spec fields present and well formed.
pub fn spec_complete(pkg: &ArtifactPackage) -> bool {
    !pkg.spec.layers.is_empty()
        && !pkg.spec.outputs.is_empty()
        && pkg.spec.outputs.iter().all(|p| !p.times_s.is_empty())
        && pkg.quantity_paths().iter().all(|p| {
            pkg.quantity(p).is_some_and(|q| q.value.is_finite() && !q.unit.trim().is_empty())
        })
}

/// Facts a required-entry policy needs, read off a package and the gate
/// reports produced while validating and repairing it.
pub fn policy_context(pkg: &ArtifactPackage, reports: &[&GateReport]) -> PolicyContext {
    let mut converted: BTreeSet<String> = pkg
        .audit
        .entries()
        .iter()
        .filter_map(|e| match &e.payload {
            EntryPayload::UnitConversion { field, .. } => Some(field.clone()),
            _ => None,
        })
        .collect();
    for (kind, fields) in audit_structural_gaps(pkg) {
        if kind == "conversion" {
            converted.extend(fields);
        }
    }
    let physics_flagged = reports
        .iter()
        .flat_map(|r| r.violations())
        .filter(|v| v.gate == Gate::Physics)
        .filter_map(|v| v.field.clone())
        .collect();
    PolicyContext {
        property_fields: pkg.property_paths(),
        converted_fields: converted,
        physics_flagged,
        passes: pkg.audit.last_validation_pass().map_or(0, |p| p + 1),
    }
}

/// ACS of a package's trail under a policy template.
pub fn package_acs(pkg: &ArtifactPackage, reports: &[&GateReport], template: &PolicyTemplate) -> Result<f64, AuditError> {
    acs(&pkg.audit, &template.instantiate(&policy_context(pkg, reports)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T3Score {
    pub si_g: u8,
    pub eesr: u8,
    pub max_probe_error: f64,
}

/// SI-G = Spec-Comp x Ref-Exec x Func, with Func the 2 % probe tolerance
/// against oracle samples; `strict` supplies the all-gate success bit.
pub fn score_t3(
    pkg: &ArtifactPackage,
    sim: &SimResult,
    oracle: &[OracleSample],
    strict: &GateReport,
) -> Result<T3Score, MetricsError> {
    if oracle.is_empty() {
        return Err(MetricsError::NoOracle);
    }
    let complete = spec_complete(pkg);
    let err = if sim.completed() { compare_to_oracle(sim, oracle).unwrap_or(f64::INFINITY) } else { f64::INFINITY };
    let func = err <= T3_TOLERANCE;
    Ok(T3Score { si_g: u8::from(complete && sim.completed() && func), eesr: u8::from(strict.ready), max_probe_error: err })
}

/// PP-A = Exec x Artifacts x ACS.
pub fn score_t4(executed: bool, produced: &[String], declared: &[String], acs: f64) -> f64 {
    let produced: BTreeSet<&str> = produced.iter().map(String::as_str).collect();
    let all = declared.iter().all(|d| produced.contains(d.as_str()));
    if executed && all {
        acs
    } else {
        0.0
    }
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    // Linear interpolation between closest ranks.
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the mean. Replicate `b` draws from a
/// stream derived from `seed` and `b`, so results do not depend on order of
/// evaluation.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() || resamples == 0 {
        return Err(MetricsError::EmptySet);
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|b| {
            let mut rng = stream_rng(derive_seed(seed, b as u64), 0xB007);
            (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile_sorted(&means, alpha), percentile_sorted(&means, 1.0 - alpha)))
}

pub fn bootstrap_ci_binary(outcomes: &[bool], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64), MetricsError> {
    let v: Vec<f64> = outcomes.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    bootstrap_ci(&v, resamples, level, seed)
}

fn ln_choose(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// Exact two-sided McNemar p-value from the discordant counts.
pub fn mcnemar_exact(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k_max = b.min(c);
    let tail: f64 = (0..=k_max).map(|k| (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp()).sum();
    (2.0 * tail).min(1.0)
}

/// Holm step-down adjustment; output aligned with the input order.
pub fn holm_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        let adj = ((m - rank) as f64 * p[i]).min(1.0);
        running = running.max(adj);
        out[i] = running;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    /// Tasks where `a` succeeded and `b` did not.
    pub a_only: u64,
    /// Tasks where `b` succeeded and `a` did not.
    pub b_only: u64,
    pub p_value: f64,
    pub p_holm: f64,
}

/// Paired success vectors per method pair (aligned by task), tested with
/// exact McNemar and Holm-adjusted across the listed pairs.
pub fn mcnemar_holm(pairs: &[(String, String, Vec<bool>, Vec<bool>)]) -> Result<Vec<PairTest>, MetricsError> {
    let mut tests = Vec::with_capacity(pairs.len());
    for (a, b, xa, xb) in pairs {
        if xa.len() != xb.len() {
            return Err(MetricsError::Misaligned(xa.len(), xb.len()));
        }
        let a_only = xa.iter().zip(xb).filter(|(x, y)| **x && !**y).count() as u64;
        let b_only = xa.iter().zip(xb).filter(|(x, y)| !**x && **y).count() as u64;
        tests.push(PairTest { a: a.clone(), b: b.clone(), a_only, b_only, p_value: mcnemar_exact(a_only, b_only), p_holm: 0.0 });
    }
    let adj = holm_adjust(&tests.iter().map(|t| t.p_value).collect::<Vec<_>>());
    for (t, p) in tests.iter_mut().zip(adj) {
        t.p_holm = p;
    }
    Ok(tests)
}

/// Mean downstream resolutions per action over traces that took at least
/// one action.
pub fn mean_rcfe<'a>(traces: impl IntoIterator<Item = &'a RepairTrace>) -> Option<f64> {
    let vals: Vec<f64> = traces.into_iter().filter_map(|t| rcfe(t).ok()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `1 - iterations(strategy) / iterations(baseline)`.
pub fn rework_reduction(iterations: f64, baseline_iterations: f64) -> f64 {
    if baseline_iterations == 0.0 {
        0.0
    } else {
        1.0 - iterations / baseline_iterations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

pub fn summarize_metric(values: &[f64], resamples: usize, seed: u64) -> Result<MetricSummary, MetricsError> {
    let (ci_lo, ci_hi) = bootstrap_ci(values, resamples, 0.95, seed)?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(MetricSummary { mean, ci_lo, ci_hi, n: values.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub n: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub gate_pass_rates: BTreeMap<String, f64>,
    pub strata_eesr: BTreeMap<String, f64>,
    pub eesr_variants: BTreeMap<String, f64>,
    pub decomposition: EesrDecomposition,
    pub counts: BTreeMap<String, usize>,
}

pub fn summarize(outcomes: &[TaskOutcome], resamples: usize, seed: u64) -> Result<BenchmarkSummary, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let mut metrics = BTreeMap::new();
    let ready: Vec<f64> = outcomes.iter().map(|o| f64::from(u8::from(o.post_repair_ready))).collect();
    metrics.insert("eesr".to_string(), summarize_metric(&ready, resamples, seed)?);
    let first: Vec<f64> = outcomes.iter().map(|o| f64::from(u8::from(o.first_pass_ready))).collect();
    metrics.insert("eesr_lang".to_string(), summarize_metric(&first, resamples, derive_seed(seed, 1))?);
    let mut names: BTreeSet<&str> = BTreeSet::new();
    for o in outcomes {
        names.extend(o.scores.keys().map(String::as_str));
    }
    for (i, name) in names.into_iter().enumerate() {
        let vals: Vec<f64> = outcomes.iter().filter_map(|o| o.scores.get(name).copied()).collect();
        metrics.insert(name.to_string(), summarize_metric(&vals, resamples, derive_seed(seed, 2 + i as u64))?);
    }
    let vectors: Vec<[bool; 5]> = outcomes.iter().map(|o| o.gates(Stage::ScaffoldFull)).collect();
    let rates = gate_pass_rates(&vectors)?;
    let gate_pass_rates = Gate::ALL.iter().map(|g| (g.name().to_string(), rates[g.index()])).collect();
    let mut eesr_variants = BTreeMap::new();
    eesr_variants.insert("full".to_string(), eesr(outcomes, EesrVariant::Full, Stage::ScaffoldFull)?);
    eesr_variants.insert("eesr_4".to_string(), eesr(outcomes, EesrVariant::KOf5(4), Stage::ScaffoldFull)?);
    eesr_variants.insert("macro_gate".to_string(), eesr(outcomes, EesrVariant::MacroGate, Stage::ScaffoldFull)?);
    eesr_variants.insert("best_gate".to_string(), eesr(outcomes, EesrVariant::BestGate, Stage::ScaffoldFull)?);
    let mut counts = BTreeMap::new();
    counts.insert("tasks".to_string(), outcomes.len());
    counts.insert("first_pass_ready".to_string(), outcomes.iter().filter(|o| o.first_pass_ready).count());
    counts.insert("post_repair_ready".to_string(), outcomes.iter().filter(|o| o.post_repair_ready).count());
    Ok(BenchmarkSummary {
        n: outcomes.len(),
        metrics,
        gate_pass_rates,
        strata_eesr: stratified_eesr(outcomes, Stage::ScaffoldFull),
        eesr_variants,
        decomposition: eesr_decomposition(outcomes)?,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::Rng;

    fn q(v: f64, u: &str) -> Quantity {
        Quantity::new(v, u)
    }

    #[test]
    fn t1_examples() {
        assert_eq!(score_t1(&q(1650.0, "degC"), &q(1650.0, "Celsius")).unwrap(), 1);
        assert_eq!(score_t1(&q(1650.0, "K"), &q(1650.0, "degC")).unwrap(), 0);
        assert_eq!(score_t1(&q(1733.0, "degC"), &q(1650.0, "degC")).unwrap(), 0);
        assert_eq!(score_t1(&q(1923.15, "K"), &q(1650.0, "degC")).unwrap(), 1);
        assert!(score_t1(&q(1.0, "m"), &q(1.0, "furlongz")).is_err());
    }

    #[test]
    fn eesr_examples() {
        let v = [[true, true, true, true, false]];
        assert_eq!(eesr_vectors(&v, EesrVariant::Full).unwrap(), 0.0);
        assert_eq!(eesr_vectors(&v, EesrVariant::KOf5(4)).unwrap(), 1.0);
        let two = [[true, true, true, true, false], [true, false, true, true, true]];
        assert!((eesr_vectors(&two, EesrVariant::MacroGate).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(eesr_vectors(&two, EesrVariant::BestGate).unwrap(), 1.0);
        assert!(matches!(eesr_vectors(&[], EesrVariant::Full), Err(MetricsError::EmptySet)));
    }

    #[test]
    fn t2_examples() {
        let s = |xs: &[&str]| xs.iter().map(|x| (x.to_string(), "1".to_string())).collect::<BTreeSet<_>>();
        assert!((micro_f1(&s(&["a", "b", "c"]), &s(&["a", "b", "d"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(micro_f1(&s(&["a"]), &s(&["b"])), 0.0);
        let t = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(rouge_l(&t(&["a", "b"]), &t(&["a", "b"])), 1.0);
        assert_eq!(rouge_l(&t(&["a"]), &t(&["b"])), 0.0);
    }

    #[test]
    fn t4_is_multiplicative() {
        let d = vec!["a".to_string(), "b".to_string()];
        assert_eq!(score_t4(true, &d, &d, 1.0), 1.0);
        assert_eq!(score_t4(true, &d[..1], &d, 1.0), 0.0);
        assert_eq!(score_t4(true, &d, &d, 0.611), 0.611);
        assert_eq!(score_t4(false, &d, &d, 1.0), 0.0);
    }

    #[test]
    fn mcnemar_examples() {
        assert_eq!(mcnemar_exact(5, 5), 1.0);
        let p = mcnemar_exact(15, 1);
        let expected = 2.0 * (1.0 + 16.0) / 65536.0;
        assert!((p - expected).abs() < 1e-12, "{p}");
        assert_eq!(mcnemar_exact(0, 0), 1.0);
        assert_eq!(holm_adjust(&[0.03]), vec![0.03]);
        let adj = holm_adjust(&[0.01, 0.04, 0.03]);
        assert!((adj[0] - 0.03).abs() < 1e-15 && (adj[2] - 0.06).abs() < 1e-15 && (adj[1] - 0.06).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_examples() {
        assert_eq!(bootstrap_ci_binary(&[true; 20], 1000, 0.95, 1).unwrap(), (1.0, 1.0));
        let mut rng = stream_rng(5, 0);
        let draws: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.887)).collect();
        let (lo, hi) = bootstrap_ci_binary(&draws, 1000, 0.95, 9).unwrap();
        assert_eq!((lo, hi), bootstrap_ci_binary(&draws, 1000, 0.95, 9).unwrap());
        assert!(lo < 0.887 && 0.887 < hi, "({lo}, {hi})");
        assert!((hi - lo - 0.04).abs() < 0.01, "width {}", hi - lo);
    }

    #[test]
    fn bootstrap_narrows_with_n() {
        let mut rng = stream_rng(6, 0);
        let big: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.7)).collect();
        let (a, b) = bootstrap_ci_binary(&big[..100], 1000, 0.95, 2).unwrap();
        let (c, d) = bootstrap_ci_binary(&big, 1000, 0.95, 2).unwrap();
        assert!(d - c < b - a);
    }

    proptest! {
        #[test]
        fn variant_chain_holds(rows in proptest::collection::vec(proptest::array::uniform5(any::<bool>()), 1..10)) {
            let full = eesr_vectors(&rows, EesrVariant::Full).unwrap();
            let k4 = eesr_vectors(&rows, EesrVariant::KOf5(4)).unwrap();
            let macro_g = eesr_vectors(&rows, EesrVariant::MacroGate).unwrap();
            let best = eesr_vectors(&rows, EesrVariant::BestGate).unwrap();
            prop_assert!(full <= k4 + 1e-12);
            prop_assert!(full <= macro_g + 1e-12);
            prop_assert!(macro_g <= best + 1e-12);
        }

        #[test]
        fn holm_is_monotone_and_dominates(p in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let adj = holm_adjust(&p);
            for (a, b) in p.iter().zip(&adj) {
                prop_assert!(b >= a && *b <= 1.0);
            }
        }

        #[test]
        fn scores_stay_in_unit_interval(a in proptest::collection::vec(0u8..4, 0..8), b in proptest::collection::vec(0u8..4, 0..8)) {
            let r = rouge_l(&a, &b);
            prop_assert!((0.0..=1.0).contains(&r));
            let sa: BTreeSet<u8> = a.into_iter().collect();
            let sb: BTreeSet<u8> = b.into_iter().collect();
            prop_assert!((0.0..=1.0).contains(&micro_f1(&sa, &sb)));
        }
    }
}
