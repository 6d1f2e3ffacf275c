//! Constraint dependency graph: tiered DAG over constraint nodes with
//! regime-conditioned edge weights, repair priority and calibration from
//! recorded repair episodes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{Category, RegimeContext};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum CdgError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("duplicate node {0}")]
    DuplicateNode(String),
    #[error("edge {from}->{to} does not go to a later tier")]
    TierOrder { from: String, to: String },
    #[error("edge {from}->{to} has weight {weight} outside [0,1]")]
    WeightOutOfRange { from: String, to: String, weight: f64 },
    #[error("duplicate edge {from}->{to}")]
    DuplicateEdge { from: String, to: String },
    #[error("severity {0} outside 1..=3")]
    BadSeverity(u8),
    #[error("no violated nodes to prioritise")]
    EmptyViolationSet,
    #[error("calibration corpus is empty")]
    EmptyCorpus,
    #[error("episode {id}: {reason}")]
    InvalidEpisode { id: String, reason: String },
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdgNode {
    pub id: String,
    pub tier: Category,
    pub default_severity: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdgEdge {
    pub from: String,
    pub to: String,
    pub weights: BTreeMap<RegimeContext, f64>,
}

impl CdgEdge {
    pub fn weight(&self, regime: RegimeContext) -> f64 {
        self.weights.get(&regime).copied().unwrap_or(0.0)
    }
}

#[derive(Serialize, Deserialize)]
struct CdgFile {
    version: u32,
    nodes: Vec<CdgNode>,
    edges: Vec<CdgEdge>,
}

/// Immutable once built; construction enforces the tier ordering, so the
/// graph is acyclic by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdg {
    nodes: Vec<CdgNode>,
    edges: Vec<CdgEdge>,
    index: BTreeMap<String, usize>,
    out: Vec<Vec<usize>>,
}

impl Cdg {
    pub fn new(nodes: Vec<CdgNode>, edges: Vec<CdgEdge>) -> Result<Self, CdgError> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if !(1..=3).contains(&n.default_severity) {
                return Err(CdgError::BadSeverity(n.default_severity));
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(CdgError::DuplicateNode(n.id.clone()));
            }
        }
        let mut out = vec![Vec::new(); nodes.len()];
        let mut seen = BTreeSet::new();
        for (ei, e) in edges.iter().enumerate() {
            let f = *index.get(&e.from).ok_or_else(|| CdgError::UnknownNode(e.from.clone()))?;
            let t = *index.get(&e.to).ok_or_else(|| CdgError::UnknownNode(e.to.clone()))?;
            if nodes[f].tier.tier() >= nodes[t].tier.tier() {
                return Err(CdgError::TierOrder { from: e.from.clone(), to: e.to.clone() });
            }
            for &w in e.weights.values() {
                if !(0.0..=1.0).contains(&w) {
                    return Err(CdgError::WeightOutOfRange { from: e.from.clone(), to: e.to.clone(), weight: w });
                }
            }
            if !seen.insert((f, t)) {
                return Err(CdgError::DuplicateEdge { from: e.from.clone(), to: e.to.clone() });
            }
            out[f].push(ei);
        }
        Ok(Cdg { nodes, edges, index, out })
    }

    pub fn from_json_str(text: &str) -> Result<Self, CdgError> {
        let file: CdgFile = serde_json::from_str(text).map_err(|e| CdgError::SchemaError(e.to_string()))?;
        if file.version != 1 {
            return Err(CdgError::SchemaError(format!("unsupported version {}", file.version)));
        }
        Cdg::new(file.nodes, file.edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CdgError> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|source| CdgError::Io { path: p.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// The shipped 23-node, 45-edge graph.
    pub fn default_graph() -> Self {
        let text = crate::fixtures::text(crate::fixtures::DEFAULT_CDG).expect("default graph fixture");
        Self::from_json_str(&text).expect("default graph fixture is valid")
    }

    pub fn to_json(&self) -> String {
        let file = CdgFile { version: 1, nodes: self.nodes.clone(), edges: self.edges.clone() };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn nodes(&self) -> &[CdgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[CdgEdge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Result<&CdgNode, CdgError> {
        self.index.get(id).map(|&i| &self.nodes[i]).ok_or_else(|| CdgError::UnknownNode(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn tier_count(&self) -> usize {
        self.nodes.iter().map(|n| n.tier).collect::<BTreeSet<_>>().len()
    }

    pub fn edge(&self, from: &str, to: &str) -> Option<&CdgEdge> {
        let f = *self.index.get(from)?;
        self.out[f].iter().map(|&e| &self.edges[e]).find(|e| e.to == to)
    }

    pub fn out_edges(&self, u: &str) -> Result<impl Iterator<Item = &CdgEdge>, CdgError> {
        let i = *self.index.get(u).ok_or_else(|| CdgError::UnknownNode(u.to_string()))?;
        Ok(self.out[i].iter().map(move |&e| &self.edges[e]))
    }

    /// Transitive closure of out-edges, excluding `u` itself.
    pub fn descendants(&self, u: &str) -> Result<BTreeSet<String>, CdgError> {
        let start = *self.index.get(u).ok_or_else(|| CdgError::UnknownNode(u.to_string()))?;
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &e in &self.out[i] {
                let t = self.index[&self.edges[e].to];
                if seen.insert(t) {
                    stack.push(t);
                }
            }
        }
        Ok(seen.into_iter().map(|i| self.nodes[i].id.clone()).collect())
    }

    /// Downstream repair gain: sum of direct out-edge weights, optionally
    /// scaled by the severity of each target. Targets absent from
    /// `severities` fall back to their default severity.
    pub fn gain(
        &self,
        u: &str,
        regime: RegimeContext,
        severity_weighted: bool,
        severities: &BTreeMap<String, u8>,
    ) -> Result<f64, CdgError> {
        let mut g = 0.0;
        for e in self.out_edges(u)? {
            let w = e.weight(regime);
            let s = if severity_weighted {
                severities.get(&e.to).copied().unwrap_or_else(|| self.nodes[self.index[&e.to]].default_severity) as f64
            } else {
                1.0
            };
            g += w * s;
        }
        Ok(g)
    }

    /// Violated nodes ordered by descending gain, ties by lower tier then id.
    pub fn ranked(
        &self,
        violated: &BTreeSet<String>,
        regime: RegimeContext,
        severity_weighted: bool,
        severities: &BTreeMap<String, u8>,
    ) -> Result<Vec<(String, f64)>, CdgError> {
        let mut scored = Vec::with_capacity(violated.len());
        for v in violated {
            let g = self.gain(v, regime, severity_weighted, severities)?;
            scored.push((v.clone(), g, self.node(v)?.tier.tier()));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)));
        Ok(scored.into_iter().map(|(n, g, _)| (n, g)).collect())
    }

    pub fn priority(
        &self,
        violated: &BTreeSet<String>,
        regime: RegimeContext,
        severity_weighted: bool,
        severities: &BTreeMap<String, u8>,
    ) -> Result<String, CdgError> {
        if violated.is_empty() {
            return Err(CdgError::EmptyViolationSet);
        }
        Ok(self.ranked(violated, regime, severity_weighted, severities)?.remove(0).0)
    }
}

/// One recorded repair step: which node was targeted, with what action, and
/// the violation bitmaps around it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairEpisode {
    pub episode_id: String,
    pub task_id: String,
    pub regime: RegimeContext,
    pub pre_bitmap: BTreeMap<String, bool>,
    pub target_node: String,
    pub action_kind: String,
    pub post_bitmap: BTreeMap<String, bool>,
    pub delta_v: Vec<String>,
}

impl RepairEpisode {
    pub fn new(
        episode_id: impl Into<String>,
        task_id: impl Into<String>,
        regime: RegimeContext,
        pre_bitmap: BTreeMap<String, bool>,
        target_node: impl Into<String>,
        action_kind: impl Into<String>,
        post_bitmap: BTreeMap<String, bool>,
    ) -> Self {
        let delta_v = resolved_nodes(&pre_bitmap, &post_bitmap);
        RepairEpisode {
            episode_id: episode_id.into(),
            task_id: task_id.into(),
            regime,
            pre_bitmap,
            target_node: target_node.into(),
            action_kind: action_kind.into(),
            post_bitmap,
            delta_v,
        }
    }

    pub fn was_violated(&self, node: &str) -> bool {
        self.pre_bitmap.get(node).copied().unwrap_or(false)
    }

    pub fn is_resolved(&self, node: &str) -> bool {
        self.was_violated(node) && !self.post_bitmap.get(node).copied().unwrap_or(false)
    }

    pub fn validate(&self) -> Result<(), CdgError> {
        let bad = |reason: &str| CdgError::InvalidEpisode { id: self.episode_id.clone(), reason: reason.into() };
        if !self.was_violated(&self.target_node) {
            return Err(bad("target node not violated before repair"));
        }
        if self.delta_v != resolved_nodes(&self.pre_bitmap, &self.post_bitmap) {
            return Err(bad("delta_v inconsistent with bitmaps"));
        }
        Ok(())
    }
}

/// Nodes violated in `pre` and not violated in `post`, sorted.
pub fn resolved_nodes(pre: &BTreeMap<String, bool>, post: &BTreeMap<String, bool>) -> Vec<String> {
    pre.iter()
        .filter(|(n, &v)| v && !post.get(*n).copied().unwrap_or(false))
        .map(|(n, _)| n.clone())
        .collect()
}

pub fn episodes_to_jsonl(episodes: &[RepairEpisode]) -> String {
    let mut s = String::new();
    for e in episodes {
        s.push_str(&serde_json::to_string(e).expect("episode serializes"));
        s.push('\n');
    }
    s
}

pub fn episodes_from_jsonl(text: &str) -> Result<Vec<RepairEpisode>, CdgError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: RepairEpisode =
            serde_json::from_str(line).map_err(|err| CdgError::SchemaError(format!("line {}: {err}", i + 1)))?;
        e.validate()?;
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairCount {
    pub n_opportunities: u64,
    pub n_coresolved: u64,
}

impl PairCount {
    fn estimate(&self, alpha: f64) -> f64 {
        if self.n_opportunities == 0 {
            0.0
        } else {
            (self.n_coresolved as f64 + alpha) / (self.n_opportunities as f64 + 2.0 * alpha)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCalibration {
    pub from: String,
    pub to: String,
    pub counts: BTreeMap<RegimeContext, PairCount>,
    pub w_hat: BTreeMap<RegimeContext, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub edges: Vec<EdgeCalibration>,
    pub heldout_mae: f64,
    pub n_heldout: usize,
    pub n_train: usize,
    pub n_pairs_compared: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    pub holdout: f64,
    pub seed: u64,
    /// Additive smoothing; 0 gives raw frequencies.
    pub alpha: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { holdout: 0.2, seed: 0, alpha: 0.0 }
    }
}

type Counts = BTreeMap<(String, String), BTreeMap<RegimeContext, PairCount>>;

fn count_pairs(episodes: &[&RepairEpisode], tiers: &BTreeMap<&str, u8>) -> Result<Counts, CdgError> {
    let mut counts: Counts = BTreeMap::new();
    for e in episodes {
        let tu = *tiers.get(e.target_node.as_str()).ok_or_else(|| CdgError::UnknownNode(e.target_node.clone()))?;
        for (v, &violated) in &e.pre_bitmap {
            if !violated || *v == e.target_node {
                continue;
            }
            let Some(&tv) = tiers.get(v.as_str()) else { continue };
            if tv <= tu {
                continue;
            }
            let c = counts.entry((e.target_node.clone(), v.clone())).or_default().entry(e.regime).or_default();
            c.n_opportunities += 1;
            if e.is_resolved(v) {
                c.n_coresolved += 1;
            }
        }
    }
    Ok(counts)
}

/// Estimates edge weights as empirical co-resolution frequencies.
///
/// A seeded shuffle holds out `floor(n * holdout)` episodes; the returned
/// graph and per-edge estimates come from the remaining training episodes
/// and the held-out error compares the two fits pair by pair, weighted by
/// held-out opportunities.
pub fn calibrate(
    episodes: &[RepairEpisode],
    nodes: &[CdgNode],
    opts: CalibrationOptions,
) -> Result<(Cdg, CalibrationReport), CdgError> {
    if episodes.is_empty() {
        return Err(CdgError::EmptyCorpus);
    }
    if !(0.0..1.0).contains(&opts.holdout) {
        return Err(CdgError::SchemaError(format!("holdout fraction {} outside [0,1)", opts.holdout)));
    }
    for e in episodes {
        e.validate()?;
    }
    let tiers: BTreeMap<&str, u8> = nodes.iter().map(|n| (n.id.as_str(), n.tier.tier())).collect();
    let n_heldout = (episodes.len() as f64 * opts.holdout).floor() as usize;
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut stream_rng(opts.seed, 0xCA1B));
    let held: BTreeSet<usize> = order[..n_heldout].iter().copied().collect();
    let train: Vec<&RepairEpisode> = (0..episodes.len()).filter(|i| !held.contains(i)).map(|i| &episodes[i]).collect();
    let test: Vec<&RepairEpisode> = held.iter().map(|&i| &episodes[i]).collect();

    let train_counts = count_pairs(&train, &tiers)?;
    let test_counts = count_pairs(&test, &tiers)?;

    let mut edges = Vec::new();
    let mut report_edges = Vec::new();
    for ((from, to), per_regime) in &train_counts {
        let w_hat: BTreeMap<RegimeContext, f64> =
            per_regime.iter().map(|(r, c)| (*r, c.estimate(opts.alpha))).collect();
        report_edges.push(EdgeCalibration {
            from: from.clone(),
            to: to.clone(),
            counts: per_regime.clone(),
            w_hat: w_hat.clone(),
        });
        if w_hat.values().any(|&w| w > 0.0) {
            let weights = w_hat.into_iter().filter(|(_, w)| *w > 0.0).collect();
            edges.push(CdgEdge { from: from.clone(), to: to.clone(), weights });
        }
    }

    let mut abs_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut n_pairs = 0;
    for (pair, per_regime) in &test_counts {
        for (r, c) in per_regime {
            let trained = train_counts.get(pair).and_then(|m| m.get(r)).copied().unwrap_or_default();
            let n = c.n_opportunities as f64;
            abs_sum += n * (trained.estimate(opts.alpha) - c.estimate(opts.alpha)).abs();
            weight_sum += n;
            n_pairs += 1;
        }
    }
    let heldout_mae = if weight_sum > 0.0 { abs_sum / weight_sum } else { 0.0 };
    let g = Cdg::new(nodes.to_vec(), edges)?;
    Ok((
        g,
        CalibrationReport { edges: report_edges, heldout_mae, n_heldout, n_train: train.len(), n_pairs_compared: n_pairs },
    ))
}

/// Draw a repair corpus from a known propagation graph.
///
/// Each episode targets a node with out-edges. Its direct successors are
/// violated with probability `p_child` and every other higher-tier node with
/// probability `p_other`; a violated node then resolves with the edge weight
/// for the episode's regime, so unconnected nodes never co-resolve.
pub fn synthetic_episodes(
    truth: &Cdg,
    regimes: &[RegimeContext],
    n: usize,
    p_child: f64,
    p_other: f64,
    seed: u64,
) -> Result<Vec<RepairEpisode>, CdgError> {
    if regimes.is_empty() {
        return Err(CdgError::SchemaError("no regimes to sample".into()));
    }
    let sources: Vec<&CdgNode> = truth.nodes.iter().filter(|v| truth.edges.iter().any(|e| e.from == v.id)).collect();
    if sources.is_empty() {
        return Err(CdgError::EmptyCorpus);
    }
    let mut rng = stream_rng(seed, 0x5EED);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let u = sources[rng.gen_range(0..sources.len())];
        let regime = regimes[rng.gen_range(0..regimes.len())];
        let mut pre = BTreeMap::new();
        let mut post = BTreeMap::new();
        for v in &truth.nodes {
            if v.id == u.id {
                pre.insert(v.id.clone(), true);
                post.insert(v.id.clone(), false);
                continue;
            }
            let w = truth.edge(&u.id, &v.id).map(|e| e.weight(regime));
            let p = match w {
                Some(_) => p_child,
                None if v.tier.tier() > u.tier.tier() => p_other,
                None => 0.0,
            };
            let violated = rng.gen_bool(p);
            let resolved = violated && rng.gen_bool(w.unwrap_or(0.0).clamp(0.0, 1.0));
            pre.insert(v.id.clone(), violated);
            post.insert(v.id.clone(), violated && !resolved);
        }
        out.push(RepairEpisode::new(format!("syn-{i:05}"), format!("syn-task-{}", i % 97), regime, pre, &u.id, "synthetic", post));
    }
    Ok(out)
}

/// Opportunity-weighted absolute error of calibrated weights against a
/// reference graph, over the pairs the report counted.
pub fn weight_error(report: &CalibrationReport, truth: &Cdg) -> f64 {
    let mut abs_sum = 0.0;
    let mut n_sum = 0.0;
    for e in &report.edges {
        for (r, c) in &e.counts {
            let w_true = truth.edge(&e.from, &e.to).map(|x| x.weight(*r)).unwrap_or(0.0);
            let n = c.n_opportunities as f64;
            abs_sum += n * (e.w_hat[r] - w_true).abs();
            n_sum += n;
        }
    }
    if n_sum > 0.0 { abs_sum / n_sum } else { 0.0 }
}
