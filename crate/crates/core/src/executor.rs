//! Reference executor: explicit finite differences for 1D multi-layer
//! transient conduction with a front heat flux and adiabatic back wall, plus
//! the semi-infinite analytical solution used as a functional oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e5;
pub const DEFAULT_STEP_BUDGET: u64 = 10_000_000;
pub const DEFAULT_SAFETY: f64 = 0.86;
pub const FOURIER_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("non-positive denominator (rho={rho}, cp={cp}, dx={dx})")]
    NonPositiveDenominator { rho: f64, cp: f64, dx: f64 },
    #[error("no matching sample points between simulation and oracle")]
    NoOverlap,
    #[error("simulation did not complete")]
    NotCompleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxKind {
    Constant,
    Triangular,
}

/// Front-face heat flux in W/m^2 over time in s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatFluxProfile {
    pub kind: FluxKind,
    pub q_peak: f64,
    pub t_peak: f64,
    pub t_end: f64,
}

impl HeatFluxProfile {
    pub fn constant(q: f64, t_end: f64) -> Self {
        HeatFluxProfile { kind: FluxKind::Constant, q_peak: q, t_peak: 0.0, t_end }
    }

    pub fn triangular(q_peak: f64, t_peak: f64, t_end: f64) -> Self {
        HeatFluxProfile { kind: FluxKind::Triangular, q_peak, t_peak, t_end }
    }

    pub fn is_valid(&self) -> bool {
        let finite = self.q_peak.is_finite() && self.t_peak.is_finite() && self.t_end.is_finite();
        finite
            && self.q_peak >= 0.0
            && match self.kind {
                FluxKind::Constant => self.t_end > 0.0,
                FluxKind::Triangular => 0.0 < self.t_peak && self.t_peak < self.t_end,
            }
    }

    pub fn at(&self, t: f64) -> f64 {
        if t < 0.0 || t > self.t_end {
            return 0.0;
        }
        match self.kind {
            FluxKind::Constant => self.q_peak,
            FluxKind::Triangular if t <= self.t_peak => self.q_peak * t / self.t_peak,
            FluxKind::Triangular => self.q_peak * (self.t_end - t) / (self.t_end - self.t_peak),
        }
    }

    /// Exact integral of the profile from 0 to `t`, in J/m^2.
    pub fn cumulative(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.t_end);
        match self.kind {
            FluxKind::Constant => self.q_peak * t,
            FluxKind::Triangular if t <= self.t_peak => 0.5 * self.q_peak * t * t / self.t_peak,
            FluxKind::Triangular => {
                let rise = 0.5 * self.q_peak * self.t_peak;
                let fall = self.t_end - self.t_peak;
                let rem = self.t_end - t;
                rise + 0.5 * self.q_peak * (fall - rem * rem / fall)
            }
        }
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        self.cumulative(b) - self.cumulative(a)
    }

    /// Step discontinuities `(time, jump)` and linear pieces `(start, end, slope)`.
    fn pieces(&self) -> (Vec<(f64, f64)>, Vec<(f64, f64, f64)>) {
        match self.kind {
            FluxKind::Constant => (vec![(0.0, self.q_peak), (self.t_end, -self.q_peak)], vec![]),
            FluxKind::Triangular => (
                vec![],
                vec![
                    (0.0, self.t_peak, self.q_peak / self.t_peak),
                    (self.t_peak, self.t_end, -self.q_peak / (self.t_end - self.t_peak)),
                ],
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub k: f64,
    pub rho: f64,
    pub cp: f64,
    pub thickness: f64,
}

impl Layer {
    pub fn diffusivity(&self) -> f64 {
        self.k / (self.rho * self.cp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DtMode {
    Fixed { dt: f64 },
    Adaptive { safety: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub layers: Vec<Layer>,
    pub n_nodes: usize,
    pub dt_mode: DtMode,
    pub t_end: f64,
    pub flux: HeatFluxProfile,
    pub t_init: f64,
    #[serde(default = "default_threshold")]
    pub divergence_threshold: f64,
    #[serde(default = "default_budget")]
    pub step_budget: u64,
    /// Probe positions in m.
    #[serde(default)]
    pub probe_positions: Vec<f64>,
    /// Probe times in s.
    #[serde(default)]
    pub probe_times: Vec<f64>,
    #[serde(default)]
    pub record_field: bool,
}

fn default_threshold() -> f64 {
    DEFAULT_DIVERGENCE_THRESHOLD
}

fn default_budget() -> u64 {
    DEFAULT_STEP_BUDGET
}

impl SimConfig {
    pub fn total_thickness(&self) -> f64 {
        self.layers.iter().map(|l| l.thickness).sum()
    }

    pub fn dx(&self) -> f64 {
        self.total_thickness() / (self.n_nodes as f64 - 1.0)
    }

    /// Δt the solver will use (before landing on sample times).
    pub fn effective_dt(&self) -> f64 {
        match self.dt_mode {
            DtMode::Fixed { dt } => dt,
            DtMode::Adaptive { safety } => safety * stable_dt_limit(&self.layers, self.dx()),
        }
    }

    pub fn fourier_numbers(&self) -> Vec<f64> {
        let (dx, dt) = (self.dx(), self.effective_dt());
        self.layers
            .iter()
            .map(|l| fourier_number(l.k, l.rho, l.cp, dx, dt).unwrap_or(f64::NAN))
            .collect()
    }

    /// Sample instants: requested probe times within (0, t_end] plus t_end.
    pub fn sample_times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.probe_times.iter().copied().filter(|t| *t > 0.0 && *t <= self.t_end).collect();
        ts.push(self.t_end);
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        ts
    }

    /// Steps the solver would take, landing exactly on every sample time.
    pub fn planned_steps(&self) -> Option<u64> {
        let dt = self.effective_dt();
        if !(dt.is_finite() && dt > 0.0) {
            return None;
        }
        let mut prev = 0.0;
        let mut total: f64 = 0.0;
        for t in self.sample_times() {
            total += steps_for(t - prev, dt) as f64;
            prev = t;
        }
        (total <= u64::MAX as f64).then_some(total as u64)
    }

    fn invalid_reason(&self) -> Option<String> {
        if self.layers.is_empty() {
            return Some("no layers".into());
        }
        if self.n_nodes < 3 {
            return Some(format!("n_nodes {} < 3", self.n_nodes));
        }
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Some(format!("t_end {} not positive", self.t_end));
        }
        if !self.t_init.is_finite() || self.t_init < 0.0 {
            return Some(format!("t_init {} not a valid absolute temperature", self.t_init));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, v) in [("k", l.k), ("rho", l.rho), ("cp", l.cp), ("thickness", l.thickness)] {
                if !(v.is_finite() && v > 0.0) {
                    return Some(format!("layers[{i}].{name} = {v} must be finite and positive"));
                }
            }
        }
        if !self.flux.is_valid() {
            return Some("invalid heat flux profile".into());
        }
        match self.dt_mode {
            DtMode::Fixed { dt } if !(dt.is_finite() && dt > 0.0) => return Some(format!("dt {dt} not positive")),
            DtMode::Adaptive { safety } if !(safety > 0.0 && safety <= 1.0) => {
                return Some(format!("safety {safety} outside (0, 1]"))
            }
            _ => {}
        }
        let length = self.total_thickness();
        if let Some(x) = self.probe_positions.iter().find(|x| !(**x >= 0.0 && **x <= length * (1.0 + 1e-12))) {
            return Some(format!("probe position {x} outside [0, {length}]"));
        }
        if let Some(t) = self.probe_times.iter().find(|t| !(**t >= 0.0 && **t <= self.t_end)) {
            return Some(format!("probe time {t} outside [0, {}]", self.t_end));
        }
        match self.planned_steps() {
            Some(n) if n <= self.step_budget => None,
            Some(n) => Some(format!("{n} steps exceed budget {}", self.step_budget)),
            None => Some("step count not representable".into()),
        }
    }
}

fn steps_for(span: f64, dt: f64) -> u64 {
    let n = (span / dt - 1e-9).ceil();
    n.max(1.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SimStatus {
    Completed,
    Diverged { at_time: f64 },
    InvalidInput { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub position_m: f64,
    pub time_s: f64,
    pub temperature_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub time_s: f64,
    pub temperatures_k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    #[serde(flatten)]
    pub status: SimStatus,
    pub effective_dt: f64,
    pub fourier_numbers: Vec<f64>,
    pub t_init: f64,
    pub steps: u64,
    pub max_temperature: f64,
    pub min_temperature: f64,
    pub probes: Vec<ProbeSample>,
    pub node_x: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<Vec<FieldSnapshot>>,
    /// Stored enthalpy change and absorbed energy per unit area at the final
    /// state reached, J/m^2.
    pub energy_stored: f64,
    pub energy_in: f64,
}

impl SimResult {
    pub fn completed(&self) -> bool {
        self.status == SimStatus::Completed
    }

    pub fn probe(&self, x: f64, t: f64) -> Option<f64> {
        self.probes
            .iter()
            .find(|p| same_point(p.position_m, x) && same_time(p.time_s, t))
            .map(|p| p.temperature_k)
    }

    /// |stored − absorbed| / absorbed.
    pub fn energy_residual(&self) -> f64 {
        if self.energy_in == 0.0 {
            return self.energy_stored.abs();
        }
        (self.energy_stored - self.energy_in).abs() / self.energy_in.abs()
    }

    /// CSV field dump with columns x_m, t_s, T_K.
    pub fn field_csv(&self) -> Option<String> {
        let field = self.field.as_ref()?;
        let mut out = String::from("x_m,t_s,T_K\n");
        for snap in field {
            for (x, temp) in self.node_x.iter().zip(&snap.temperatures_k) {
                out.push_str(&format!("{x},{},{temp}\n", snap.time_s));
            }
        }
        Some(out)
    }
}

fn same_point(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 + 1e-9 * b.abs()
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

pub fn fourier_number(k: f64, rho: f64, cp: f64, dx: f64, dt: f64) -> Result<f64, ExecError> {
    if !(rho > 0.0 && cp > 0.0 && dx > 0.0) {
        return Err(ExecError::NonPositiveDenominator { rho, cp, dx });
    }
    Ok(k * dt / (rho * cp * dx * dx))
}

/// min over layers of ρ·cp·Δx²/(2k). Layers with a non-positive property
/// have no diffusive limit and are skipped.
pub fn stable_dt_limit(layers: &[Layer], dx: f64) -> f64 {
    layers
        .iter()
        .filter(|l| l.k > 0.0 && l.rho > 0.0 && l.cp > 0.0)
        .map(|l| l.rho * l.cp * dx * dx / (2.0 * l.k))
        .fold(f64::INFINITY, f64::min)
}

struct Grid {
    x: Vec<f64>,
    /// Heat capacity per unit area of each node's control volume.
    cap: Vec<f64>,
    /// Conductance between node i and i+1.
    cond: Vec<f64>,
}

fn build_grid(cfg: &SimConfig) -> Grid {
    let n = cfg.n_nodes;
    let dx = cfg.dx();
    let mut bounds = Vec::with_capacity(cfg.layers.len());
    let mut acc = 0.0;
    for l in &cfg.layers {
        acc += l.thickness;
        bounds.push(acc);
    }
    let layer_of = |x: f64| bounds.iter().position(|b| x < *b).unwrap_or(cfg.layers.len() - 1);
    let x: Vec<f64> = (0..n).map(|i| i as f64 * dx).collect();
    let idx: Vec<usize> = x.iter().map(|&xi| layer_of(xi)).collect();
    let cap = (0..n)
        .map(|i| {
            let l = &cfg.layers[idx[i]];
            let w = if i == 0 || i == n - 1 { 0.5 * dx } else { dx };
            l.rho * l.cp * w
        })
        .collect();
    let cond = (0..n - 1)
        .map(|i| {
            let (a, b) = (cfg.layers[idx[i]].k, cfg.layers[idx[i + 1]].k);
            2.0 * a * b / (a + b) / dx
        })
        .collect();
    Grid { x, cap, cond }
}

fn interpolate(x: &[f64], temps: &[f64], pos: f64) -> f64 {
    let dx = x[1] - x[0];
    let s = (pos / dx).clamp(0.0, (x.len() - 1) as f64);
    let i = (s.floor() as usize).min(x.len() - 2);
    let f = s - i as f64;
    temps[i] * (1.0 - f) + temps[i + 1] * f
}

/// Explicit forward-Euler solve. Steps land exactly on every sample time;
/// within a segment the step is shortened uniformly so it never exceeds the
/// effective Δt.
pub fn solve_fd(cfg: &SimConfig) -> SimResult {
    let effective_dt = cfg.effective_dt();
    let fourier_numbers = if cfg.layers.is_empty() || cfg.n_nodes < 2 { vec![] } else { cfg.fourier_numbers() };
    let mut result = SimResult {
        status: SimStatus::Completed,
        effective_dt,
        fourier_numbers,
        t_init: cfg.t_init,
        steps: 0,
        max_temperature: cfg.t_init,
        min_temperature: cfg.t_init,
        probes: vec![],
        node_x: vec![],
        field: None,
        energy_stored: 0.0,
        energy_in: 0.0,
    };
    if let Some(reason) = cfg.invalid_reason() {
        result.status = SimStatus::InvalidInput { reason };
        return result;
    }
    let grid = build_grid(cfg);
    let n = cfg.n_nodes;
    let mut temp = vec![cfg.t_init; n];
    let mut next = temp.clone();
    let mut field = cfg.record_field.then(|| vec![FieldSnapshot { time_s: 0.0, temperatures_k: temp.clone() }]);
    let mut samples: Vec<(f64, Vec<f64>)> = vec![(0.0, temp.clone())];
    let mut t = 0.0;
    let mut steps = 0u64;
    let mut hi = cfg.t_init;
    let mut lo = cfg.t_init;
    'outer: for target in cfg.sample_times() {
        let m = steps_for(target - t, effective_dt);
        let start = t;
        let h = (target - start) / m as f64;
        for j in 1..=m {
            let t_next = if j == m { target } else { start + h * j as f64 };
            let step = t_next - t;
            let q = cfg.flux.integral(t, t_next) / step;
            for i in 0..n {
                let left = if i > 0 { grid.cond[i - 1] * (temp[i - 1] - temp[i]) } else { q };
                let right = if i + 1 < n { grid.cond[i] * (temp[i + 1] - temp[i]) } else { 0.0 };
                next[i] = temp[i] + step * (left + right) / grid.cap[i];
            }
            std::mem::swap(&mut temp, &mut next);
            t = t_next;
            steps += 1;
            let mut bad = false;
            for &v in &temp {
                if !v.is_finite() || v > cfg.divergence_threshold {
                    bad = true;
                }
                if v.is_finite() {
                    hi = hi.max(v);
                    lo = lo.min(v);
                }
            }
            if bad {
                result.status = SimStatus::Diverged { at_time: t };
                break 'outer;
            }
        }
        samples.push((t, temp.clone()));
        if let Some(f) = field.as_mut() {
            f.push(FieldSnapshot { time_s: t, temperatures_k: temp.clone() });
        }
    }
    result.steps = steps;
    result.max_temperature = hi;
    result.min_temperature = lo;
    result.energy_in = cfg.flux.cumulative(t);
    result.energy_stored = temp.iter().zip(&grid.cap).map(|(v, c)| c * (v - cfg.t_init)).sum();
    if result.completed() {
        for &pt in &cfg.probe_times {
            let snap = samples.iter().find(|(st, _)| same_time(*st, pt)).expect("probe time sampled");
            for &px in &cfg.probe_positions {
                result.probes.push(ProbeSample {
                    position_m: px,
                    time_s: pt,
                    temperature_k: interpolate(&grid.x, &snap.1, px),
                });
            }
        }
    }
    result.field = field;
    result.node_x = grid.x;
    result
}

/// Response of a half-space to a unit step in surface flux (q = 1 W/m^2).
fn unit_step_response(k: f64, alpha: f64, x: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let s = (alpha * t).sqrt();
    let gauss = (2.0 / k) * s / std::f64::consts::PI.sqrt() * (-x * x / (4.0 * alpha * t)).exp();
    gauss - (x / k) * libm::erfc(x / (2.0 * s))
}

/// Adaptive Simpson quadrature with a relative tolerance.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, a, b);
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    let first = recurse(f, a, b, fa, fm, fb, whole, rel_tol * scale, 50);
    // refine once against the first estimate's magnitude
    recurse(f, a, b, fa, fm, fb, whole, rel_tol * first.abs().max(f64::MIN_POSITIVE), 50)
}

/// Temperature rise of a semi-infinite solid under the given surface flux,
/// by Duhamel superposition of the constant-flux step response.
pub fn analytical_semi_infinite(q: &HeatFluxProfile, k: f64, alpha: f64, x: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let (jumps, ramps) = q.pieces();
    let mut total = 0.0;
    for (tau, jump) in jumps {
        if tau < t {
            total += jump * unit_step_response(k, alpha, x, t - tau);
        }
    }
    for (a, b, slope) in ramps {
        let hi = b.min(t);
        if hi <= a || slope == 0.0 {
            continue;
        }
        let f = |tau: f64| unit_step_response(k, alpha, x, t - tau);
        total += slope * adaptive_simpson(&f, a, hi, 1e-6);
    }
    total
}

/// Oracle sample: temperature rise above initial at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSample {
    pub position_m: f64,
    pub time_s: f64,
    pub delta_t: f64,
}

/// Semi-infinite oracle rises at `x`, treating the slab as its front layer.
pub fn front_layer_oracle(cfg: &SimConfig, x: f64, times: &[f64]) -> Vec<OracleSample> {
    let Some(front) = cfg.layers.first() else { return Vec::new() };
    times
        .iter()
        .map(|&t| OracleSample {
            position_m: x,
            time_s: t,
            delta_t: analytical_semi_infinite(&cfg.flux, front.k, front.diffusivity(), x, t),
        })
        .collect()
}

/// Max relative error of simulated probes against oracle rises, with a 1 K
/// floor on the denominator.
pub fn compare_to_oracle(sim: &SimResult, oracle: &[OracleSample]) -> Result<f64, ExecError> {
    if !sim.completed() {
        return Err(ExecError::NotCompleted);
    }
    let mut worst: Option<f64> = None;
    for o in oracle {
        if let Some(t_sim) = sim.probe(o.position_m, o.time_s) {
            let err = (t_sim - (sim.t_init + o.delta_t)).abs() / o.delta_t.abs().max(1.0);
            worst = Some(worst.map_or(err, |w| w.max(err)));
        }
    }
    worst.ok_or(ExecError::NoOverlap)
}
