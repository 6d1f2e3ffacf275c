//! Shared helpers for integration tests.

#![allow(dead_code)]

use cclg::executor::SimConfig;

/// Crank–Nicolson reference for the layered slab: front flux, adiabatic
/// back, harmonic-mean interface conductance, half control volumes at both
/// ends. Returns the field at each requested time (times must be sorted).
pub fn crank_nicolson(cfg: &SimConfig, n_nodes: usize, dt: f64, times: &[f64]) -> Vec<Vec<f64>> {
    let total: f64 = cfg.layers.iter().map(|l| l.thickness).sum();
    let dx = total / (n_nodes as f64 - 1.0);
    let mut bounds = Vec::new();
    let mut acc = 0.0;
    for l in &cfg.layers {
        acc += l.thickness;
        bounds.push(acc);
    }
    let layer = |x: f64| bounds.iter().position(|b| x < *b).unwrap_or(cfg.layers.len() - 1);
    let idx: Vec<usize> = (0..n_nodes).map(|i| layer(i as f64 * dx)).collect();
    let cap: Vec<f64> = (0..n_nodes)
        .map(|i| {
            let l = &cfg.layers[idx[i]];
            let w = if i == 0 || i == n_nodes - 1 { 0.5 * dx } else { dx };
            l.rho * l.cp * w
        })
        .collect();
    let g: Vec<f64> = (0..n_nodes - 1)
        .map(|i| {
            let (a, b) = (cfg.layers[idx[i]].k, cfg.layers[idx[i + 1]].k);
            2.0 * a * b / (a + b) / dx
        })
        .collect();

    let mut temp = vec![cfg.t_init; n_nodes];
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while target - t > 1e-12 {
            let h = dt.min(target - t);
            let q = cfg.flux.integral(t, t + h) / h;
            step(&mut temp, &cap, &g, h, q);
            t += h;
        }
        out.push(temp.clone());
    }
    out
}

fn step(temp: &mut [f64], cap: &[f64], g: &[f64], h: f64, q: f64) {
    let n = temp.len();
    let flow = |t: &[f64], i: usize| {
        let l = if i > 0 { g[i - 1] * (t[i - 1] - t[i]) } else { 0.0 };
        let r = if i + 1 < n { g[i] * (t[i + 1] - t[i]) } else { 0.0 };
        l + r
    };
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 0..n {
        let gl = if i > 0 { g[i - 1] } else { 0.0 };
        let gr = if i + 1 < n { g[i] } else { 0.0 };
        lower[i] = -0.5 * gl;
        upper[i] = -0.5 * gr;
        diag[i] = cap[i] / h + 0.5 * (gl + gr);
        rhs[i] = cap[i] / h * temp[i] + 0.5 * flow(temp, i) + if i == 0 { q } else { 0.0 };
    }
    // Thomas sweep
    for i in 1..n {
        let m = lower[i] / diag[i - 1];
        diag[i] -= m * upper[i - 1];
        rhs[i] -= m * rhs[i - 1];
    }
    temp[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        temp[i] = (rhs[i] - upper[i] * temp[i + 1]) / diag[i];
    }
}

/// Linear interpolation of a nodal field at position `x`.
pub fn at(field: &[f64], total: f64, x: f64) -> f64 {
    let n = field.len();
    let s = (x / total * (n as f64 - 1.0)).clamp(0.0, n as f64 - 1.0);
    let i = (s.floor() as usize).min(n - 2);
    let f = s - i as f64;
    field[i] * (1.0 - f) + field[i + 1] * f
}

pub fn bytes_of_dir(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("inside dir").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}
