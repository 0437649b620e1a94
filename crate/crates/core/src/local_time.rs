//! Occupation-density estimates of semimartingale local time and the
//! space–time integral `∫∫ A1(y) A2(s) L(ds, dy)`.
//!
//! Local time uses the Tanaka normalization, so `∫ L(T, y) dy = σ² T` and
//! `L(t, y) ≈ σ²/(2ε) · |{s ≤ t : |X_s - y| < ε}|`.

use crate::drift::{sgn, BvFunction};
use crate::error::{require_positive, Result};
use crate::sde::{PathEnsemble, PathView, TimeGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Multiplier on `σ √dt` (together with the 0.5 prefactor) for the default bandwidth.
pub const DEFAULT_KAPPA: f64 = 2.0;

/// `ε = 0.5 · σ · √dt · κ` with the default `κ`.
pub fn default_bandwidth(sigma: f64, dt: f64) -> f64 {
    bandwidth(sigma, dt, DEFAULT_KAPPA)
}

pub fn bandwidth(sigma: f64, dt: f64, kappa: f64) -> f64 {
    0.5 * sigma * dt.sqrt() * kappa
}

/// Box kernel of half-width `ε`; each step near `y` adds `σ² dt / (2ε)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxKernel {
    pub eps: f64,
    weight: f64,
}

impl BoxKernel {
    pub fn new(sigma: f64, dt: f64, eps: f64) -> Result<Self> {
        require_positive("bandwidth", eps)?;
        Ok(Self {
            eps,
            weight: sigma * sigma * dt / (2.0 * eps),
        })
    }

    /// Local-time increment over one step starting at `x`, at level `y`.
    #[inline]
    pub fn increment(&self, x: f64, y: f64) -> f64 {
        if (x - y).abs() < self.eps {
            self.weight
        } else {
            0.0
        }
    }

    #[inline]
    pub fn step_weight(&self) -> f64 {
        self.weight
    }
}

/// Uniform spatial lattice `y_i = origin + i · spacing`, `i ∈ ℤ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub origin: f64,
    pub spacing: f64,
}

impl Lattice {
    /// Spacing `ε/2`; shifted by a quarter cell if any `avoid` point falls on
    /// a node or a cell midpoint.
    pub fn for_bandwidth(eps: f64, avoid: &[f64]) -> Self {
        let spacing = 0.5 * eps;
        let on_node = |origin: f64| {
            avoid.iter().any(|&a| {
                let r = 2.0 * (a - origin) / spacing;
                (r - r.round()).abs() < 1e-9
            })
        };
        let origin = if on_node(0.0) { 0.25 * spacing } else { 0.0 };
        Self { origin, spacing }
    }

    #[inline]
    pub fn node(&self, i: i64) -> f64 {
        self.origin + i as f64 * self.spacing
    }

    /// Node indices strictly within `eps` of `x`.
    #[inline]
    pub fn window(&self, x: f64, eps: f64) -> std::ops::RangeInclusive<i64> {
        let mut lo = ((x - eps - self.origin) / self.spacing).ceil() as i64;
        let mut hi = ((x + eps - self.origin) / self.spacing).floor() as i64;
        if (x - self.node(lo)).abs() >= eps {
            lo += 1;
        }
        if (self.node(hi) - x).abs() >= eps {
            hi -= 1;
        }
        lo..=hi
    }
}

/// `t ↦ L̂(t, y)` on the time grid for a fixed level.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeCurve {
    pub level: f64,
    pub bandwidth: f64,
    pub values: Vec<f64>,
    /// Bandwidth is below the typical step displacement `σ √dt`.
    pub undersmoothed: bool,
}

impl LocalTimeCurve {
    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("curve has at least one node")
    }
}

pub fn estimate_local_time(path: &PathView<'_>, sigma: f64, y: f64, eps: f64) -> Result<LocalTimeCurve> {
    let dt = path.grid.dt();
    let kernel = BoxKernel::new(sigma, dt, eps)?;
    let mut values = Vec::with_capacity(path.states.len());
    let mut acc = 0.0;
    values.push(acc);
    for &x in &path.states[..path.states.len() - 1] {
        acc += kernel.increment(x, y);
        values.push(acc);
    }
    Ok(LocalTimeCurve {
        level: y,
        bandwidth: eps,
        values,
        undersmoothed: eps < sigma * dt.sqrt(),
    })
}

/// `|X_T - y| - |x0 - y| - Σ sgn(X_k - y)(X_{k+1} - X_k) - L̂(T, y)`.
pub fn tanaka_residual(path: &PathView<'_>, sigma: f64, y: f64, eps: f64) -> Result<f64> {
    let curve = estimate_local_time(path, sigma, y, eps)?;
    let s = path.states;
    let ito: f64 = s.windows(2).map(|w| sgn(w[0] - y) * (w[1] - w[0])).sum();
    Ok((s[s.len() - 1] - y).abs() - (s[0] - y).abs() - ito - curve.terminal())
}

/// `L̂(t_j, y_i)` for one path on the lattice nodes covering its range.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeField {
    pub lattice: Lattice,
    /// Index of the first stored lattice node.
    pub first_node: i64,
    pub n_levels: usize,
    pub grid: TimeGrid,
    pub bandwidth: f64,
    pub sigma: f64,
    pub path_index: usize,
    /// Row-major `[time node][level]`.
    values: Vec<f64>,
    states: Vec<f64>,
}

impl LocalTimeField {
    /// Builds the field on a lattice of spacing `ε/2` spanning the path range
    /// padded by `3ε`; `atoms` are kept off the lattice nodes.
    pub fn estimate(path: &PathView<'_>, path_index: usize, sigma: f64, eps: f64, atoms: &[f64]) -> Result<Self> {
        let grid = *path.grid;
        let kernel = BoxKernel::new(sigma, grid.dt(), eps)?;
        let lattice = Lattice::for_bandwidth(eps, atoms);
        let (lo, hi) = path
            .states
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let first_node = ((lo - 3.0 * eps - lattice.origin) / lattice.spacing).floor() as i64;
        let last_node = ((hi + 3.0 * eps - lattice.origin) / lattice.spacing).ceil() as i64;
        let n_levels = (last_node - first_node + 1) as usize;
        let rows = grid.steps() + 1;
        let mut values = vec![0.0; rows * n_levels];
        for k in 0..grid.steps() {
            let (prev, next) = values.split_at_mut((k + 1) * n_levels);
            let next = &mut next[..n_levels];
            next.copy_from_slice(&prev[k * n_levels..]);
            for i in lattice.window(path.states[k], eps) {
                next[(i - first_node) as usize] += kernel.step_weight();
            }
        }
        Ok(Self {
            lattice,
            first_node,
            n_levels,
            grid,
            bandwidth: eps,
            sigma,
            path_index,
            values,
            states: path.states.to_vec(),
        })
    }

    pub fn level(&self, i: usize) -> f64 {
        self.lattice.node(self.first_node + i as i64)
    }

    /// `L̂(t_j, y_i)` for stored index `i`; zero outside the stored range.
    #[inline]
    pub fn value(&self, j: usize, i: i64) -> f64 {
        if i < 0 || i as usize >= self.n_levels {
            0.0
        } else {
            self.values[j * self.n_levels + i as usize]
        }
    }

    /// Levels at the final time.
    pub fn terminal_profile(&self) -> &[f64] {
        let j = self.grid.steps();
        &self.values[j * self.n_levels..(j + 1) * self.n_levels]
    }

    /// `Σ_i L̂(T, y_i) Δy`, which should be close to `σ² T`.
    pub fn occupation_integral(&self) -> f64 {
        self.terminal_profile().iter().sum::<f64>() * self.lattice.spacing
    }

    /// `t ↦ L̂(t, y)` at an arbitrary level, from the stored path.
    pub fn curve_at(&self, y: f64) -> LocalTimeCurve {
        let view = PathView {
            grid: &self.grid,
            states: &self.states,
            increments: &[],
            controls: &[],
        };
        estimate_local_time(&view, self.sigma, y, self.bandwidth).expect("bandwidth validated at construction")
    }

    /// Rows `(t, y, L)` for export.
    pub fn rows(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        (0..=self.grid.steps()).flat_map(move |j| {
            (0..self.n_levels).map(move |i| (self.grid.time(j), self.level(i), self.value(j, i as i64)))
        })
    }
}

/// `A(s, y) = A1(y) · A2(s)` with `A2` sampled at the time nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeIntegrand {
    pub a1: BvFunction,
    pub a2: Vec<f64>,
}

impl SpaceTimeIntegrand {
    pub fn constant_in_time(a1: BvFunction, grid: &TimeGrid) -> Self {
        Self {
            a1,
            a2: vec![1.0; grid.steps() + 1],
        }
    }
}

/// Integration region `[y_lo, y_hi] × [0, t_{end_node}]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub y_lo: f64,
    pub y_hi: f64,
    pub end_node: usize,
}

impl Region {
    pub fn full(grid: &TimeGrid) -> Self {
        Self {
            y_lo: f64::NEG_INFINITY,
            y_hi: f64::INFINITY,
            end_node: grid.steps(),
        }
    }
}

/// Midpoint Riemann sum of `A1 A2` against the mixed second differences of `L̂`
/// over the cells `[y_i, y_{i+1}] × [s_j, s_{j+1}]`.
pub fn spacetime_integral_grid(integrand: &SpaceTimeIntegrand, field: &LocalTimeField, region: &Region) -> f64 {
    let n = field.n_levels as i64;
    // one extra level on each side so that boundary differences are included
    let levels: Vec<(i64, f64)> = (-1..=n)
        .filter_map(|i| {
            let y = field.lattice.node(field.first_node + i) + 0.5 * field.lattice.spacing;
            (y >= region.y_lo && y <= region.y_hi).then(|| (i, integrand.a1.eval(y)))
        })
        .collect();
    let mut total = 0.0;
    for j in 0..region.end_node.min(field.grid.steps()) {
        let a2 = integrand.a2[j];
        if a2 == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for &(i, a1) in &levels {
            let d = field.value(j + 1, i + 1) - field.value(j, i + 1) - field.value(j + 1, i) + field.value(j, i);
            row += a1 * d;
        }
        total += a2 * row;
    }
    total
}

/// `Σ_{j < end} A2(s_j) (L̂(s_{j+1}, ·) - L̂(s_j, ·))` from a curve.
fn stieltjes(curve: &LocalTimeCurve, a2: &[f64], end_node: usize) -> f64 {
    curve.values[..=end_node]
        .windows(2)
        .zip(a2)
        .map(|(w, a)| a * (w[1] - w[0]))
        .sum()
}

/// `-∫ (∫ A2 d_s L̂(s, y)) dA1(y)`, atoms evaluated at their exact locations.
pub fn spacetime_integral_ibp(integrand: &SpaceTimeIntegrand, field: &LocalTimeField, region: &Region) -> f64 {
    let (atoms, ac) = integrand.a1.derivative_measure();
    let end = region.end_node.min(field.grid.steps());
    let inside = |y: f64| y >= region.y_lo && y <= region.y_hi;
    let mut total = 0.0;
    for a in atoms.iter().filter(|a| inside(a.location)) {
        total += a.jump * stieltjes(&field.curve_at(a.location), &integrand.a2, end);
    }
    if !ac.is_none() {
        for i in 0..field.n_levels {
            let y = field.level(i);
            if !inside(y) {
                continue;
            }
            let d = ac.density(y);
            if d == 0.0 {
                continue;
            }
            let lambda: f64 = (0..end)
                .map(|j| integrand.a2[j] * (field.value(j + 1, i as i64) - field.value(j, i as i64)))
                .sum();
            total += d * lambda * field.lattice.spacing;
        }
    }
    -total
}

/// Agreement of the space–time integral of `φ(y)ψ(s)` with `-σ² ∫ φ'(X_s) ψ(s) ds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub grid_mean: f64,
    pub ibp_mean: f64,
    pub rhs_mean: f64,
    /// `Σ_paths |grid - rhs| / Σ_paths |rhs|`.
    pub rel_err: f64,
    /// `Σ_paths |grid - ibp| / Σ_paths |ibp|`.
    pub grid_vs_ibp_rel_err: f64,
}

fn l1_ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn smooth_identity_check<P>(phi: &BvFunction, psi: P, ensemble: &PathEnsemble, sigma: f64, eps: f64) -> Result<IdentityCheck>
where
    P: Fn(f64) -> f64 + Sync,
{
    let grid = *ensemble.grid();
    let a2: Vec<f64> = (0..=grid.steps()).map(|k| psi(grid.time(k))).collect();
    let integrand = SpaceTimeIntegrand { a1: phi.clone(), a2 };
    let region = Region::full(&grid);
    let dt = grid.dt();
    let per_path: Vec<(f64, f64, f64)> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let path = ensemble.path(p);
            let field = LocalTimeField::estimate(&path, p, sigma, eps, &[])?;
            let grid_v = spacetime_integral_grid(&integrand, &field, &region);
            let ibp_v = spacetime_integral_ibp(&integrand, &field, &region);
            let rhs: f64 = -sigma
                * sigma
                * path.states[..grid.steps()]
                    .iter()
                    .enumerate()
                    .map(|(k, &x)| phi.density(x) * integrand.a2[k] * dt)
                    .sum::<f64>();
            Ok((grid_v, ibp_v, rhs))
        })
        .collect::<Result<_>>()?;
    let n = per_path.len() as f64;
    let sum = |f: &dyn Fn(&(f64, f64, f64)) -> f64| per_path.iter().map(f).sum::<f64>();
    Ok(IdentityCheck {
        grid_mean: sum(&|v| v.0) / n,
        ibp_mean: sum(&|v| v.1) / n,
        rhs_mean: sum(&|v| v.2) / n,
        rel_err: l1_ratio(sum(&|v| (v.0 - v.2).abs()), sum(&|v| v.2.abs())),
        grid_vs_ibp_rel_err: l1_ratio(sum(&|v| (v.0 - v.1).abs()), sum(&|v| v.1.abs())),
    })
}
