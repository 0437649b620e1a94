//! First variation `Φ_{s,t} = ∂X_t/∂X_s` and the Malliavin derivative `D_tX_s`.
//!
//! Every exponential method is a sum of per-step increments of `log Φ`, so
//! `Φ_{s,t} = Φ_{0,t} / Φ_{0,s}` holds by construction and nested estimators
//! can stream inner paths without storing them.

use crate::drift::{odd_tanh, sgn, Drift, DriftSpec, MollifiedSpec};
use crate::error::{Error, Result};
use crate::local_time::{BoxKernel, Lattice};
use crate::sde::{common_noise_map, ControlPolicy, DynDrift, EnsembleConfig, PathCase, PathEnsemble, TimeGrid};
use crate::stats::MeanSe;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Smallest accepted finite-difference step.
pub const MIN_FD_STEP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodTag {
    Ode,
    Localtime,
    CorridorClosedForm,
    FiniteDifference,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Ode => "ode",
            MethodTag::Localtime => "localtime",
            MethodTag::CorridorClosedForm => "corridor-closed-form",
            MethodTag::FiniteDifference => "finite-difference",
        }
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters of the corridor closed form; `b̄2(x) = -max(|x| - ρ, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorridorFlow {
    pub mu: f64,
    pub m: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl CorridorFlow {
    #[inline]
    pub fn bbar2(&self, x: f64) -> f64 {
        -(x.abs() - self.rho).max(0.0)
    }

    /// `log Φ` increment over one step, written with `|x|` so that it is
    /// exactly even under `(x, dB) ↦ (-x, -dB)`.
    #[inline]
    fn increment(&self, dt: f64, x: f64, db: f64, x_next: f64) -> f64 {
        self.increment_with(odd_tanh(x.abs() / self.m), dt, x, db, x_next)
    }

    /// [`Self::increment`] given `th = tanh(|x| / M)`.
    #[inline]
    pub(crate) fn increment_with(&self, th: f64, dt: f64, x: f64, db: f64, x_next: f64) -> f64 {
        let mut bracket = self.bbar2(x_next) - self.bbar2(x);
        if x.abs() > self.rho {
            bracket += self.mu * th * dt - dt + sgn(x) * self.sigma * db;
        }
        self.mu / self.m * (1.0 - th * th) * dt + 2.0 / (self.sigma * self.sigma) * bracket
    }
}

/// Local-time representation with the control frozen per time slice.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeFlow {
    pub spec: DriftSpec,
    kernel: BoxKernel,
    lattice: Lattice,
    densities: bool,
}

impl LocalTimeFlow {
    pub fn new(spec: DriftSpec, dt: f64, eps: f64) -> Result<Self> {
        let kernel = BoxKernel::new(spec.sigma, dt, eps)?;
        let locs: Vec<f64> = spec.b2.atoms().iter().map(|a| a.location).collect();
        let lattice = Lattice::for_bandwidth(eps, &locs);
        let densities = !spec.b2.ac_part().is_none();
        Ok(Self {
            spec,
            kernel,
            lattice,
            densities,
        })
    }

    pub fn bandwidth(&self) -> f64 {
        self.kernel.eps
    }

    /// `∫ db2(y) ΔL(y)` for one step started at `x`.
    #[inline]
    fn measure_increment(&self, x: f64) -> f64 {
        let mut v = 0.0;
        for a in self.spec.b2.atoms() {
            v += a.jump * self.kernel.increment(x, a.location);
        }
        if self.densities {
            let ac = self.spec.b2.ac_part();
            let w = self.kernel.step_weight() * self.lattice.spacing;
            for i in self.lattice.window(x, self.kernel.eps) {
                v += ac.density(self.lattice.node(i)) * w;
            }
        }
        v
    }
}

/// How `log Φ` is accumulated along a path.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowMethod {
    /// `∫ ∂_x b_n(u, X_u, α_u) du` for a mollified spec.
    Ode(MollifiedSpec),
    /// Same quadrature on an unmollified spec whose `b2` has no atoms.
    OdeExact(DriftSpec),
    Localtime(LocalTimeFlow),
    CorridorClosedForm(CorridorFlow),
}

impl FlowMethod {
    pub fn ode_exact(spec: DriftSpec) -> Result<Self> {
        if !spec.b2.atoms().is_empty() {
            return Err(Error::InvalidInput(
                "ode flow needs a drift without jumps; mollify it first".into(),
            ));
        }
        Ok(FlowMethod::OdeExact(spec))
    }

    pub fn tag(&self) -> MethodTag {
        match self {
            FlowMethod::Ode(_) | FlowMethod::OdeExact(_) => MethodTag::Ode,
            FlowMethod::Localtime(_) => MethodTag::Localtime,
            FlowMethod::CorridorClosedForm(_) => MethodTag::CorridorClosedForm,
        }
    }

    /// Closed form requires the control to be `1` wherever the corridor drift acts.
    pub fn check_policy(&self, policy: &ControlPolicy) -> Result<()> {
        if let FlowMethod::CorridorClosedForm(cf) = self {
            let ok = match *policy {
                ControlPolicy::Constant(c) => c == 1.0,
                ControlPolicy::Corridor { rho, sign } => sign == 1.0 && rho == cf.rho,
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "closed-form flow needs alpha = 1 or the optimal corridor control, got {}",
                    policy.id()
                )));
            }
        }
        Ok(())
    }

    /// `log Φ_{t_k, t_{k+1}}` for the step from `x` to `x_next` under control `a`.
    #[inline]
    pub fn increment(&self, t: f64, dt: f64, x: f64, a: f64, db: f64, x_next: f64) -> f64 {
        match self {
            FlowMethod::Ode(m) => m.partial_x(t, x, a) * dt,
            FlowMethod::OdeExact(s) => {
                let d2 = s.b2.density(x);
                let mut v = s.b1_partial_x(t, x);
                if d2 != 0.0 {
                    v += d2 * s.b3.eval(t, a);
                }
                v * dt
            }
            FlowMethod::Localtime(lt) => {
                let s = &lt.spec;
                let mut v = s.b1_partial_x(t, x) * dt;
                let b3 = s.b3.eval(t, a);
                if b3 != 0.0 {
                    v += b3 * lt.measure_increment(x) / (s.sigma * s.sigma);
                }
                v
            }
            FlowMethod::CorridorClosedForm(cf) => cf.increment(dt, x, db, x_next),
        }
    }

    /// Writes `log Φ_{t_start, t_{start+j}}` for `j = 0..=incs.len()` into `out`.
    pub fn accumulate(&self, grid: &TimeGrid, start: usize, states: &[f64], controls: &[f64], incs: &[f64], out: &mut [f64]) {
        let dt = grid.dt();
        let mut acc = 0.0;
        out[0] = 0.0;
        for j in 0..incs.len() {
            acc += self.increment(grid.time(start + j), dt, states[j], controls[j], incs[j], states[j + 1]);
            out[j + 1] = acc;
        }
    }

    /// `log Φ_{t_start, T}` without storing intermediate values.
    #[inline]
    pub fn log_flow(&self, grid: &TimeGrid, start: usize, states: &[f64], controls: &[f64], incs: &[f64]) -> f64 {
        let dt = grid.dt();
        (0..incs.len())
            .map(|j| self.increment(grid.time(start + j), dt, states[j], controls[j], incs[j], states[j + 1]))
            .sum()
    }
}

/// `Φ_{0,t_k}` for every grid node of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationRecord {
    pub path_index: usize,
    pub method: MethodTag,
    pub phi: Vec<f64>,
}

impl VariationRecord {
    /// `Φ_{t_s, t_t}` by ratio reconstruction.
    pub fn between(&self, s: usize, t: usize) -> f64 {
        self.phi[t] / self.phi[s]
    }

    pub fn terminal(&self) -> f64 {
        *self.phi.last().expect("record has at least one node")
    }

    pub fn sup(&self) -> f64 {
        self.phi.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(path_id, s, t, phi, method)` rows with `s = 0`.
    pub fn rows<'a>(&'a self, grid: &'a TimeGrid) -> impl Iterator<Item = (usize, f64, f64, f64, MethodTag)> + 'a {
        self.phi
            .iter()
            .enumerate()
            .map(move |(k, &v)| (self.path_index, 0.0, grid.time(k), v, self.method))
    }
}

/// `Φ_{0,t} = exp(Σ increments)` for every path, after checking the policy is supported.
pub fn first_variation(method: &FlowMethod, ensemble: &PathEnsemble) -> Result<Vec<VariationRecord>> {
    method.check_policy(&ensemble.policy)?;
    let grid = *ensemble.grid();
    Ok((0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let path = ensemble.path(p);
            let mut phi = vec![0.0; grid.steps() + 1];
            method.accumulate(&grid, 0, path.states, path.controls, path.increments, &mut phi);
            phi.iter_mut().for_each(|v| *v = v.exp());
            VariationRecord {
                path_index: p,
                method: method.tag(),
                phi,
            }
        })
        .collect())
}

/// `Φ = exp(∫ {∂_x b1n + b2n' · b3} du)` along each path.
pub fn first_variation_ode(mspec: &MollifiedSpec, ensemble: &PathEnsemble) -> Result<Vec<VariationRecord>> {
    first_variation(&FlowMethod::Ode(mspec.clone()), ensemble)
}

/// `Φ = exp(∫ ∂_x b1 du + σ⁻² ∫ (∫ b3(u, α_u) d_uL(u, y)) db2(y))` along each path.
pub fn first_variation_localtime(spec: &DriftSpec, ensemble: &PathEnsemble, eps: f64) -> Result<Vec<VariationRecord>> {
    let flow = LocalTimeFlow::new(spec.clone(), ensemble.grid().dt(), eps)?;
    first_variation(&FlowMethod::Localtime(flow), ensemble)
}

/// Closed-form corridor exponent under `α ≡ 1` or the optimal corridor control.
pub fn first_variation_corridor_cf(params: &CorridorFlow, ensemble: &PathEnsemble) -> Result<Vec<VariationRecord>> {
    first_variation(&FlowMethod::CorridorClosedForm(*params), ensemble)
}

/// `(X^{x+h}_t - X^{x-h}_t) / 2h` under common noise, with `x = config.x0`.
pub fn finite_difference_flow<D: Drift + ?Sized>(
    drift: &D,
    policy: &ControlPolicy,
    config: &EnsembleConfig,
    h: f64,
) -> Result<Vec<VariationRecord>> {
    if !(h >= MIN_FD_STEP) || !h.is_finite() {
        return Err(Error::config("h", format!("finite-difference step must be at least {MIN_FD_STEP}, got {h}")));
    }
    let dyn_drift = DynDrift(drift);
    let cases = [
        PathCase {
            drift: &dyn_drift,
            policy: *policy,
            x0: config.x0 + h,
        },
        PathCase {
            drift: &dyn_drift,
            policy: *policy,
            x0: config.x0 - h,
        },
    ];
    common_noise_map(&cases, config, |p, v| VariationRecord {
        path_index: p,
        method: MethodTag::FiniteDifference,
        phi: v[0]
            .states
            .iter()
            .zip(v[1].states)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect(),
    })
}

/// `E[sup_t Φ_{0,t}^p]` for each requested `p`.
pub fn sup_moments(records: &[VariationRecord], powers: &[u32]) -> Vec<(u32, MeanSe)> {
    let sups: Vec<f64> = records.iter().map(VariationRecord::sup).collect();
    powers
        .iter()
        .map(|&p| {
            let v: Vec<f64> = sups.iter().map(|s| s.powi(p as i32)).collect();
            (p, MeanSe::of(&v))
        })
        .collect()
}

/// Relative error of ensemble means, `|mean(a) - mean(b)| / |mean(b)|`.
pub fn mean_relative_error(a: &[VariationRecord], b: &[VariationRecord], node: usize) -> f64 {
    let ma = a.iter().map(|r| r.phi[node]).sum::<f64>() / a.len() as f64;
    let mb = b.iter().map(|r| r.phi[node]).sum::<f64>() / b.len() as f64;
    (ma - mb).abs() / mb.abs()
}

/// `s ↦ D_tX_s` for `s ≥ t` on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinRecord {
    pub path_index: usize,
    pub t_node: usize,
    pub method: MethodTag,
    /// Values at nodes `t_node..=steps`.
    pub values: Vec<f64>,
}

/// `D_tX_s = Φ_{t,s} (σ + ∫_t^s b2(X_u) ∂_a b3 D_tα_u Φ_{t,u}^{-1} du)`.
///
/// Only the Brownian-functional policy has a nonzero `D_tα`; feedback
/// controls are frozen, as in the first-variation representation.
pub fn malliavin_derivative(
    spec: &DriftSpec,
    ensemble: &PathEnsemble,
    path_index: usize,
    t_node: usize,
    method: &FlowMethod,
) -> Result<MalliavinRecord> {
    method.check_policy(&ensemble.policy)?;
    let grid = *ensemble.grid();
    if t_node > grid.steps() {
        return Err(Error::InvalidInput(format!("time node {t_node} is beyond the grid")));
    }
    if path_index >= ensemble.n_paths() {
        return Err(Error::InvalidInput(format!("path {path_index} is out of range")));
    }
    let path = ensemble.path(path_index);
    let n = grid.steps() - t_node;
    let states = &path.states[t_node..];
    let controls = &path.controls[t_node..];
    let incs = &path.increments[t_node..];
    let mut log_phi = vec![0.0; n + 1];
    method.accumulate(&grid, t_node, states, controls, incs, &mut log_phi);

    let d_alpha = control_sensitivity(&ensemble.policy, &grid, path.increments, t_node);
    let dt = grid.dt();
    let mut integral = 0.0;
    let mut values = Vec::with_capacity(n + 1);
    for j in 0..=n {
        values.push(log_phi[j].exp() * (spec.sigma + integral));
        if j < n {
            let u = t_node + j;
            let da = d_alpha[j];
            if da != 0.0 {
                let b2 = spec.b2.eval(path.states[u]);
                integral += b2 * spec.b3.partial_a(grid.time(u), path.controls[u]) * da * (-log_phi[j]).exp() * dt;
            }
        }
    }
    Ok(MalliavinRecord {
        path_index,
        t_node,
        method: method.tag(),
        values,
    })
}

/// `D_tα_u` for `u = t_node..steps`.
fn control_sensitivity(policy: &ControlPolicy, grid: &TimeGrid, incs: &[f64], t_node: usize) -> Vec<f64> {
    let n = grid.steps() - t_node;
    if n == 0 || !matches!(policy, ControlPolicy::BrownianFunctional) {
        return vec![0.0; n];
    }
    // α_u = Σ_{r<u} e^{-t_r} / (1 + B_r²) dt, and D_t B_r = 1 for r > t
    let dt = grid.dt();
    let mut b = incs[..=t_node].iter().sum::<f64>();
    let mut out = Vec::with_capacity(n);
    out.push(0.0);
    let mut acc = 0.0;
    for r in t_node + 1..grid.steps() {
        out.push(acc);
        let q = 1.0 + b * b;
        acc += (-grid.time(r)).exp() * (-2.0 * b) / (q * q) * dt;
        b += incs[r];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{corridor_spec, mollify, BvFunction, ControlFactor, SmoothBoundedFn};
    use crate::sde::simulate;

    fn grid() -> TimeGrid {
        TimeGrid::from_dt(5.0, 0.005).unwrap()
    }

    fn cf() -> CorridorFlow {
        CorridorFlow {
            mu: 0.5,
            m: 4.0,
            rho: 2.0,
            sigma: 1.0,
        }
    }

    #[test]
    fn bbar2_values() {
        assert_eq!(cf().bbar2(3.0), -1.0);
        assert_eq!(cf().bbar2(-3.0), -1.0);
        assert_eq!(cf().bbar2(1.5), 0.0);
    }

    #[test]
    fn zero_drift_gives_unit_flow() {
        let spec = DriftSpec::zero(1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 8, 1);
        let e = simulate(&spec, &ControlPolicy::Constant(0.0), &cfg).unwrap();
        for r in first_variation_ode(&mollify(&spec, 10), &e).unwrap() {
            assert!(r.phi.iter().all(|&v| v == 1.0));
        }
        for r in first_variation_localtime(&spec, &e, 0.1).unwrap() {
            assert!(r.phi.iter().all(|&v| v == 1.0));
        }
        for r in finite_difference_flow(&spec, &ControlPolicy::Constant(0.0), &cfg, 0.3).unwrap() {
            assert!(r.phi.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        }
        let m = malliavin_derivative(&spec, &e, 0, 100, &FlowMethod::ode_exact(spec.clone()).unwrap()).unwrap();
        assert!(m.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fd_step_rejected() {
        let spec = DriftSpec::zero(1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 2, 1);
        assert!(finite_difference_flow(&spec, &ControlPolicy::Constant(0.0), &cfg, 1e-9).is_err());
        assert!(finite_difference_flow(&spec, &ControlPolicy::Constant(0.0), &cfg, f64::NAN).is_err());
    }

    #[test]
    fn closed_form_constant_path() {
        // σ → 0 at the origin: exp(μT/M)
        let flow = CorridorFlow { sigma: 1e-12, ..cf() };
        let g = grid();
        let n = g.steps();
        let states = vec![0.0; n + 1];
        let zeros = vec![0.0; n];
        let v = FlowMethod::CorridorClosedForm(flow).log_flow(&g, 0, &states, &zeros, &zeros).exp();
        assert!((v - 0.625f64.exp()).abs() < 1e-12);
        assert!((v - 1.86825).abs() < 1e-5);
    }

    #[test]
    fn closed_form_inside_corridor_reduces_to_b1() {
        let spec = corridor_spec(0.5, 4.0, 50.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 4, 3);
        let e = simulate(&spec, &ControlPolicy::Constant(1.0), &cfg).unwrap();
        let flow = CorridorFlow { rho: 50.0, ..cf() };
        let recs = first_variation_corridor_cf(&flow, &e).unwrap();
        let ode = first_variation_ode(&mollify(&DriftSpec::new(spec.b1.clone(), BvFunction::zero(), ControlFactor::Identity, 1.0).unwrap(), 1000), &e).unwrap();
        for (a, b) in recs.iter().zip(&ode) {
            assert!((a.terminal() / b.terminal() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_form_rejects_other_policies() {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 2, 3);
        let e = simulate(&spec, &ControlPolicy::RationalX, &cfg).unwrap();
        assert!(first_variation_corridor_cf(&cf(), &e).is_err());
    }

    #[test]
    fn cocycle_and_positivity() {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 4, 5);
        let e = simulate(&spec, &ControlPolicy::Constant(1.0), &cfg).unwrap();
        let recs = first_variation_corridor_cf(&cf(), &e).unwrap();
        let mut log = vec![0.0; grid().steps() + 1];
        for r in &recs {
            assert!(r.phi.iter().all(|&v| v > 0.0));
            let p = e.path(r.path_index);
            for s in [0usize, 17, 400, 999] {
                FlowMethod::CorridorClosedForm(cf()).accumulate(&grid(), s, &p.states[s..], &p.controls[s..], &p.increments[s..], &mut log);
                for t in [s, s + 1, 1000] {
                    let direct = log[t - s].exp();
                    assert!((r.between(s, t) / direct - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn malliavin_starts_at_sigma() {
        let spec = DriftSpec::new(
            SmoothBoundedFn::Tanh {
                amplitude: 0.5,
                scale: 4.0,
            },
            BvFunction::corridor(1.0),
            ControlFactor::Identity,
            0.7,
        )
        .unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 3, 9);
        let e = simulate(&spec, &ControlPolicy::BrownianFunctional, &cfg).unwrap();
        let method = FlowMethod::Localtime(LocalTimeFlow::new(spec.clone(), grid().dt(), 0.1).unwrap());
        for t in [0usize, 250, 1000] {
            let m = malliavin_derivative(&spec, &e, 1, t, &method).unwrap();
            assert_eq!(m.values[0], 0.7);
            assert_eq!(m.values.len(), grid().steps() - t + 1);
        }
    }

    #[test]
    fn control_sensitivity_matches_bump() {
        use crate::sde::PolicyState;
        let g = TimeGrid::new(1.0, 200).unwrap();
        let cfg = EnsembleConfig::new(g, 0.0, 1, 4);
        let mut incs = vec![0.0; g.steps()];
        cfg.fill_increments(0, &mut incs);
        let alphas = |incs: &[f64]| {
            let pol = ControlPolicy::BrownianFunctional;
            let mut st = PolicyState::default();
            let mut out = Vec::new();
            for (k, &db) in incs.iter().enumerate() {
                out.push(pol.eval(g.time(k), 0.0, &st));
                pol.update(&mut st, g.time(k), g.dt(), db);
            }
            out
        };
        let t = 60;
        let delta = 1e-6;
        let mut bumped = incs.clone();
        bumped[t] += delta;
        let up = alphas(&bumped);
        bumped[t] -= 2.0 * delta;
        let down = alphas(&bumped);
        let d = control_sensitivity(&ControlPolicy::BrownianFunctional, &g, &incs, t);
        for (j, dj) in d.iter().enumerate() {
            let fd = (up[t + j] - down[t + j]) / (2.0 * delta);
            assert!((fd - dj).abs() < 1e-8, "node {j}: {fd} vs {dj}");
        }
        assert_eq!(d[1], 0.0);
        assert!(d[100] != 0.0);
    }
}
