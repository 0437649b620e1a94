//! Hamiltonian, adjoint process `Y_t = E[Φ_{t,T} g'(X_T) + ∫_t^T Φ_{t,s} ∂_x f ds | X_t]`
//! and empirical checks of the maximum principle.

use crate::drift::{corridor_spec, odd_tanh, sgn, Drift, DriftSpec};
use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::sde::{run_lanes, run_path, ControlPolicy, PathEnsemble, PolicyState, TimeGrid, LANES};
use crate::stats::{MeanSe, Z95};
use crate::variation::{CorridorFlow, FlowMethod};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Below this many inner paths the nested estimator is flagged as noisy.
pub const MIN_INNER_PATHS: usize = 100;
/// Regression needs at least this many samples per basis function.
pub const SAMPLES_PER_BASIS: usize = 50;
const MAX_CONDITION: f64 = 1e12;

/// `f(t, x, a) = q_x x² + q_a a²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RunningCost {
    Zero,
    Quadratic { state_weight: f64, control_weight: f64 },
}

impl RunningCost {
    pub fn eval(&self, _t: f64, x: f64, a: f64) -> f64 {
        match *self {
            RunningCost::Zero => 0.0,
            RunningCost::Quadratic {
                state_weight,
                control_weight,
            } => state_weight * x * x + control_weight * a * a,
        }
    }

    #[inline]
    pub fn partial_x(&self, _t: f64, x: f64, _a: f64) -> f64 {
        match *self {
            RunningCost::Zero => 0.0,
            RunningCost::Quadratic { state_weight, .. } => 2.0 * state_weight * x,
        }
    }

    pub fn partial_a(&self, _t: f64, _x: f64, a: f64) -> f64 {
        match *self {
            RunningCost::Zero => 0.0,
            RunningCost::Quadratic { control_weight, .. } => 2.0 * control_weight * a,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, RunningCost::Zero)
    }
}

/// Terminal cost `g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TerminalCost {
    /// `w x²`.
    Quadratic { weight: f64 },
    /// `c x`.
    Linear { slope: f64 },
}

impl TerminalCost {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            TerminalCost::Quadratic { weight } => weight * x * x,
            TerminalCost::Linear { slope } => slope * x,
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            TerminalCost::Quadratic { weight } => 2.0 * weight * x,
            TerminalCost::Linear { slope } => slope,
        }
    }
}

/// `H(t, x, y, a) = f(t, x, a) + b(t, x, a) y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hamiltonian {
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub drift: DriftSpec,
}

impl Hamiltonian {
    /// The corridor problem: `f ≡ 0`, `g = x²`.
    pub fn terminal_quadratic(drift: DriftSpec) -> Self {
        Self {
            running: RunningCost::Zero,
            terminal: TerminalCost::Quadratic { weight: 1.0 },
            drift,
        }
    }

    pub fn eval(&self, t: f64, x: f64, y: f64, a: f64) -> f64 {
        self.running.eval(t, x, a) + self.drift.drift(t, x, a) * y
    }

    /// `∂_a H = ∂_a f + b2(x) ∂_a b3(t, a) y`.
    pub fn partial_a(&self, t: f64, x: f64, y: f64, a: f64) -> f64 {
        self.running.partial_a(t, x, a) + self.drift.b2.eval(x) * self.drift.b3.partial_a(t, a) * y
    }

    /// Smallest `C` with `|f| + |∂_x f| + |∂_a f| ≤ C (1 + x² + a²)` on the samples.
    pub fn growth_constant(&self, samples: &[(f64, f64, f64)]) -> f64 {
        samples
            .iter()
            .map(|&(t, x, a)| {
                let r = &self.running;
                (r.eval(t, x, a).abs() + r.partial_x(t, x, a).abs() + r.partial_a(t, x, a).abs()) / (1.0 + x * x + a * a)
            })
            .fold(0.0, f64::max)
    }
}

/// One adjoint value at an outer path and grid node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointSample {
    pub path: usize,
    pub node: usize,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub std_error: f64,
}

/// Polynomial fit of the payoff on standardized `X_t` with HC0 covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    pub center: f64,
    pub scale: f64,
    pub degree: usize,
    pub coeffs: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PolyFit {
    fn basis(&self, x: f64) -> DVector<f64> {
        basis_row((x - self.center) / self.scale, self.degree)
    }

    /// Fitted value and its standard error.
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let phi = self.basis(x);
        let var = (phi.transpose() * &self.covariance * &phi)[(0, 0)];
        (self.coeffs.dot(&phi), var.max(0.0).sqrt())
    }
}

/// Polynomials of degree `degree`, fitted separately between consecutive `knots`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub knots: Vec<f64>,
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            degree,
            knots: Vec::new(),
        }
    }

    /// Knots at the jump locations of `b2`, where the adjoint has kinks.
    pub fn for_drift(spec: &DriftSpec, degree: usize) -> Self {
        Self {
            degree,
            knots: spec.b2.atoms().iter().map(|a| a.location).collect(),
        }
    }

    fn region(&self, x: f64) -> usize {
        self.knots.iter().filter(|&&k| k < x).count()
    }
}

/// Piecewise fit at one node; pieces are independent least-squares problems.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub node: usize,
    pub basis: RegressionBasis,
    /// `(region index, fit)` for every region that contains samples.
    pub pieces: Vec<(usize, PolyFit)>,
}

impl RegressionFit {
    /// Index into `pieces` for `x`; empty regions borrow the nearest piece.
    fn piece_index(&self, x: f64) -> usize {
        let r = self.basis.region(x);
        (0..self.pieces.len())
            .min_by_key(|&i| self.pieces[i].0.abs_diff(r))
            .expect("fit has at least one piece")
    }

    pub fn predict(&self, x: f64) -> (f64, f64) {
        self.pieces[self.piece_index(x)].1.predict(x)
    }

    /// Mean of the fitted values at `xs` with its standard error.
    pub fn mean_prediction(&self, xs: &[f64]) -> (f64, f64) {
        let m = xs.len() as f64;
        let (mut mean, mut var) = (0.0, 0.0);
        for (i, (_, fit)) in self.pieces.iter().enumerate() {
            let mut w = DVector::zeros(fit.degree + 1);
            for &x in xs.iter().filter(|&&x| self.piece_index(x) == i) {
                w += fit.basis(x);
            }
            w /= m;
            mean += fit.coeffs.dot(&w);
            var += (w.transpose() * &fit.covariance * &w)[(0, 0)];
        }
        (mean, var.max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdjointMethod {
    Nested { inner_paths: usize },
    Regression { degree: usize, knots: Vec<f64> },
}

impl AdjointMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            AdjointMethod::Nested { .. } => "nested",
            AdjointMethod::Regression { .. } => "regression",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointEstimate {
    pub method: AdjointMethod,
    pub samples: Vec<AdjointSample>,
    /// Regression only: one fit per sampled node (`None` at the terminal node).
    pub fits: Vec<Option<RegressionFit>>,
    /// Nodes whose basis degree was lowered for conditioning or sample size.
    pub reduced_nodes: Vec<usize>,
    pub warnings: Vec<String>,
}

impl AdjointEstimate {
    pub fn at_node(&self, node: usize) -> impl Iterator<Item = &AdjointSample> {
        self.samples.iter().filter(move |s| s.node == node)
    }
}

/// `count` uniformly spaced nodes from `0` to `steps`.
pub fn sample_nodes(grid: &TimeGrid, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![grid.steps()];
    }
    let mut nodes: Vec<usize> = (0..count)
        .map(|i| ((i as f64) * grid.steps() as f64 / (count - 1) as f64).round() as usize)
        .collect();
    nodes.dedup();
    nodes
}

/// Control at node `k`, evaluated from the state when `k` is the terminal node.
fn control_at(ensemble: &PathEnsemble, p: usize, k: usize) -> f64 {
    let controls = ensemble.controls(p);
    if k < controls.len() {
        controls[k]
    } else {
        ensemble
            .policy
            .eval(ensemble.grid().time(k), ensemble.states(p)[k], &PolicyState::default())
    }
}

/// Streams one path's `Φ_{t,T} g'(X_T) + Σ Φ_{t,s} ∂_x f dt` from node `start`.
fn pathwise_payoff(
    h: &Hamiltonian,
    method: &FlowMethod,
    grid: &TimeGrid,
    start: usize,
    states: &[f64],
    controls: &[f64],
    incs: &[f64],
) -> (f64, f64) {
    if h.running.is_zero() {
        let log_phi = method.log_flow(grid, start, states, controls, incs);
        let phi = log_phi.exp();
        return (phi * h.terminal.derivative(states[incs.len()]), phi);
    }
    let dt = grid.dt();
    let mut log_phi = 0.0f64;
    let mut running = 0.0;
    for j in 0..incs.len() {
        let t = grid.time(start + j);
        running += log_phi.exp() * h.running.partial_x(t, states[j], controls[j]) * dt;
        log_phi += method.increment(t, dt, states[j], controls[j], incs[j], states[j + 1]);
    }
    let phi = log_phi.exp();
    (phi * h.terminal.derivative(states[incs.len()]) + running, phi)
}

/// Inner-stream key for nested estimates; `purpose` separates independent uses.
pub(crate) fn inner_key(seed: u64, purpose: u64, outer: usize, node: usize) -> StreamKey {
    StreamKey::derive(seed, &[purpose, outer as u64, node as u64])
}

const PURPOSE_ADJOINT: u64 = 0;
const PURPOSE_SYMMETRY: u64 = 1;

struct InnerBuffers {
    incs: Vec<f64>,
    states: Vec<f64>,
    controls: Vec<f64>,
}

impl InnerBuffers {
    fn new(steps: usize) -> Self {
        Self {
            incs: vec![0.0; LANES * steps],
            states: vec![0.0; LANES * (steps + 1)],
            controls: vec![0.0; LANES * steps],
        }
    }
}

/// What an inner path contributes to a nested average.
#[derive(Clone, Copy)]
enum InnerPayoff<'a> {
    /// Function of the inner path `(states, controls, increments)`.
    Path(&'a (dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Sync)),
    /// Function of `(log Φ_{t,T}, X_T)`.
    Terminal(&'a (dyn Fn(f64, f64) -> f64 + Sync)),
}

/// Inner-path simulation for nested estimators.
struct InnerSim<'a> {
    drift: &'a DriftSpec,
    policy: ControlPolicy,
    grid: TimeGrid,
    method: &'a FlowMethod,
    mirrored: bool,
    /// Set when the corridor dynamics and closed-form flow can share one pass.
    fused: Option<CorridorFlow>,
}

impl<'a> InnerSim<'a> {
    fn new(drift: &'a DriftSpec, policy: ControlPolicy, grid: TimeGrid, method: &'a FlowMethod, mirrored: bool) -> Self {
        let fused = match method {
            FlowMethod::CorridorClosedForm(cf)
                if corridor_spec(cf.mu, cf.m, cf.rho, cf.sigma).is_ok_and(|c| c == *drift) =>
            {
                Some(*cf)
            }
            _ => None,
        };
        Self {
            drift,
            policy,
            grid,
            method,
            mirrored,
            fused,
        }
    }

    /// Mean and SE of `payoff` over `inner` sub-paths started at `(t_node, x)`.
    fn mean(&self, key: &StreamKey, node: usize, x: f64, inner: usize, buf: &mut InnerBuffers, payoff: InnerPayoff<'_>) -> Result<MeanSe> {
        let grid = &self.grid;
        let n = grid.steps() - node;
        let dt = grid.dt();
        let mut values = Vec::with_capacity(inner);
        let full = inner / LANES * LANES;
        let incs = &mut buf.incs[..LANES * n];
        let states = &mut buf.states[..LANES * (n + 1)];
        let controls = &mut buf.controls[..LANES * n];
        for base in (0..full).step_by(LANES) {
            for (l, chunk) in incs.chunks_mut(n).enumerate() {
                key.fill_increments((base + l) as u64, dt, self.mirrored, chunk);
            }
            match (payoff, self.fused) {
                (InnerPayoff::Terminal(f), Some(cf)) => {
                    let (log_phi, x_t) = self.fused_lanes(&cf, node, x, incs).map_err(|(l, step)| Error::NonFinite { path: base + l, step })?;
                    values.extend((0..LANES).map(|l| f(log_phi[l], x_t[l])));
                }
                _ => {
                    run_lanes(self.drift, &self.policy, grid, node, x, incs, states, controls)
                        .map_err(|(l, step)| Error::NonFinite { path: base + l, step })?;
                    for l in 0..LANES {
                        values.push(self.evaluate(
                            payoff,
                            node,
                            &states[l * (n + 1)..(l + 1) * (n + 1)],
                            &controls[l * n..(l + 1) * n],
                            &incs[l * n..(l + 1) * n],
                        ));
                    }
                }
            }
        }
        for j in full..inner {
            let (incs, states, controls) = (&mut incs[..n], &mut states[..n + 1], &mut controls[..n]);
            key.fill_increments(j as u64, dt, self.mirrored, incs);
            run_path(self.drift, &self.policy, grid, node, x, incs, states, controls)
                .map_err(|step| Error::NonFinite { path: j, step })?;
            values.push(self.evaluate(payoff, node, states, controls, incs));
        }
        Ok(MeanSe::of(&values))
    }

    fn evaluate(&self, payoff: InnerPayoff<'_>, node: usize, states: &[f64], controls: &[f64], incs: &[f64]) -> f64 {
        match payoff {
            InnerPayoff::Path(f) => f(states, controls, incs),
            InnerPayoff::Terminal(f) => f(self.method.log_flow(&self.grid, node, states, controls, incs), states[incs.len()]),
        }
    }

    /// Corridor dynamics and closed-form `log Φ` in one pass, sharing `tanh(|x|/M)`.
    /// Matches `run_lanes` followed by `FlowMethod::log_flow` bit for bit.
    fn fused_lanes(&self, cf: &CorridorFlow, node: usize, x0: f64, incs: &[f64]) -> std::result::Result<([f64; LANES], [f64; LANES]), (usize, usize)> {
        let grid = &self.grid;
        let n = incs.len() / LANES;
        let dt = grid.dt();
        let sigma = self.drift.sigma;
        let state = PolicyState::default();
        let mut x = [x0; LANES];
        let mut log_phi = [0.0; LANES];
        for j in 0..n {
            let t = grid.time(node + j);
            for l in 0..LANES {
                let xl = x[l];
                let db = incs[l * n + j];
                let a = self.policy.eval(t, xl, &state);
                let th = odd_tanh(xl.abs() / cf.m);
                let b2 = self.drift.b2.eval(xl);
                let mut b = cf.mu * th.copysign(xl / cf.m);
                if b2 != 0.0 {
                    b += b2 * a;
                }
                let next = xl + (b * dt + sigma * db);
                log_phi[l] += cf.increment_with(th, dt, xl, db, next);
                x[l] = next;
            }
            if let Some(l) = x.iter().position(|v| !v.is_finite()) {
                return Err((l, node + j));
            }
        }
        Ok((log_phi, x))
    }
}

/// Nested Monte Carlo: `inner_paths` sub-simulations from each `(X_t, t)`.
///
/// Inner streams are keyed by `(seed, outer path, node)` and follow the
/// ensemble's mirror flag, so mirrored ensembles see negated inner noise.
pub fn estimate_adjoint_nested(
    h: &Hamiltonian,
    ensemble: &PathEnsemble,
    nodes: &[usize],
    paths: &[usize],
    inner_paths: usize,
    method: &FlowMethod,
    seed: u64,
) -> Result<AdjointEstimate> {
    let policy = ensemble.policy;
    if !policy.is_markov() {
        return Err(Error::InvalidInput(format!(
            "nested adjoint needs a Markov feedback policy, got {}",
            policy.id()
        )));
    }
    if inner_paths == 0 {
        return Err(Error::config("inner_paths", "must be at least 1"));
    }
    method.check_policy(&policy)?;
    let grid = *ensemble.grid();
    check_nodes(&grid, nodes)?;
    if let Some(&p) = paths.iter().find(|&&p| p >= ensemble.n_paths()) {
        return Err(Error::InvalidInput(format!("outer path {p} is out of range")));
    }
    let mut warnings = Vec::new();
    if inner_paths < MIN_INNER_PATHS {
        warnings.push(format!(
            "{inner_paths} inner paths is below {MIN_INNER_PATHS}; nested estimates will be noisy"
        ));
    }
    let sim = InnerSim::new(&h.drift, policy, grid, method, ensemble.config.mirrored);
    let terminal = |log_phi: f64, x_t: f64| log_phi.exp() * h.terminal.derivative(x_t);
    let jobs: Vec<(usize, usize)> = paths.iter().flat_map(|&p| nodes.iter().map(move |&k| (p, k))).collect();
    let samples = jobs
        .par_iter()
        .map_init(
            || InnerBuffers::new(grid.steps()),
            |buf, &(p, k)| {
                let x = ensemble.states(p)[k];
                let t = grid.time(k);
                if k == grid.steps() {
                    return Ok(AdjointSample {
                        path: p,
                        node: k,
                        t,
                        x,
                        y: h.terminal.derivative(x),
                        std_error: 0.0,
                    });
                }
                let key = inner_key(seed, PURPOSE_ADJOINT, p, k);
                let path_payoff = |s: &[f64], c: &[f64], i: &[f64]| pathwise_payoff(h, method, &grid, k, s, c, i).0;
                let payoff = if h.running.is_zero() {
                    InnerPayoff::Terminal(&terminal)
                } else {
                    InnerPayoff::Path(&path_payoff)
                };
                let stats = sim.mean(&key, k, x, inner_paths, buf, payoff)?;
                Ok(AdjointSample {
                    path: p,
                    node: k,
                    t,
                    x,
                    y: stats.mean,
                    std_error: stats.std_error,
                })
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(AdjointEstimate {
        method: AdjointMethod::Nested { inner_paths },
        samples,
        fits: Vec::new(),
        reduced_nodes: Vec::new(),
        warnings,
    })
}

fn check_nodes(grid: &TimeGrid, nodes: &[usize]) -> Result<()> {
    match nodes.iter().find(|&&k| k > grid.steps()) {
        Some(k) => Err(Error::InvalidInput(format!("time node {k} is beyond the grid"))),
        None => Ok(()),
    }
}

fn basis_row(z: f64, degree: usize) -> DVector<f64> {
    let mut v = DVector::zeros(degree + 1);
    let mut p = 1.0;
    for k in 0..=degree {
        v[k] = p;
        p *= z;
    }
    v
}

/// Least squares of `y` on `1, z, …, z^d`; lowers `d` until the normal
/// matrix is well conditioned. Returns the fit and whether `d` was lowered.
pub fn fit_polynomial(xs: &[f64], ys: &[f64], degree: usize) -> Result<(PolyFit, bool)> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::InvalidInput("regression needs matching, non-empty samples".into()));
    }
    let n = xs.len();
    let stats = MeanSe::of(xs);
    let sd = stats.sample_variance().sqrt();
    let degenerate = !(sd > 1e-12 * (1.0 + stats.mean.abs()));
    let scale = if degenerate { 1.0 } else { sd };
    let max_by_size = (n / SAMPLES_PER_BASIS).max(1) - 1;
    let mut d = if degenerate { 0 } else { degree.min(max_by_size) };
    let zs: Vec<f64> = xs.iter().map(|x| (x - stats.mean) / scale).collect();
    loop {
        let mut gram = DMatrix::zeros(d + 1, d + 1);
        let mut rhs = DVector::zeros(d + 1);
        for (&z, &y) in zs.iter().zip(ys) {
            let phi = basis_row(z, d);
            gram.ger(1.0, &phi, &phi, 1.0);
            rhs.axpy(y, &phi, 1.0);
        }
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v.abs())));
        if d > 0 && !(lo > 0.0 && hi / lo < MAX_CONDITION) {
            d -= 1;
            continue;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("regression normal matrix is singular".into()))?;
        let coeffs = chol.solve(&rhs);
        let inv = chol.inverse();
        let mut meat = DMatrix::zeros(d + 1, d + 1);
        for (&z, &y) in zs.iter().zip(ys) {
            let phi = basis_row(z, d);
            let e = y - coeffs.dot(&phi);
            meat.ger(e * e, &phi, &phi, 1.0);
        }
        let covariance = &inv * meat * &inv;
        let fit = PolyFit {
            center: stats.mean,
            scale,
            degree: d,
            coeffs,
            covariance,
        };
        return Ok((fit, d < degree));
    }
}

/// Fits each region between knots separately; `true` if any degree was lowered.
pub fn fit_piecewise(node: usize, xs: &[f64], ys: &[f64], basis: &RegressionBasis) -> Result<(RegressionFit, bool)> {
    let mut pieces = Vec::new();
    let mut reduced = false;
    for r in 0..=basis.knots.len() {
        let (rx, ry): (Vec<f64>, Vec<f64>) = xs
            .iter()
            .zip(ys)
            .filter(|(x, _)| basis.region(**x) == r)
            .map(|(x, y)| (*x, *y))
            .unzip();
        if rx.is_empty() {
            continue;
        }
        let (fit, lowered) = fit_polynomial(&rx, &ry, basis.degree)?;
        reduced |= lowered;
        pieces.push((r, fit));
    }
    if pieces.is_empty() {
        return Err(Error::InvalidInput("regression needs non-empty samples".into()));
    }
    Ok((
        RegressionFit {
            node,
            basis: basis.clone(),
            pieces,
        },
        reduced,
    ))
}

/// Regression estimator: the pathwise payoff from each outer path is projected
/// on polynomials in `X_t` at every sampled node; `Y_T = g'(X_T)` exactly.
pub fn estimate_adjoint_regression(
    h: &Hamiltonian,
    ensemble: &PathEnsemble,
    nodes: &[usize],
    basis: &RegressionBasis,
    method: &FlowMethod,
) -> Result<AdjointEstimate> {
    let degree = basis.degree;
    method.check_policy(&ensemble.policy)?;
    let grid = *ensemble.grid();
    check_nodes(&grid, nodes)?;
    let n = ensemble.n_paths();
    let mut warnings = Vec::new();
    if n < SAMPLES_PER_BASIS * (degree + 1) {
        warnings.push(format!(
            "{n} paths is below {} for a degree-{degree} basis; degree lowered",
            SAMPLES_PER_BASIS * (degree + 1)
        ));
    }
    // payoffs[p][i] for node nodes[i]
    let payoffs: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| path_payoffs(h, method, ensemble, p, nodes))
        .collect();
    let mut samples = Vec::with_capacity(n * nodes.len());
    let mut fits = Vec::with_capacity(nodes.len());
    let mut reduced_nodes = Vec::new();
    for (i, &k) in nodes.iter().enumerate() {
        let t = grid.time(k);
        let xs: Vec<f64> = (0..n).map(|p| ensemble.states(p)[k]).collect();
        if k == grid.steps() {
            samples.extend(xs.iter().enumerate().map(|(p, &x)| AdjointSample {
                path: p,
                node: k,
                t,
                x,
                y: h.terminal.derivative(x),
                std_error: 0.0,
            }));
            fits.push(None);
            continue;
        }
        let ys: Vec<f64> = payoffs.iter().map(|row| row[i]).collect();
        let (fit, reduced) = fit_piecewise(k, &xs, &ys, basis)?;
        if reduced {
            reduced_nodes.push(k);
        }
        samples.extend(xs.iter().enumerate().map(|(p, &x)| {
            let (y, se) = fit.predict(x);
            AdjointSample {
                path: p,
                node: k,
                t,
                x,
                y,
                std_error: se,
            }
        }));
        fits.push(Some(fit));
    }
    Ok(AdjointEstimate {
        method: AdjointMethod::Regression {
            degree,
            knots: basis.knots.clone(),
        },
        samples,
        fits,
        reduced_nodes,
        warnings,
    })
}

/// Pathwise payoff from each node in `nodes` along the stored outer path.
fn path_payoffs(h: &Hamiltonian, method: &FlowMethod, ensemble: &PathEnsemble, p: usize, nodes: &[usize]) -> Vec<f64> {
    let grid = ensemble.grid();
    let path = ensemble.path(p);
    let steps = grid.steps();
    let mut log_phi = vec![0.0; steps + 1];
    method.accumulate(grid, 0, path.states, path.controls, path.increments, &mut log_phi);
    let g = h.terminal.derivative(path.terminal());
    // suffix[k] = Σ_{j ≥ k} Φ_{0,t_j} ∂_x f_j dt
    let mut suffix = vec![0.0; steps + 1];
    if !h.running.is_zero() {
        for j in (0..steps).rev() {
            let fx = h.running.partial_x(grid.time(j), path.states[j], path.controls[j]);
            suffix[j] = suffix[j + 1] + log_phi[j].exp() * fx * grid.dt();
        }
    }
    nodes
        .iter()
        .map(|&k| (log_phi[steps] - log_phi[k]).exp() * g + (-log_phi[k]).exp() * suffix[k])
        .collect()
}

/// Per-node comparison of two adjoint estimates at common `(path, node)` samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeComparison {
    pub node: usize,
    pub t: f64,
    pub n_states: usize,
    /// Mean over states of `nested - regression`.
    pub mean_difference: f64,
    /// Standard error of that mean, regression correlations included.
    pub std_error: f64,
    /// Largest single-state `|difference| / combined SE`.
    pub max_abs_z: f64,
}

impl NodeComparison {
    pub fn agrees(&self, z: f64) -> bool {
        self.mean_difference.abs() <= z * self.std_error
    }
}

/// Compares nested samples with the regression fit at the same outer states.
pub fn compare_nested_regression(nested: &AdjointEstimate, regression: &AdjointEstimate) -> Result<Vec<NodeComparison>> {
    let mut nodes: Vec<usize> = nested.samples.iter().map(|s| s.node).collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
        .into_iter()
        .map(|k| {
            let ns: Vec<&AdjointSample> = nested.at_node(k).collect();
            let xs: Vec<f64> = ns.iter().map(|s| s.x).collect();
            let m = ns.len() as f64;
            let nested_mean = ns.iter().map(|s| s.y).sum::<f64>() / m;
            let nested_var = ns.iter().map(|s| s.std_error * s.std_error).sum::<f64>() / (m * m);
            let fit = regression
                .fits
                .iter()
                .flatten()
                .find(|f| f.node == k);
            let t = ns[0].t;
            let (reg_mean, reg_se, max_abs_z) = match fit {
                Some(f) => {
                    let (mean, se) = f.mean_prediction(&xs);
                    let max_z = ns
                        .iter()
                        .map(|s| {
                            let (y, e) = f.predict(s.x);
                            let c = (e * e + s.std_error * s.std_error).sqrt();
                            if c > 0.0 {
                                (s.y - y).abs() / c
                            } else {
                                0.0
                            }
                        })
                        .fold(0.0, f64::max);
                    (mean, se, max_z)
                }
                None => {
                    let reg: Vec<&AdjointSample> = regression.at_node(k).collect();
                    if reg.is_empty() {
                        return Err(Error::InvalidInput(format!("regression estimate has no node {k}")));
                    }
                    let mean = ns
                        .iter()
                        .map(|s| reg.iter().find(|r| r.path == s.path).map_or(f64::NAN, |r| r.y))
                        .sum::<f64>()
                        / m;
                    (mean, 0.0, 0.0)
                }
            };
            Ok(NodeComparison {
                node: k,
                t,
                n_states: ns.len(),
                mean_difference: nested_mean - reg_mean,
                std_error: (nested_var + reg_se * reg_se).sqrt(),
                max_abs_z,
            })
        })
        .collect()
}

/// `β` values spaced uniformly on `[-1, 1]`.
pub fn beta_grid(points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![0.0];
    }
    (0..points).map(|i| -1.0 + 2.0 * i as f64 / (points - 1) as f64).collect()
}

/// Summary of `∂_aH(t, X, Y, α̂)·(β - α̂)` over samples and `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NecessaryCondition {
    pub n_checked: usize,
    pub min_residual: f64,
    /// Minimum of `residual + 3·SE`; nonnegative when the check passes.
    pub min_margin: f64,
    /// Fraction of `(sample, β)` pairs with residual below `-3·SE`.
    pub violation_fraction: f64,
    /// Among samples where the control acts (`b2(X) ≠ 0`), the fraction with `sgn(Y) = sgn(X)`.
    pub sign_agreement_fraction: f64,
}

impl NecessaryCondition {
    pub fn passes(&self) -> bool {
        self.violation_fraction == 0.0
    }
}

pub fn necessary_condition_check(
    h: &Hamiltonian,
    ensemble: &PathEnsemble,
    adjoint: &AdjointEstimate,
    betas: &[f64],
) -> Result<NecessaryCondition> {
    if let Some(b) = betas.iter().find(|b| !(-1.0..=1.0).contains(*b)) {
        return Err(Error::config("beta_grid", format!("{b} is outside [-1, 1]")));
    }
    let mut n_checked = 0usize;
    let mut violations = 0usize;
    let mut min_residual = f64::INFINITY;
    let mut min_margin = f64::INFINITY;
    let (mut acting, mut agree) = (0usize, 0usize);
    for s in &adjoint.samples {
        let a = control_at(ensemble, s.path, s.node);
        let grad = h.partial_a(s.t, s.x, s.y, a);
        let grad_se = (h.drift.b2.eval(s.x) * h.drift.b3.partial_a(s.t, a)).abs() * s.std_error;
        if h.drift.b2.eval(s.x) != 0.0 {
            acting += 1;
            if sgn(s.y) == sgn(s.x) {
                agree += 1;
            }
        }
        for &b in betas {
            let r = grad * (b - a);
            let se = grad_se * (b - a).abs();
            n_checked += 1;
            min_residual = min_residual.min(r);
            min_margin = min_margin.min(r + 3.0 * se);
            if r < -3.0 * se {
                violations += 1;
            }
        }
    }
    Ok(NecessaryCondition {
        n_checked,
        min_residual,
        min_margin,
        violation_fraction: if n_checked == 0 { 0.0 } else { violations as f64 / n_checked as f64 },
        sign_agreement_fraction: if acting == 0 { 1.0 } else { agree as f64 / acting as f64 },
    })
}

/// `I1 = E[Φ_{τ,T} X_T 1{τ ≤ T}]` with `τ` the first node where `X` hits or crosses 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SymmetryStatistic {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_outer: usize,
    pub inner_paths: usize,
    pub hit_fraction: f64,
}

impl SymmetryStatistic {
    pub fn contains_zero(&self) -> bool {
        self.ci_low <= 0.0 && 0.0 <= self.ci_high
    }
}

/// First node where `X` equals 0 or differs in sign from the previous node.
pub fn zero_hitting_node(states: &[f64]) -> Option<usize> {
    if states[0] == 0.0 {
        return Some(0);
    }
    states
        .windows(2)
        .position(|w| w[1] == 0.0 || (w[1] > 0.0) != (w[0] > 0.0))
        .map(|k| k + 1)
}

pub fn symmetry_statistic(
    drift: &DriftSpec,
    ensemble: &PathEnsemble,
    inner_paths: usize,
    method: &FlowMethod,
    seed: u64,
) -> Result<SymmetryStatistic> {
    let policy = ensemble.policy;
    if !policy.is_markov() {
        return Err(Error::InvalidInput("symmetry statistic needs a Markov feedback policy".into()));
    }
    if inner_paths == 0 {
        return Err(Error::config("inner_paths", "must be at least 1"));
    }
    method.check_policy(&policy)?;
    let grid = *ensemble.grid();
    let sim = InnerSim::new(drift, policy, grid, method, ensemble.config.mirrored);
    let terminal = |log_phi: f64, x_t: f64| log_phi.exp() * x_t;
    let per_outer: Vec<(f64, bool)> = (0..ensemble.n_paths())
        .into_par_iter()
        .map_init(
            || InnerBuffers::new(grid.steps()),
            |buf, p| {
                let states = ensemble.states(p);
                let Some(tau) = zero_hitting_node(states) else {
                    return Ok((0.0, false));
                };
                if tau == grid.steps() {
                    return Ok((states[tau], true));
                }
                let key = inner_key(seed, PURPOSE_SYMMETRY, p, tau);
                let stats = sim.mean(&key, tau, states[tau], inner_paths, buf, InnerPayoff::Terminal(&terminal))?;
                Ok((stats.mean, true))
            },
        )
        .collect::<Result<_>>()?;
    let values: Vec<f64> = per_outer.iter().map(|v| v.0).collect();
    let stats = MeanSe::of(&values);
    let (ci_low, ci_high) = stats.ci95();
    debug_assert!((ci_high - stats.mean - Z95 * stats.std_error).abs() <= 1e-12 * (1.0 + ci_high.abs()));
    Ok(SymmetryStatistic {
        mean: stats.mean,
        std_error: stats.std_error,
        ci_low,
        ci_high,
        n_outer: values.len(),
        inner_paths,
        hit_fraction: per_outer.iter().filter(|v| v.1).count() as f64 / values.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::corridor_spec;
    use crate::sde::{simulate, EnsembleConfig};
    use crate::variation::CorridorFlow;

    fn corridor_h() -> Hamiltonian {
        Hamiltonian::terminal_quadratic(corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap())
    }

    #[test]
    fn hamiltonian_values() {
        let h = corridor_h();
        let v = h.eval(0.0, 3.0, 1.0, 0.5);
        assert!((v - (0.5 * 0.75f64.tanh() - 0.5)).abs() < 1e-15);
        assert!((v + 0.18243).abs() < 1e-5);
        assert_eq!(h.eval(0.0, 3.0, 0.0, 0.5), 0.0);
        assert_eq!(h.partial_a(0.0, 3.0, 0.0, 0.5), 0.0);
        assert_eq!(h.partial_a(0.0, 1.5, 7.0, 0.5), 0.0);
        assert_eq!(h.partial_a(0.0, -3.0, 2.0, 0.5), 2.0);
    }

    #[test]
    fn growth_constant_is_finite() {
        let h = Hamiltonian {
            running: RunningCost::Quadratic {
                state_weight: 1.0,
                control_weight: 0.5,
            },
            ..corridor_h()
        };
        let pts: Vec<(f64, f64, f64)> = (-20..=20)
            .flat_map(|i| (-4..=4).map(move |j| (0.0, i as f64 * 0.5, j as f64 * 0.25)))
            .collect();
        let c = h.growth_constant(&pts);
        assert!(c > 0.0 && c <= 3.0);
    }

    #[test]
    fn nodes_and_betas() {
        let g = TimeGrid::from_dt(5.0, 0.005).unwrap();
        let n = sample_nodes(&g, 11);
        assert_eq!(n.len(), 11);
        assert_eq!(n[5], 500);
        assert_eq!(*n.last().unwrap(), 1000);
        let b = beta_grid(21);
        assert_eq!(b.len(), 21);
        assert_eq!(b[0], -1.0);
        assert_eq!(b[20], 1.0);
        assert!((b[10]).abs() < 1e-15);
    }

    #[test]
    fn hitting_node() {
        assert_eq!(zero_hitting_node(&[0.0, 1.0]), Some(0));
        assert_eq!(zero_hitting_node(&[1.0, 0.5, -0.1]), Some(2));
        assert_eq!(zero_hitting_node(&[-1.0, -0.5, 0.0]), Some(2));
        assert_eq!(zero_hitting_node(&[3.0, 2.5, 2.7]), None);
    }

    #[test]
    fn constant_payoff_regression() {
        let xs: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let ys = vec![2.5; 500];
        let (fit, reduced) = fit_polynomial(&xs, &ys, 5).unwrap();
        assert!(!reduced);
        for x in [-2.0, 0.0, 1.3] {
            let (y, se) = fit.predict(x);
            assert!((y - 2.5).abs() < 1e-9);
            assert!(se < 1e-9);
        }
        let (fit, reduced) = fit_polynomial(&[1.0; 300], &ys[..300], 5).unwrap();
        assert!(reduced);
        assert_eq!(fit.degree, 0);
    }

    #[test]
    fn terminal_adjoint_is_exact() {
        let h = corridor_h();
        let g = TimeGrid::from_dt(1.0, 0.01).unwrap();
        let cfg = EnsembleConfig::new(g, 0.5, 400, 3);
        let pol = ControlPolicy::Corridor { rho: 2.0, sign: 1.0 };
        let e = simulate(&h.drift, &pol, &cfg).unwrap();
        let m = FlowMethod::CorridorClosedForm(CorridorFlow {
            mu: 0.5,
            m: 4.0,
            rho: 2.0,
            sigma: 1.0,
        });
        let nodes = [50, 100];
        let reg = estimate_adjoint_regression(&h, &e, &nodes, &RegressionBasis::for_drift(&h.drift, 5), &m).unwrap();
        let nest = estimate_adjoint_nested(&h, &e, &nodes, &[0, 1, 2], 20, &m, 9).unwrap();
        assert_eq!(nest.warnings.len(), 1);
        for est in [&reg, &nest] {
            for s in est.at_node(100) {
                assert_eq!(s.y, 2.0 * e.terminal(s.path));
                assert_eq!(s.std_error, 0.0);
            }
        }
        let bad = simulate(&h.drift, &ControlPolicy::BrownianFunctional, &cfg).unwrap();
        assert!(estimate_adjoint_nested(&h, &bad, &nodes, &[0], 10, &FlowMethod::ode_exact(crate::drift::DriftSpec::zero(1.0).unwrap()).unwrap(), 1).is_err());
    }

    #[test]
    fn beta_equal_control_gives_zero_residual() {
        let h = corridor_h();
        let g = TimeGrid::from_dt(1.0, 0.01).unwrap();
        let cfg = EnsembleConfig::new(g, 2.5, 50, 3);
        let pol = ControlPolicy::Corridor { rho: 2.0, sign: 1.0 };
        let e = simulate(&h.drift, &pol, &cfg).unwrap();
        let adj = AdjointEstimate {
            method: AdjointMethod::Nested { inner_paths: 1 },
            samples: (0..50)
                .map(|p| AdjointSample {
                    path: p,
                    node: 10,
                    t: 0.1,
                    x: e.states(p)[10],
                    y: -5.0,
                    std_error: 0.0,
                })
                .collect(),
            fits: Vec::new(),
            reduced_nodes: Vec::new(),
            warnings: Vec::new(),
        };
        let betas: Vec<f64> = (0..50).map(|p| control_at(&e, p, 10)).collect();
        for (p, b) in betas.iter().enumerate() {
            let a = control_at(&e, p, 10);
            let r = h.partial_a(0.1, e.states(p)[10], -5.0, a) * (b - a);
            assert_eq!(r, 0.0);
        }
        assert!(necessary_condition_check(&h, &e, &adj, &[1.5]).is_err());
    }

    #[test]
    fn fused_corridor_kernel_matches_generic() {
        let h = corridor_h();
        let g = TimeGrid::from_dt(5.0, 0.005).unwrap();
        let m = FlowMethod::CorridorClosedForm(CorridorFlow {
            mu: 0.5,
            m: 4.0,
            rho: 2.0,
            sigma: 1.0,
        });
        let key = inner_key(3, PURPOSE_SYMMETRY, 1, 0);
        let f = |lp: f64, xt: f64| lp.exp() * xt;
        for pol in [ControlPolicy::Corridor { rho: 2.0, sign: 1.0 }, ControlPolicy::Constant(1.0)] {
            for mirrored in [false, true] {
                let fused = InnerSim::new(&h.drift, pol, g, &m, mirrored);
                assert!(fused.fused.is_some());
                let generic = InnerSim { fused: None, ..InnerSim::new(&h.drift, pol, g, &m, mirrored) };
                let mut buf = InnerBuffers::new(g.steps());
                for node in [0usize, 700] {
                    let a = fused.mean(&key, node, 2.3, 10, &mut buf, InnerPayoff::Terminal(&f)).unwrap();
                    let b = generic.mean(&key, node, 2.3, 10, &mut buf, InnerPayoff::Terminal(&f)).unwrap();
                    assert_eq!(a, b);
                }
            }
        }
        let other = corridor_spec(0.5, 4.0, 3.0, 1.0).unwrap();
        assert!(InnerSim::new(&other, ControlPolicy::Constant(1.0), g, &m, false).fused.is_none());
    }
}
