//! Euler–Maruyama simulation of `dX = b(t, X, α) dt + σ dB` with
//! reproducible, scheduling-independent noise.
//!
//! Path `p` of an ensemble with seed `s` always draws its increments from
//! stream `p` of `StreamKey::new(s)`, so ensembles sharing a seed share
//! noise (common random numbers) and results do not depend on the number
//! of worker threads.

mod policy;

pub use policy::{ControlPolicy, PolicyState};

use crate::drift::Drift;
use crate::error::{require_finite, require_positive, Error, Result};
use crate::rng::StreamKey;
use crate::stats::MeanSe;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Uniform grid `t_k = k · T / steps` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        require_positive("T", horizon)?;
        if steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        Ok(Self { horizon, steps })
    }

    /// Grid with step as close as possible to `dt`; `dt` must divide `T` up to 1e-9.
    pub fn from_dt(horizon: f64, dt: f64) -> Result<Self> {
        require_positive("T", horizon)?;
        require_positive("dt", dt)?;
        if dt >= horizon {
            return Err(Error::config("dt", format!("must be smaller than T = {horizon}")));
        }
        let steps = (horizon / dt).round() as usize;
        if ((steps as f64) * dt - horizon).abs() > 1e-9 * horizon {
            return Err(Error::config("dt", format!("{dt} does not divide T = {horizon}")));
        }
        Self::new(horizon, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// Index of the node nearest to `t`.
    pub fn node_of(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.steps)
    }
}

/// Integrates one path from node `start`, writing `states` (len `incs.len() + 1`)
/// and `controls` (len `incs.len()`). Returns the failing step on overflow.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn run_path<D: Drift + ?Sized>(
    drift: &D,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    start: usize,
    x_start: f64,
    incs: &[f64],
    states: &mut [f64],
    controls: &mut [f64],
) -> std::result::Result<(), usize> {
    let dt = grid.dt();
    let sigma = drift.sigma();
    let mut st = PolicyState::default();
    let mut x = x_start;
    states[0] = x;
    for (j, &db) in incs.iter().enumerate() {
        let t = grid.time(start + j);
        let a = policy.eval(t, x, &st);
        controls[j] = a;
        x += drift.drift(t, x, a) * dt + sigma * db;
        if !x.is_finite() {
            return Err(start + j);
        }
        policy.update(&mut st, t, dt, db);
        states[j + 1] = x;
    }
    Ok(())
}

/// Paths integrated in lockstep by [`run_lanes`].
pub(crate) const LANES: usize = 4;

/// [`run_path`] for `LANES` paths at once, so their dependency chains overlap.
/// Buffers are lane-major; each lane matches `run_path` bit for bit.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_lanes<D: Drift + ?Sized>(
    drift: &D,
    policy: &ControlPolicy,
    grid: &TimeGrid,
    start: usize,
    x_start: f64,
    incs: &[f64],
    states: &mut [f64],
    controls: &mut [f64],
) -> std::result::Result<(), (usize, usize)> {
    let n = incs.len() / LANES;
    let dt = grid.dt();
    let sigma = drift.sigma();
    let mut st = [PolicyState::default(); LANES];
    let mut x = [x_start; LANES];
    for l in 0..LANES {
        states[l * (n + 1)] = x_start;
    }
    for j in 0..n {
        let t = grid.time(start + j);
        for l in 0..LANES {
            let db = incs[l * n + j];
            let a = policy.eval(t, x[l], &st[l]);
            controls[l * n + j] = a;
            x[l] += drift.drift(t, x[l], a) * dt + sigma * db;
            policy.update(&mut st[l], t, dt, db);
            states[l * (n + 1) + j + 1] = x[l];
        }
        if let Some(l) = x.iter().position(|v| !v.is_finite()) {
            return Err((l, start + j));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub grid: TimeGrid,
    pub x0: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Negate every Brownian increment (`B ↦ -B`).
    pub mirrored: bool,
}

impl EnsembleConfig {
    pub fn new(grid: TimeGrid, x0: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            grid,
            x0,
            n_paths,
            seed,
            mirrored: false,
        }
    }

    pub fn mirrored(mut self) -> Self {
        self.mirrored = !self.mirrored;
        self.x0 = -self.x0;
        self
    }

    fn validate(&self) -> Result<()> {
        require_finite("x0", self.x0)?;
        if self.n_paths == 0 {
            return Err(Error::config("n_paths", "must be at least 1"));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn fill_increments(&self, path: usize, out: &mut [f64]) {
        StreamKey::new(self.seed).fill_increments(path as u64, self.grid.dt(), self.mirrored, out);
    }
}

/// Read-only view of one simulated path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub grid: &'a TimeGrid,
    pub states: &'a [f64],
    pub increments: &'a [f64],
    pub controls: &'a [f64],
}

impl PathView<'_> {
    pub fn terminal(&self) -> f64 {
        *self.states.last().expect("paths have at least one node")
    }
}

/// `n_paths` simulated trajectories with their noise and controls.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub config: EnsembleConfig,
    pub policy: ControlPolicy,
    states: Vec<f64>,
    increments: Vec<f64>,
    controls: Vec<f64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.config.grid
    }

    pub fn n_paths(&self) -> usize {
        self.config.n_paths
    }

    pub fn x0(&self) -> f64 {
        self.config.x0
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn states(&self, p: usize) -> &[f64] {
        let w = self.config.grid.steps() + 1;
        &self.states[p * w..(p + 1) * w]
    }

    pub fn increments(&self, p: usize) -> &[f64] {
        let w = self.config.grid.steps();
        &self.increments[p * w..(p + 1) * w]
    }

    pub fn controls(&self, p: usize) -> &[f64] {
        let w = self.config.grid.steps();
        &self.controls[p * w..(p + 1) * w]
    }

    pub fn path(&self, p: usize) -> PathView<'_> {
        PathView {
            grid: &self.config.grid,
            states: self.states(p),
            increments: self.increments(p),
            controls: self.controls(p),
        }
    }

    pub fn terminal(&self, p: usize) -> f64 {
        *self.states(p).last().expect("non-empty path")
    }

    pub fn terminals(&self) -> Vec<f64> {
        (0..self.n_paths()).map(|p| self.terminal(p)).collect()
    }

    /// Recomputes the states from the stored increments.
    pub fn replay<D: Drift + ?Sized>(&self, drift: &D) -> Result<Vec<f64>> {
        let grid = self.config.grid;
        let w = grid.steps() + 1;
        let mut out = vec![0.0; self.states.len()];
        let mut controls = vec![0.0; grid.steps()];
        for (p, row) in out.chunks_mut(w).enumerate() {
            run_path(drift, &self.policy, &grid, 0, self.config.x0, self.increments(p), row, &mut controls)
                .map_err(|step| Error::NonFinite { path: p, step })?;
        }
        Ok(out)
    }

    /// Row-major buffers `(states, increments, controls)`.
    pub(crate) fn raw_parts(&self) -> (&[f64], &[f64], &[f64]) {
        (&self.states, &self.increments, &self.controls)
    }

    pub(crate) fn from_parts(
        config: EnsembleConfig,
        policy: ControlPolicy,
        states: Vec<f64>,
        increments: Vec<f64>,
        controls: Vec<f64>,
    ) -> Result<Self> {
        let (n, steps) = (config.n_paths, config.grid.steps());
        if states.len() != n * (steps + 1) || increments.len() != n * steps || controls.len() != n * steps {
            return Err(Error::InvalidInput("ensemble buffers do not match the configuration".into()));
        }
        Ok(Self {
            config,
            policy,
            states,
            increments,
            controls,
        })
    }
}

pub fn simulate<D: Drift + ?Sized>(drift: &D, policy: &ControlPolicy, config: &EnsembleConfig) -> Result<PathEnsemble> {
    config.validate()?;
    let grid = config.grid;
    let steps = grid.steps();
    let n = config.n_paths;
    let mut states = vec![0.0; n * (steps + 1)];
    let mut increments = vec![0.0; n * steps];
    let mut controls = vec![0.0; n * steps];
    states
        .par_chunks_mut(steps + 1)
        .zip(increments.par_chunks_mut(steps))
        .zip(controls.par_chunks_mut(steps))
        .enumerate()
        .try_for_each(|(p, ((row, incs), ctl))| {
            config.fill_increments(p, incs);
            run_path(drift, policy, &grid, 0, config.x0, incs, row, ctl)
                .map_err(|step| Error::NonFinite { path: p, step })
        })?;
    Ok(PathEnsemble {
        config: *config,
        policy: *policy,
        states,
        increments,
        controls,
    })
}

/// Simulates every policy on the same increments.
pub fn simulate_paired<D: Drift + ?Sized>(
    drift: &D,
    policies: &[ControlPolicy],
    config: &EnsembleConfig,
) -> Result<Vec<PathEnsemble>> {
    if policies.len() < 2 {
        return Err(Error::InvalidInput("paired simulation needs at least two policies".into()));
    }
    policies.iter().map(|p| simulate(drift, p, config)).collect()
}

/// One member of a common-noise comparison.
#[derive(Clone, Copy)]
pub struct PathCase<'a> {
    pub drift: &'a dyn Drift,
    pub policy: ControlPolicy,
    pub x0: f64,
}

/// Streams `n_paths` common-noise paths through every case without storing
/// the ensemble; `f` sees all cases of one path at once.
pub fn common_noise_map<T, F>(cases: &[PathCase<'_>], config: &EnsembleConfig, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &[PathView<'_>]) -> T + Sync,
{
    config.validate()?;
    let grid = config.grid;
    let steps = grid.steps();
    let nc = cases.len();
    (0..config.n_paths)
        .into_par_iter()
        .map_init(
            || {
                (
                    vec![0.0; steps],
                    vec![0.0; nc * (steps + 1)],
                    vec![0.0; nc * steps],
                )
            },
            |(incs, states, controls), p| {
                config.fill_increments(p, incs);
                for (c, (srow, crow)) in cases
                    .iter()
                    .zip(states.chunks_mut(steps + 1).zip(controls.chunks_mut(steps)))
                {
                    run_path(c.drift, &c.policy, &grid, 0, c.x0, incs, srow, crow)
                        .map_err(|step| Error::NonFinite { path: p, step })?;
                }
                let views: Vec<PathView<'_>> = (0..nc)
                    .map(|c| PathView {
                        grid: &grid,
                        states: &states[c * (steps + 1)..(c + 1) * (steps + 1)],
                        increments: incs,
                        controls: &controls[c * steps..(c + 1) * steps],
                    })
                    .collect();
                Ok(f(p, &views))
            },
        )
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub policy_id: String,
    pub seed: u64,
}

/// Trapezoidal running cost (control held at its left-point value) plus terminal cost.
pub fn pathwise_cost<F, G>(path: &PathView<'_>, running: &F, terminal: &G) -> f64
where
    F: Fn(f64, f64, f64) -> f64,
    G: Fn(f64) -> f64,
{
    let grid = path.grid;
    let dt = grid.dt();
    let mut acc = 0.0;
    for (k, &a) in path.controls.iter().enumerate() {
        let left = running(grid.time(k), path.states[k], a);
        let right = running(grid.time(k + 1), path.states[k + 1], a);
        acc += 0.5 * (left + right) * dt;
    }
    acc + terminal(path.terminal())
}

/// Per-path costs of an ensemble.
pub fn path_costs<F, G>(ensemble: &PathEnsemble, running: F, terminal: G) -> Vec<f64>
where
    F: Fn(f64, f64, f64) -> f64 + Sync,
    G: Fn(f64) -> f64 + Sync,
{
    (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| pathwise_cost(&ensemble.path(p), &running, &terminal))
        .collect()
}

pub fn evaluate_cost<F, G>(ensemble: &PathEnsemble, running: F, terminal: G) -> CostReport
where
    F: Fn(f64, f64, f64) -> f64 + Sync,
    G: Fn(f64) -> f64 + Sync,
{
    let stats = MeanSe::of(&path_costs(ensemble, running, terminal));
    CostReport {
        mean: stats.mean,
        std_error: stats.std_error,
        n_paths: stats.n,
        policy_id: ensemble.policy.id(),
        seed: ensemble.seed(),
    }
}

/// `E[sup_t |X^{x1}_t - X^{x2}_t|^p]` for `p = 1, 2, 4` under common noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowDifference {
    pub x1: f64,
    pub x2: f64,
    pub moments: Vec<(u32, MeanSe)>,
}

pub fn flow_difference<D: Drift + ?Sized>(
    drift: &D,
    policy: &ControlPolicy,
    config: &EnsembleConfig,
    x1: f64,
    x2: f64,
) -> Result<FlowDifference> {
    require_finite("x1", x1)?;
    require_finite("x2", x2)?;
    let dyn_drift = DynDrift(drift);
    let cases = [
        PathCase {
            drift: &dyn_drift,
            policy: *policy,
            x0: x1,
        },
        PathCase {
            drift: &dyn_drift,
            policy: *policy,
            x0: x2,
        },
    ];
    let sups = common_noise_map(&cases, config, |_, v| {
        v[0].states
            .iter()
            .zip(v[1].states)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    })?;
    let moments = [1u32, 2, 4]
        .iter()
        .map(|&p| {
            let vals: Vec<f64> = sups.iter().map(|s| s.powi(p as i32)).collect();
            (p, MeanSe::of(&vals))
        })
        .collect();
    Ok(FlowDifference { x1, x2, moments })
}

/// Adapter so generic `D: ?Sized` drifts can be stored as `&dyn Drift`.
pub(crate) struct DynDrift<'a, D: Drift + ?Sized>(pub &'a D);

impl<D: Drift + ?Sized> Drift for DynDrift<'_, D> {
    #[inline]
    fn drift(&self, t: f64, x: f64, a: f64) -> f64 {
        self.0.drift(t, x, a)
    }
    fn bound(&self) -> f64 {
        self.0.bound()
    }
    fn sigma(&self) -> f64 {
        self.0.sigma()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{corridor_spec, DriftSpec};

    fn grid() -> TimeGrid {
        TimeGrid::from_dt(5.0, 0.005).unwrap()
    }

    #[test]
    fn grid_nodes() {
        let g = grid();
        assert_eq!(g.steps(), 1000);
        assert_eq!(g.time(1000), 5.0);
        assert!(g.time(1) > g.time(0));
        assert_eq!(g.node_of(2.5), 500);
        assert!(TimeGrid::from_dt(5.0, 5.0).is_err());
        assert!(TimeGrid::from_dt(5.0, 0.3).is_err());
    }

    #[test]
    fn constant_path_without_noise() {
        let spec = DriftSpec::zero(1e-12).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.7, 20, 3);
        let e = simulate(&spec, &ControlPolicy::Constant(0.0), &cfg).unwrap();
        for p in 0..20 {
            assert!(e.states(p).iter().all(|x| (x - 0.7).abs() < 1e-9));
        }
    }

    #[test]
    fn starts_at_x0_and_replays_exactly() {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.25, 50, 9);
        let e = simulate(&spec, &ControlPolicy::BrownianFunctional, &cfg).unwrap();
        assert!((0..50).all(|p| e.states(p)[0] == 0.25));
        assert_eq!(e.replay(&spec).unwrap(), e.raw_parts().0);
    }

    #[test]
    fn per_step_displacement_bound() {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 30, 4);
        let e = simulate(&spec, &ControlPolicy::Corridor { rho: 2.0, sign: 1.0 }, &cfg).unwrap();
        let dt = cfg.grid.dt();
        for p in 0..30 {
            let s = e.states(p);
            for (k, db) in e.increments(p).iter().enumerate() {
                let step = (s[k + 1] - s[k]).abs();
                assert!(step <= spec.composite_bound() * dt + db.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn same_policy_twice_is_identical() {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 40, 5);
        let p = ControlPolicy::RationalOne;
        let pair = simulate_paired(&spec, &[p, p], &cfg).unwrap();
        assert_eq!(pair[0], pair[1]);
        assert!(simulate_paired(&spec, &[p], &cfg).is_err());
    }

    #[test]
    fn opposite_constants_agree_inside_corridor() {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 40, 6);
        let pair = simulate_paired(&spec, &[ControlPolicy::Constant(1.0), ControlPolicy::Constant(-1.0)], &cfg).unwrap();
        for p in 0..40 {
            let (a, b) = (pair[0].states(p), pair[1].states(p));
            assert_eq!(pair[0].increments(p), pair[1].increments(p));
            let exit = a.iter().position(|x| x.abs() > 2.0).unwrap_or(a.len() - 1);
            assert_eq!(a[..=exit], b[..=exit]);
        }
    }

    #[test]
    fn deterministic_cost_integrand() {
        let spec = DriftSpec::zero(1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 10, 1);
        let e = simulate(&spec, &ControlPolicy::Constant(0.0), &cfg).unwrap();
        let r = evaluate_cost(&e, |_, _, _| 1.0, |_| 0.0);
        assert!((r.mean - 5.0).abs() < 1e-12);
        assert!(r.std_error < 1e-12);
        assert_eq!(r.policy_id, "constant_0");
    }

    #[test]
    fn flow_difference_trivial_cases() {
        let cfg = EnsembleConfig::new(grid(), 0.0, 25, 2);
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let same = flow_difference(&spec, &ControlPolicy::Constant(1.0), &cfg, 0.3, 0.3).unwrap();
        assert!(same.moments.iter().all(|(_, m)| m.mean == 0.0));
        let zero = DriftSpec::zero(1.0).unwrap();
        let shifted = flow_difference(&zero, &ControlPolicy::Constant(0.0), &cfg, 0.0, 0.5).unwrap();
        let m1 = shifted.moments[0].1;
        assert!((m1.mean - 0.5).abs() < 1e-12 && m1.std_error < 1e-12);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(grid(), 0.0, 64, 12);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&spec, &ControlPolicy::RationalX, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn lanes_match_single_paths() {
        let spec = crate::drift::corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let grid = TimeGrid::new(1.0, 300).unwrap();
        let n = 250;
        for pol in [ControlPolicy::Corridor { rho: 2.0, sign: 1.0 }, ControlPolicy::BrownianFunctional] {
            let mut incs = vec![0.0; LANES * n];
            for (l, chunk) in incs.chunks_mut(n).enumerate() {
                StreamKey::new(9).fill_increments(l as u64, grid.dt(), false, chunk);
            }
            let mut states = vec![0.0; LANES * (n + 1)];
            let mut controls = vec![0.0; LANES * n];
            run_lanes(&spec, &pol, &grid, 50, 1.7, &incs, &mut states, &mut controls).unwrap();
            for l in 0..LANES {
                let mut s1 = vec![0.0; n + 1];
                let mut c1 = vec![0.0; n];
                run_path(&spec, &pol, &grid, 50, 1.7, &incs[l * n..(l + 1) * n], &mut s1, &mut c1).unwrap();
                assert_eq!(&states[l * (n + 1)..(l + 1) * (n + 1)], &s1[..]);
                assert_eq!(&controls[l * n..(l + 1) * n], &c1[..]);
            }
        }
    }
}
