//! The insurance-surplus corridor problem: candidate policies, cost tables,
//! the value-vs-ρ sweep, optimal-control verification and mollification study.

use crate::adjoint::{
    beta_grid, compare_nested_regression, estimate_adjoint_nested, estimate_adjoint_regression, necessary_condition_check,
    sample_nodes, symmetry_statistic, AdjointEstimate, Hamiltonian, NecessaryCondition, NodeComparison, RegressionBasis,
    SymmetryStatistic,
};
use crate::drift::{corridor_spec, mollify, BvFunction, ControlFactor, Drift, DriftSpec, SmoothBoundedFn};
use crate::error::{Error, Result};
use crate::sde::{common_noise_map, simulate, ControlPolicy, EnsembleConfig, PathCase, PathEnsemble, TimeGrid};
use crate::stats::{MeanSe, Z95};
use crate::variation::{CorridorFlow, FlowMethod};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorridorParams {
    pub mu: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub rho: f64,
    pub sigma: f64,
    pub x0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            mu: 0.5,
            m: 4.0,
            rho: 2.0,
            sigma: 1.0,
            x0: 0.0,
            horizon: 5.0,
            dt: 0.005,
            n_paths: 100_000,
            seed: 20240601,
        }
    }
}

/// A named problem with a parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl CorridorParams {
    /// Every violated constraint; empty when the parameters are usable.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for (name, v) in [
            ("mu", self.mu),
            ("M", self.m),
            ("rho", self.rho),
            ("sigma", self.sigma),
            ("T", self.horizon),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(Diagnostic::new(name, format!("must be positive and finite, got {v}")));
            }
        }
        if !self.x0.is_finite() {
            out.push(Diagnostic::new("x0", "must be finite"));
        }
        if self.n_paths == 0 {
            out.push(Diagnostic::new("n_paths", "must be at least 1"));
        }
        if self.dt > 0.0 && self.horizon > 0.0 {
            if self.dt >= self.horizon {
                out.push(Diagnostic::new("dt", format!("must be smaller than T = {}", self.horizon)));
            } else if let Err(e) = TimeGrid::from_dt(self.horizon, self.dt) {
                out.push(Diagnostic::new("dt", e.to_string()));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.diagnostics().into_iter().next() {
            Some(d) => Err(Error::config(&d.field, d.message)),
            None => Ok(()),
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::from_dt(self.horizon, self.dt)
    }

    pub fn spec(&self) -> Result<DriftSpec> {
        corridor_spec(self.mu, self.m, self.rho, self.sigma)
    }

    pub fn ensemble_config(&self) -> Result<EnsembleConfig> {
        self.validate()?;
        Ok(EnsembleConfig::new(self.grid()?, self.x0, self.n_paths, self.seed))
    }

    pub fn optimal_policy(&self) -> ControlPolicy {
        ControlPolicy::Corridor { rho: self.rho, sign: 1.0 }
    }

    pub fn closed_form_flow(&self) -> CorridorFlow {
        CorridorFlow {
            mu: self.mu,
            m: self.m,
            rho: self.rho,
            sigma: self.sigma,
        }
    }
}

/// The seven candidate controls, in table order.
pub fn policy_catalog(rho: f64) -> Vec<ControlPolicy> {
    vec![
        ControlPolicy::Corridor { rho, sign: 1.0 },
        ControlPolicy::Corridor { rho, sign: -1.0 },
        ControlPolicy::RationalX,
        ControlPolicy::RationalOne,
        ControlPolicy::Sign { sign: 1.0 },
        ControlPolicy::Sign { sign: -1.0 },
        ControlPolicy::BrownianFunctional,
    ]
}

/// Looks up a catalog policy by id.
pub fn catalog_policy(id: &str, rho: f64) -> Option<ControlPolicy> {
    policy_catalog(rho).into_iter().find(|p| p.id() == id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    /// Policy id or the value of ρ.
    pub label: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl FigureRow {
    fn from_stats(label: String, stats: &MeanSe, seed: u64) -> Self {
        let (ci_low, ci_high) = stats.ci95();
        Self {
            label,
            mean: stats.mean,
            ci_low,
            ci_high,
            n_paths: stats.n,
            seed,
        }
    }
}

/// `mean(cost_a - cost_b)` under common noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub a: String,
    pub b: String,
    pub mean: f64,
    pub std_error: f64,
}

impl PairedDiff {
    fn of(a: String, b: String, ca: &[f64], cb: &[f64]) -> Self {
        let s = MeanSe::paired(ca, cb);
        Self {
            a,
            b,
            mean: s.mean,
            std_error: s.std_error,
        }
    }

    /// `mean / SE`; infinite when the costs differ on every path identically.
    pub fn z(&self) -> f64 {
        if self.std_error > 0.0 {
            self.mean / self.std_error
        } else if self.mean == 0.0 {
            0.0
        } else {
            self.mean.signum() * f64::INFINITY
        }
    }
}

/// Terminal costs `X_T²` of every case on common noise, `[case][path]`.
fn terminal_costs(cases: &[PathCase<'_>], config: &EnsembleConfig) -> Result<Vec<Vec<f64>>> {
    let per_path = common_noise_map(cases, config, |_, views| {
        views.iter().map(|v| v.terminal() * v.terminal()).collect::<Vec<f64>>()
    })?;
    Ok((0..cases.len())
        .map(|c| per_path.iter().map(|row| row[c]).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1 {
    pub rows: Vec<FigureRow>,
    /// `cost(policy) - cost(opt_corridor)` for every other policy.
    pub versus_optimal: Vec<PairedDiff>,
    /// `cost(sign_neg) - cost(sign_pos)`.
    pub sign_pair: PairedDiff,
}

impl Figure1 {
    /// The optimal corridor is below every other policy by more than `z` paired SEs.
    pub fn optimal_is_strict_minimum(&self, z: f64) -> bool {
        self.versus_optimal.iter().all(|d| d.mean > z * d.std_error)
    }
}

/// `J = E[X_T²]` for the catalog (or the ids in `subset`) on common noise.
pub fn run_figure1(params: &CorridorParams, subset: Option<&[String]>) -> Result<Figure1> {
    let config = params.ensemble_config()?;
    let spec = params.spec()?;
    let policies: Vec<ControlPolicy> = match subset {
        None => policy_catalog(params.rho),
        Some(ids) => ids
            .iter()
            .map(|id| {
                catalog_policy(id, params.rho)
                    .ok_or_else(|| Error::config("policies", format!("unknown policy id {id}")))
            })
            .collect::<Result<_>>()?,
    };
    // the optimal control and both sign policies are always simulated for the comparisons
    let mut all = policies.clone();
    for p in [
        params.optimal_policy(),
        ControlPolicy::Sign { sign: 1.0 },
        ControlPolicy::Sign { sign: -1.0 },
    ] {
        if !all.contains(&p) {
            all.push(p);
        }
    }
    let cases: Vec<PathCase<'_>> = all
        .iter()
        .map(|&policy| PathCase {
            drift: &spec,
            policy,
            x0: params.x0,
        })
        .collect();
    let costs = terminal_costs(&cases, &config)?;
    let index = |p: &ControlPolicy| all.iter().position(|q| q == p).expect("policy simulated");
    let rows = policies
        .iter()
        .map(|p| FigureRow::from_stats(p.id(), &MeanSe::of(&costs[index(p)]), params.seed))
        .collect();
    let opt = index(&params.optimal_policy());
    let versus_optimal = policies
        .iter()
        .filter(|p| **p != params.optimal_policy())
        .map(|p| PairedDiff::of(p.id(), all[opt].id(), &costs[index(p)], &costs[opt]))
        .collect();
    let (sp, sn) = (index(&ControlPolicy::Sign { sign: 1.0 }), index(&ControlPolicy::Sign { sign: -1.0 }));
    Ok(Figure1 {
        rows,
        versus_optimal,
        sign_pair: PairedDiff::of(all[sn].id(), all[sp].id(), &costs[sn], &costs[sp]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure2 {
    pub rows: Vec<FigureRow>,
    /// `cost(ρ_{i+1}) - cost(ρ_i)`.
    pub adjacent: Vec<PairedDiff>,
    /// `cost(ρ_last) - cost(ρ_first)`.
    pub span: PairedDiff,
}

impl Figure2 {
    pub fn monotone_within(&self, z: f64) -> bool {
        self.adjacent.iter().all(|d| d.mean >= -z * d.std_error)
    }
}

/// Cost of the optimal corridor control at each `ρ`, on common noise.
pub fn run_figure2(params: &CorridorParams, rho_grid: &[f64]) -> Result<Figure2> {
    if rho_grid.len() < 2 {
        return Err(Error::config("rho_grid", "needs at least two values"));
    }
    if let Some(r) = rho_grid.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::config("rho_grid", format!("{r} is not a positive finite value")));
    }
    if rho_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("rho_grid", "must be strictly increasing"));
    }
    let config = params.ensemble_config()?;
    let specs: Vec<DriftSpec> = rho_grid
        .iter()
        .map(|&rho| corridor_spec(params.mu, params.m, rho, params.sigma))
        .collect::<Result<_>>()?;
    let cases: Vec<PathCase<'_>> = specs
        .iter()
        .zip(rho_grid)
        .map(|(s, &rho)| PathCase {
            drift: s,
            policy: ControlPolicy::Corridor { rho, sign: 1.0 },
            x0: params.x0,
        })
        .collect();
    let costs = terminal_costs(&cases, &config)?;
    let label = |r: f64| format!("{r}");
    let rows = rho_grid
        .iter()
        .zip(&costs)
        .map(|(&r, c)| FigureRow::from_stats(label(r), &MeanSe::of(c), params.seed))
        .collect();
    let adjacent = (1..rho_grid.len())
        .map(|i| PairedDiff::of(label(rho_grid[i]), label(rho_grid[i - 1]), &costs[i], &costs[i - 1]))
        .collect();
    let last = rho_grid.len() - 1;
    Ok(Figure2 {
        rows,
        adjacent,
        span: PairedDiff::of(label(rho_grid[last]), label(rho_grid[0]), &costs[last], &costs[0]),
    })
}

/// `cost(opt corridor at ρ) - cost(reference)` on common noise.
pub fn corridor_versus(params: &CorridorParams, rho: f64, reference: &dyn Drift, reference_policy: ControlPolicy) -> Result<PairedDiff> {
    let config = params.ensemble_config()?;
    let spec = corridor_spec(params.mu, params.m, rho, params.sigma)?;
    let cases = [
        PathCase {
            drift: &spec,
            policy: ControlPolicy::Corridor { rho, sign: 1.0 },
            x0: params.x0,
        },
        PathCase {
            drift: reference,
            policy: reference_policy,
            x0: params.x0,
        },
    ];
    let costs = terminal_costs(&cases, &config)?;
    Ok(PairedDiff::of(format!("rho={rho}"), reference_policy.id(), &costs[0], &costs[1]))
}

/// The `ρ → 0` limit drift `μ tanh(x/M) - sgn(x)`, always active.
pub fn fully_active_spec(params: &CorridorParams) -> Result<DriftSpec> {
    DriftSpec::new(
        SmoothBoundedFn::Tanh {
            amplitude: params.mu,
            scale: params.m,
        },
        BvFunction::negative_sign(),
        ControlFactor::Identity,
        params.sigma,
    )
}

/// Sizes for the maximum-principle verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmpSettings {
    pub outer_paths: usize,
    pub inner_paths: usize,
    pub nested_states: usize,
    pub sample_nodes: usize,
    pub degree: usize,
    pub beta_points: usize,
    pub symmetry_outer: usize,
    pub symmetry_inner: usize,
}

impl Default for SmpSettings {
    fn default() -> Self {
        Self {
            outer_paths: 10_000,
            inner_paths: 1_000,
            nested_states: 20,
            sample_nodes: 11,
            degree: 5,
            beta_points: 21,
            symmetry_outer: 10_000,
            symmetry_inner: 1_000,
        }
    }
}

impl SmpSettings {
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for (name, v) in [
            ("outer_paths", self.outer_paths),
            ("inner_paths", self.inner_paths),
            ("nested_states", self.nested_states),
            ("sample_nodes", self.sample_nodes),
            ("beta_points", self.beta_points),
            ("symmetry_outer", self.symmetry_outer),
            ("symmetry_inner", self.symmetry_inner),
        ] {
            if v == 0 {
                out.push(Diagnostic::new(name, "must be at least 1"));
            }
        }
        if self.nested_states > self.outer_paths {
            out.push(Diagnostic::new("nested_states", "cannot exceed outer_paths"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpReport {
    pub policy_id: String,
    pub seed: u64,
    pub necessary: NecessaryCondition,
    pub necessary_passes: bool,
    pub adjoint_comparison: Vec<NodeComparison>,
    pub adjoint_agreement: bool,
    pub terminal_exact: bool,
    pub symmetry: SymmetryStatistic,
    pub symmetry_contains_zero: bool,
    pub warnings: Vec<String>,
}

/// Everything produced by [`verify_optimal_control`].
#[derive(Debug, Clone)]
pub struct SmpRun {
    pub report: SmpReport,
    pub regression: AdjointEstimate,
    pub nested: AdjointEstimate,
}

/// Simulates under `α̂ = 1{|X| > ρ}`, estimates `Y` by regression and nested
/// Monte Carlo with the closed-form flow, and checks the maximum principle.
pub fn verify_optimal_control(params: &CorridorParams, settings: &SmpSettings) -> Result<SmpRun> {
    if let Some(d) = settings.diagnostics().into_iter().next() {
        return Err(Error::config(&d.field, d.message));
    }
    let spec = params.spec()?;
    let h = Hamiltonian::terminal_quadratic(spec.clone());
    let policy = params.optimal_policy();
    let method = FlowMethod::CorridorClosedForm(params.closed_form_flow());
    let base = params.ensemble_config()?;
    let outer = simulate(&spec, &policy, &EnsembleConfig { n_paths: settings.outer_paths, ..base })?;
    let grid = *outer.grid();
    let nodes = sample_nodes(&grid, settings.sample_nodes);
    let basis = RegressionBasis::for_drift(&spec, settings.degree);
    let regression = estimate_adjoint_regression(&h, &outer, &nodes, &basis, &method)?;
    let states: Vec<usize> = (0..settings.nested_states).collect();
    let nested = estimate_adjoint_nested(&h, &outer, &nodes, &states, settings.inner_paths, &method, params.seed)?;
    let comparison = compare_nested_regression(&nested, &regression)?;
    let necessary = necessary_condition_check(&h, &outer, &regression, &beta_grid(settings.beta_points))?;
    let terminal_exact = [&regression, &nested].iter().all(|est| {
        est.at_node(grid.steps())
            .all(|s| s.y == h.terminal.derivative(outer.terminal(s.path)) && s.std_error == 0.0)
    });
    let sym_ensemble = simulate(&spec, &policy, &EnsembleConfig { n_paths: settings.symmetry_outer, ..base })?;
    let symmetry = symmetry_statistic(&spec, &sym_ensemble, settings.symmetry_inner, &method, params.seed)?;
    let mut warnings = regression.warnings.clone();
    warnings.extend(nested.warnings.iter().cloned());
    let report = SmpReport {
        policy_id: policy.id(),
        seed: params.seed,
        necessary_passes: necessary.passes(),
        necessary,
        adjoint_agreement: comparison.iter().all(|c| c.agrees(3.0)),
        adjoint_comparison: comparison,
        terminal_exact,
        symmetry_contains_zero: symmetry.contains_zero(),
        symmetry,
        warnings,
    };
    Ok(SmpRun {
        report,
        regression,
        nested,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MollificationRow {
    pub n: u32,
    /// `E[sup_t |X^n_t - X_t|]`.
    pub mean_sup: f64,
    pub se_sup: f64,
    /// `E[sup_t |X^n_t - X_t|²]`.
    pub mean_sup_sq: f64,
    pub se_sup_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MollificationStudy {
    pub rows: Vec<MollificationRow>,
    /// `E[sup|ΔX|]` at level `i + 1` minus level `i`, paired.
    pub successive: Vec<PairedDiff>,
}

impl MollificationStudy {
    /// Non-increasing in `n` up to `z` standard errors of each paired difference.
    pub fn non_increasing_within(&self, z: f64) -> bool {
        self.successive.iter().all(|d| d.mean <= z * d.std_error)
    }
}

/// Common-noise comparison of the mollified and raw dynamics under `policy`.
pub fn mollification_convergence(
    spec: &DriftSpec,
    policy: ControlPolicy,
    config: &EnsembleConfig,
    levels: &[u32],
) -> Result<MollificationStudy> {
    if levels.is_empty() || levels.contains(&0) {
        return Err(Error::config("levels", "need at least one positive mollification index"));
    }
    let mollified: Vec<_> = levels.iter().map(|&n| mollify(spec, n)).collect();
    let mut cases = vec![PathCase {
        drift: spec,
        policy,
        x0: config.x0,
    }];
    cases.extend(mollified.iter().map(|m| PathCase {
        drift: m,
        policy,
        x0: config.x0,
    }));
    let sups = common_noise_map(&cases, config, |_, views| {
        views[1..]
            .iter()
            .map(|v| {
                v.states
                    .iter()
                    .zip(views[0].states)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .collect::<Vec<f64>>()
    })?;
    let column = |i: usize| sups.iter().map(|r| r[i]).collect::<Vec<f64>>();
    let rows = levels
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let c = column(i);
            let s1 = MeanSe::of(&c);
            let s2 = MeanSe::of(&c.iter().map(|v| v * v).collect::<Vec<_>>());
            MollificationRow {
                n,
                mean_sup: s1.mean,
                se_sup: s1.std_error,
                mean_sup_sq: s2.mean,
                se_sup_sq: s2.std_error,
            }
        })
        .collect();
    let successive = (1..levels.len())
        .map(|i| PairedDiff::of(format!("n={}", levels[i]), format!("n={}", levels[i - 1]), &column(i), &column(i - 1)))
        .collect();
    Ok(MollificationStudy { rows, successive })
}

/// Half-width multiplier used for the reported confidence intervals.
pub const CI_Z: f64 = Z95;

/// Ensemble under the optimal control, for export.
pub fn optimal_ensemble(params: &CorridorParams, n_paths: usize) -> Result<PathEnsemble> {
    let spec = params.spec()?;
    let config = EnsembleConfig {
        n_paths,
        ..params.ensemble_config()?
    };
    simulate(&spec, &params.optimal_policy(), &config)
}
