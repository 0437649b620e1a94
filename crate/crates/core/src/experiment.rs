//! Declarative experiment configuration, validation and execution.
//!
//! A config is a TOML document:
//!
//! ```toml
//! kind = "figure1"        # figure1 | figure2 | smp-verify | localtime-check | variation-check | mollify-sweep
//! seed = 42               # optional, overrides every section seed
//! threads = 4             # optional worker count
//! out = "results/fig1"    # optional output directory
//! spec = "corridor"       # corridor | smooth | brownian (mollify-sweep and exports)
//!
//! [params]                # corridor model and ensemble
//! mu = 0.5
//! M = 4.0
//! rho = 2.0
//! n_paths = 100000
//! ```
//!
//! Sections `[figure1]`, `[figure2]`, `[smp]`, `[localtime]`, `[variation]`,
//! `[mollify]` and `[export]` tune the individual experiments; every field has
//! a default.

use crate::checks::{localtime_checks, smooth_test_spec, variation_checks, LocalTimeSettings, VariationSettings};
use crate::corridor::{
    mollification_convergence, run_figure1, run_figure2, verify_optimal_control, CorridorParams, Diagnostic, SmpSettings,
};
use crate::drift::DriftSpec;
use crate::error::{Error, Result};
use crate::io;
use crate::local_time::{default_bandwidth, LocalTimeField};
use crate::sde::{simulate, ControlPolicy, EnsembleConfig};
use crate::variation::{first_variation, FlowMethod};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Figure1,
    Figure2,
    SmpVerify,
    LocaltimeCheck,
    VariationCheck,
    MollifySweep,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Figure1 => "figure1",
            ExperimentKind::Figure2 => "figure2",
            ExperimentKind::SmpVerify => "smp-verify",
            ExperimentKind::LocaltimeCheck => "localtime-check",
            ExperimentKind::VariationCheck => "variation-check",
            ExperimentKind::MollifySweep => "mollify-sweep",
        }
    }
}

/// Drift family used by the mollification sweep and the ensemble export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecFamily {
    /// The corridor model of `[params]` under `α̂ = 1{|x| > ρ}`.
    #[default]
    Corridor,
    /// `0.5 tanh(x/4) - 0.8 tanh(x/0.7)·α` under `α ≡ 1`.
    Smooth,
    /// `dX = σ dB`.
    Brownian,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Figure1Settings {
    /// Subset of catalog ids; all seven when absent.
    pub policies: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Figure2Settings {
    pub rho_grid: Vec<f64>,
}

impl Default for Figure2Settings {
    fn default() -> Self {
        Self {
            rho_grid: (1..=8).map(|i| 0.5 * i as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MollifySettings {
    pub levels: Vec<u32>,
    pub n_paths: usize,
}

impl Default for MollifySettings {
    fn default() -> Self {
        Self {
            levels: vec![10, 30, 100, 300],
            n_paths: 10_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportSettings {
    /// Paths of the `spec` family written to `ensemble.csv` and `ensemble.bin`.
    pub ensemble_paths: usize,
    /// Also write `variation.csv` for the exported paths.
    pub variation: bool,
    /// Also write `localtime_field.csv` for the exported paths.
    pub localtime: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub spec: SpecFamily,
    #[serde(default)]
    pub params: CorridorParams,
    #[serde(default)]
    pub figure1: Figure1Settings,
    #[serde(default)]
    pub figure2: Figure2Settings,
    #[serde(default)]
    pub smp: SmpSettings,
    #[serde(default)]
    pub localtime: LocalTimeSettings,
    #[serde(default)]
    pub variation: VariationSettings,
    #[serde(default)]
    pub mollify: MollifySettings,
    #[serde(default)]
    pub export: ExportSettings,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: None,
            threads: None,
            out: None,
            spec: SpecFamily::default(),
            params: CorridorParams::default(),
            figure1: Figure1Settings::default(),
            figure2: Figure2Settings::default(),
            smp: SmpSettings::default(),
            localtime: LocalTimeSettings::default(),
            variation: VariationSettings::default(),
            mollify: MollifySettings::default(),
            export: ExportSettings::default(),
        }
    }

    /// Parses TOML; the error names the offending field as a dotted path.
    pub fn parse(text: &str) -> std::result::Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError {
                field: if path == "." { None } else { Some(path) },
                message: inner.message().to_string(),
            }
        })
    }

    /// Copies the top-level seed into every section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self.apply_seed();
        self
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.params.seed = s;
            self.localtime.seed = s;
            self.variation.seed = s;
        }
    }

    /// The seed that drives the selected experiment.
    pub fn effective_seed(&self) -> u64 {
        match self.kind {
            ExperimentKind::LocaltimeCheck => self.localtime.seed,
            ExperimentKind::VariationCheck => self.variation.seed,
            _ => self.params.seed,
        }
    }

    /// Every violated constraint relevant to the selected experiment.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let mut section = |name: &str, diags: Vec<Diagnostic>| {
            out.extend(diags.into_iter().map(|d| Diagnostic::new(&format!("{name}.{}", d.field), d.message)));
        };
        let uses_params = !matches!(self.kind, ExperimentKind::LocaltimeCheck | ExperimentKind::VariationCheck)
            || self.export.ensemble_paths > 0;
        if uses_params {
            section("params", self.params.diagnostics());
        }
        match self.kind {
            ExperimentKind::Figure1 => {
                if let Some(ids) = &self.figure1.policies {
                    let bad: Vec<Diagnostic> = ids
                        .iter()
                        .filter(|id| crate::corridor::catalog_policy(id, 1.0).is_none())
                        .map(|id| Diagnostic::new("policies", format!("unknown policy id {id}")))
                        .collect();
                    section("figure1", bad);
                    if ids.is_empty() {
                        section("figure1", vec![Diagnostic::new("policies", "must not be empty")]);
                    }
                }
            }
            ExperimentKind::Figure2 => {
                let g = &self.figure2.rho_grid;
                let mut d = Vec::new();
                if g.len() < 2 {
                    d.push(Diagnostic::new("rho_grid", "needs at least two values"));
                } else if g.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    d.push(Diagnostic::new("rho_grid", "values must be positive and finite"));
                } else if g.windows(2).any(|w| w[1] <= w[0]) {
                    d.push(Diagnostic::new("rho_grid", "must be strictly increasing"));
                }
                section("figure2", d);
            }
            ExperimentKind::SmpVerify => section("smp", self.smp.diagnostics()),
            ExperimentKind::LocaltimeCheck => section("localtime", self.localtime.diagnostics()),
            ExperimentKind::VariationCheck => section("variation", self.variation.diagnostics()),
            ExperimentKind::MollifySweep => {
                let mut d = Vec::new();
                if self.mollify.levels.is_empty() || self.mollify.levels.contains(&0) {
                    d.push(Diagnostic::new("levels", "need at least one positive mollification index"));
                }
                if self.mollify.n_paths == 0 {
                    d.push(Diagnostic::new("n_paths", "must be at least 1"));
                }
                section("mollify", d);
            }
        }
        if self.threads == Some(0) {
            out.push(Diagnostic::new("threads", "must be at least 1"));
        }
        out
    }
}

/// A configuration that could not be parsed or failed validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigError {
    pub field: Option<String>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{field}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Tolerances behind every pass/fail flag in the outputs.
pub fn tolerances() -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("figure1_paired_z", 3.0),
        ("figure2_adjacent_z", 3.0),
        ("figure2_span_z", 3.0),
        ("localtime_identity_rel_err", 0.05),
        ("localtime_grid_vs_ibp_rel_err", 0.05),
        ("localtime_calibration_z", 3.0),
        ("tanaka_residual_mean_fraction", 0.05),
        ("variation_smooth_rel_err", 0.05),
        ("variation_corridor_rel_err", 0.10),
        ("variation_constant_rel_err", 1e-3),
        ("adjoint_nested_vs_regression_z", 3.0),
        ("necessary_condition_z", 3.0),
        ("symmetry_ci_level", 0.95),
        ("mollification_monotone_z", 2.0),
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub kind: String,
    pub status: String,
    pub error: Option<String>,
    pub seed: u64,
    pub threads: usize,
    pub package: String,
    pub version: String,
    pub config_text: String,
    pub config: ExperimentConfig,
    pub tolerances: BTreeMap<&'static str, f64>,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
    pub wall_time_s: f64,
}

/// What a run produced; the manifest is already on disk.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub error: Option<Error>,
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Outputs<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

fn family_drift(config: &ExperimentConfig) -> Result<(DriftSpec, ControlPolicy)> {
    let p = &config.params;
    Ok(match config.spec {
        SpecFamily::Corridor => (p.spec()?, p.optimal_policy()),
        SpecFamily::Smooth => (smooth_test_spec()?, ControlPolicy::Constant(1.0)),
        SpecFamily::Brownian => (DriftSpec::zero(p.sigma)?, ControlPolicy::Constant(0.0)),
    })
}

fn export(config: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<()> {
    let n = config.export.ensemble_paths;
    if n == 0 {
        return Ok(());
    }
    let (spec, policy) = family_drift(config)?;
    let ens_config = EnsembleConfig {
        n_paths: n,
        ..config.params.ensemble_config()?
    };
    let ensemble = simulate(&spec, &policy, &ens_config)?;
    io::write_ensemble_csv(&out.path("ensemble.csv"), &ensemble)?;
    io::write_ensemble_bin(&out.path("ensemble.bin"), &ensemble)?;
    let eps = default_bandwidth(spec.sigma, ens_config.grid.dt());
    if config.export.variation {
        let method = match config.spec {
            SpecFamily::Corridor => FlowMethod::CorridorClosedForm(config.params.closed_form_flow()),
            _ => FlowMethod::ode_exact(spec.clone())?,
        };
        let records = first_variation(&method, &ensemble)?;
        io::write_variation(&out.path("variation.csv"), &records, &ens_config.grid)?;
    }
    if config.export.localtime {
        let atoms: Vec<f64> = spec.b2.atoms().iter().map(|a| a.location).collect();
        let fields = (0..n)
            .map(|p| LocalTimeField::estimate(&ensemble.path(p), p, spec.sigma, eps, &atoms))
            .collect::<Result<Vec<_>>>()?;
        io::write_localtime_fields(&out.path("localtime_field.csv"), &fields)?;
    }
    Ok(())
}

fn execute(config: &ExperimentConfig, out: &mut Outputs<'_>) -> Result<serde_json::Value> {
    let summary = match config.kind {
        ExperimentKind::Figure1 => {
            let fig = run_figure1(&config.params, config.figure1.policies.as_deref())?;
            io::write_figure(&out.path("figure1.csv"), io::FIGURE1_HEADER, &fig.rows)?;
            let mut diffs = fig.versus_optimal.clone();
            diffs.push(fig.sign_pair.clone());
            io::write_paired(&out.path("figure1_paired.csv"), &diffs)?;
            json!({
                "optimal_is_strict_minimum": fig.optimal_is_strict_minimum(3.0),
                "sign_neg_minus_sign_pos": fig.sign_pair,
            })
        }
        ExperimentKind::Figure2 => {
            let fig = run_figure2(&config.params, &config.figure2.rho_grid)?;
            io::write_figure(&out.path("figure2.csv"), io::FIGURE2_HEADER, &fig.rows)?;
            let mut diffs = fig.adjacent.clone();
            diffs.push(fig.span.clone());
            io::write_paired(&out.path("figure2_paired.csv"), &diffs)?;
            json!({
                "adjacent_nondecreasing": fig.monotone_within(3.0),
                "span_increasing": fig.span.mean > 3.0 * fig.span.std_error,
            })
        }
        ExperimentKind::SmpVerify => {
            let run = verify_optimal_control(&config.params, &config.smp)?;
            std::fs::write(out.path("smp_report.json"), serde_json::to_string_pretty(&run.report)? + "\n")?;
            io::write_adjoint(&out.path("adjoint.csv"), &[&run.regression, &run.nested])?;
            json!({
                "necessary_passes": run.report.necessary_passes,
                "adjoint_agreement": run.report.adjoint_agreement,
                "terminal_exact": run.report.terminal_exact,
                "symmetry_contains_zero": run.report.symmetry_contains_zero,
            })
        }
        ExperimentKind::LocaltimeCheck => {
            let rows = localtime_checks(&config.localtime)?;
            io::write_localtime_checks(&out.path("localtime_check.csv"), &rows)?;
            json!({ "checks": rows })
        }
        ExperimentKind::VariationCheck => {
            let rows = variation_checks(&config.variation)?;
            io::write_variation_checks(&out.path("variation_check.csv"), &rows)?;
            json!({ "all_pass": rows.iter().all(|r| r.pass) })
        }
        ExperimentKind::MollifySweep => {
            let (spec, policy) = family_drift(config)?;
            let ens_config = EnsembleConfig {
                n_paths: config.mollify.n_paths,
                ..config.params.ensemble_config()?
            };
            let study = mollification_convergence(&spec, policy, &ens_config, &config.mollify.levels)?;
            io::write_mollification(&out.path("mollification.csv"), &study.rows, ens_config.n_paths, ens_config.seed)?;
            json!({
                "non_increasing": study.non_increasing_within(2.0),
                "successive": study.successive,
            })
        }
    };
    export(config, out)?;
    Ok(summary)
}

/// Runs a validated config, writing outputs and `manifest.json` into `out_dir`.
///
/// The manifest is written even when the experiment fails.
pub fn run(config: &ExperimentConfig, config_text: &str, out_dir: &Path) -> Result<RunOutcome> {
    let mut config = config.clone();
    config.apply_seed();
    if let Some(d) = config.validate().into_iter().next() {
        return Err(Error::config(&d.field, d.message));
    }
    std::fs::create_dir_all(out_dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()?;
    let start = Instant::now();
    let mut out = Outputs {
        dir: out_dir,
        files: Vec::new(),
    };
    let result = pool.install(|| execute(&config, &mut out));
    let (summary, error) = match result {
        Ok(s) => (s, None),
        Err(e) => (serde_json::Value::Null, Some(e)),
    };
    let manifest = Manifest {
        kind: config.kind.as_str().to_string(),
        status: if error.is_none() { "ok" } else { "error" }.to_string(),
        error: error.as_ref().map(|e| e.to_string()),
        seed: config.effective_seed(),
        threads: pool.current_num_threads(),
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_text: config_text.to_string(),
        config,
        tolerances: tolerances(),
        outputs: out.files,
        summary,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunOutcome { manifest, error })
}
