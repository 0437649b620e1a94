//! Full-size acceptance run: one PASS/FAIL line per criterion.
//!
//! Takes several minutes on a single core; the symmetry statistic
//! (10⁴ outer × 10³ inner paths) dominates.

use bvsmp::adjoint::{estimate_adjoint_regression, sample_nodes, Hamiltonian, RegressionBasis};
use bvsmp::checks::{localtime_checks, variation_checks, LocalTimeSettings, VariationSettings};
use bvsmp::corridor::{
    mollification_convergence, run_figure1, run_figure2, verify_optimal_control, CorridorParams, SmpSettings,
};
use bvsmp::drift::DriftSpec;
use bvsmp::experiment::{run, ExperimentConfig};
use bvsmp::sde::{simulate, ControlPolicy, EnsembleConfig, TimeGrid};
use bvsmp::variation::FlowMethod;
use std::path::Path;
use std::time::Instant;

struct Report {
    results: Vec<(String, bool)>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String, started: Instant) {
        let status = if pass { "PASS" } else { "FAIL" };
        println!("{status} {name}: {detail} [{:.1}s]", started.elapsed().as_secs_f64());
        self.results.push((name.to_string(), pass));
    }
}

fn brownian_slopes() -> Vec<f64> {
    let spec = DriftSpec::zero(1.0).unwrap();
    // Euler steps are exact for Brownian motion, so a coarse grid loses nothing here
    let cfg = EnsembleConfig::new(TimeGrid::from_dt(5.0, 0.05).unwrap(), 0.0, 100_000, 17);
    let e = simulate(&spec, &ControlPolicy::Constant(0.0), &cfg).unwrap();
    let nodes = sample_nodes(&cfg.grid, 11);
    let est = estimate_adjoint_regression(
        &Hamiltonian::terminal_quadratic(spec.clone()),
        &e,
        &nodes,
        &RegressionBasis::for_drift(&spec, 5),
        &FlowMethod::ode_exact(spec.clone()).unwrap(),
    )
    .unwrap();
    // node 0 has X = 0 on every path, so no slope is identifiable there
    nodes[1..]
        .iter()
        .map(|&k| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = est.at_node(k).map(|s| (s.x, s.y)).unzip();
            let n = xs.len() as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            sxy / sxx
        })
        .collect()
}

fn determinism_configs() -> Vec<String> {
    let small = "[params]\nT = 1.0\ndt = 0.01\nn_paths = 500\n";
    [
        "kind = \"figure1\"\n[export]\nensemble_paths = 3\nvariation = true\nlocaltime = true\n",
        "kind = \"figure2\"\n",
        "kind = \"smp-verify\"\n[smp]\nouter_paths = 500\ninner_paths = 100\nnested_states = 5\nsymmetry_outer = 20\nsymmetry_inner = 100\n",
        "kind = \"localtime-check\"\n[localtime]\nn_paths = 100\nT = 1.0\ndt = 0.01\n",
        "kind = \"variation-check\"\n[variation]\nn_paths = 100\nT = 1.0\ndt = 0.01\n",
        "kind = \"mollify-sweep\"\n[mollify]\nn_paths = 50\n",
    ]
    .iter()
    .map(|k| format!("{k}{small}"))
    .collect()
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn acceptance() {
    let mut report = Report { results: Vec::new() };
    let params = CorridorParams::default();

    let t = Instant::now();
    let fig1 = run_figure1(&params, None).unwrap();
    let worst = fig1
        .versus_optimal
        .iter()
        .min_by(|a, b| a.z().total_cmp(&b.z()))
        .unwrap();
    report.record(
        "figure1_ordering",
        fig1.optimal_is_strict_minimum(3.0),
        format!(
            "J(opt_corridor) = {:.4}; smallest paired margin {} - {} = {:.4} ({:.1} SE)",
            fig1.rows[0].mean,
            worst.a,
            worst.b,
            worst.mean,
            worst.z()
        ),
        t,
    );

    let t = Instant::now();
    let grid: Vec<f64> = (1..=8).map(|i| 0.5 * i as f64).collect();
    let fig2 = run_figure2(&params, &grid).unwrap();
    let min_z = fig2.adjacent.iter().map(|d| d.z()).fold(f64::INFINITY, f64::min);
    report.record(
        "figure2_monotone",
        fig2.monotone_within(3.0) && fig2.span.mean > 3.0 * fig2.span.std_error,
        format!(
            "smallest adjacent difference {min_z:.1} SE; cost(4) - cost(0.5) = {:.4} ({:.1} SE)",
            fig2.span.mean,
            fig2.span.z()
        ),
        t,
    );

    let t = Instant::now();
    let lt = localtime_checks(&LocalTimeSettings::default()).unwrap();
    let row = |id: &str| lt.iter().find(|r| r.test_id == id).unwrap();
    let ids = ["identity_psi_one", "identity_psi_s", "grid_vs_ibp_psi_one", "grid_vs_ibp_psi_s"];
    report.record(
        "localtime_identity",
        ids.iter().all(|id| row(id).pass),
        ids.iter()
            .map(|id| format!("{id} {:.4}", row(id).rel_err))
            .collect::<Vec<_>>()
            .join(", "),
        t,
    );
    let (cal, tan) = (row("calibration_L_T0"), row("tanaka_residual_mean"));
    report.record(
        "localtime_calibration",
        cal.pass && tan.pass,
        format!(
            "mean L(T,0) = {:.5} vs {:.5} (allowed {:.4} rel); Tanaka residual mean / E L = {:.4}",
            cal.lhs, cal.rhs, cal.tolerance, tan.rel_err
        ),
        Instant::now(),
    );

    let t = Instant::now();
    let var = variation_checks(&VariationSettings::default()).unwrap();
    report.record(
        "first_variation_cross_validation",
        var.iter().all(|r| r.pass),
        var.iter()
            .map(|r| format!("{} vs {} {:.2e}", r.method_a, r.method_b, r.rel_err))
            .collect::<Vec<_>>()
            .join(", "),
        t,
    );

    let t = Instant::now();
    let smp = verify_optimal_control(&params, &SmpSettings::default()).unwrap().report;
    let slopes = brownian_slopes();
    let worst_slope = slopes.iter().map(|s| (s - 2.0).abs() / 2.0).fold(0.0, f64::max);
    let max_z = smp.adjoint_comparison.iter().map(|c| c.max_abs_z).fold(0.0, f64::max);
    let worst_node = smp
        .adjoint_comparison
        .iter()
        .map(|c| if c.std_error > 0.0 { (c.mean_difference / c.std_error).abs() } else { 0.0 })
        .fold(0.0, f64::max);
    report.record(
        "adjoint_sanity",
        smp.terminal_exact && worst_slope <= 0.05 && smp.adjoint_agreement,
        format!(
            "Y_T exact: {}; worst Brownian slope error {:.4}; nested vs regression worst node {:.2} SE (per-state max {:.2})",
            smp.terminal_exact, worst_slope, worst_node, max_z
        ),
        t,
    );
    report.record(
        "necessary_condition",
        smp.necessary_passes,
        format!(
            "{} checks, min residual {:.3e}, min margin {:.3e}, violations {:.4}, sign agreement {:.4}",
            smp.necessary.n_checked,
            smp.necessary.min_residual,
            smp.necessary.min_margin,
            smp.necessary.violation_fraction,
            smp.necessary.sign_agreement_fraction
        ),
        Instant::now(),
    );
    let s = &smp.symmetry;
    report.record(
        "symmetry",
        smp.symmetry_contains_zero,
        format!(
            "I1 = {:.5}, 95% CI [{:.5}, {:.5}], {} outer x {} inner",
            s.mean, s.ci_low, s.ci_high, s.n_outer, s.inner_paths
        ),
        Instant::now(),
    );

    let t = Instant::now();
    let cfg = EnsembleConfig {
        n_paths: 10_000,
        ..params.ensemble_config().unwrap()
    };
    let moll =
        mollification_convergence(&params.spec().unwrap(), params.optimal_policy(), &cfg, &[10, 30, 100, 300]).unwrap();
    report.record(
        "mollification_convergence",
        moll.non_increasing_within(2.0),
        moll.rows
            .iter()
            .map(|r| format!("n={} {:.5}±{:.5}", r.n, r.mean_sup, r.se_sup))
            .collect::<Vec<_>>()
            .join(", "),
        t,
    );

    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut compared = 0;
    for (i, text) in determinism_configs().iter().enumerate() {
        let config = ExperimentConfig::parse(text).unwrap();
        let mut outputs = Vec::new();
        for (run_id, threads) in [(0, 1), (1, 1), (2, 3)] {
            let mut c = config.clone();
            c.threads = Some(threads);
            let out = dir.path().join(format!("{i}-{run_id}"));
            let outcome = run(&c, text, &out).unwrap();
            assert!(outcome.error.is_none(), "{:?}", outcome.error);
            outputs.push(csv_bytes(&out));
        }
        identical &= outputs[0] == outputs[1] && outputs[0] == outputs[2];
        compared += outputs[0].len();
    }
    report.record(
        "determinism",
        identical,
        format!("{compared} output files across 6 experiments, repeated and at 1 vs 3 threads"),
        t,
    );

    let failed: Vec<&str> = report
        .results
        .iter()
        .filter(|r| !r.1)
        .map(|r| r.0.as_str())
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
