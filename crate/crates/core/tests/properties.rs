use bvsmp::corridor::policy_catalog;
use bvsmp::drift::{corridor_spec, Drift};
use bvsmp::local_time::{default_bandwidth, estimate_local_time, LocalTimeField};
use bvsmp::sde::{simulate, ControlPolicy, EnsembleConfig, PolicyState, TimeGrid};
use bvsmp::stats::MeanSe;
use bvsmp::variation::{first_variation_corridor_cf, first_variation_localtime, CorridorFlow};
use proptest::prelude::*;

fn corridor_params() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (0.05f64..2.0, 0.5f64..8.0, 0.1f64..4.0, 0.3f64..2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn catalog_controls_stay_in_unit_interval(
        rho in 0.01f64..5.0,
        x in -50.0f64..50.0,
        t in 0.0f64..10.0,
        b in -20.0f64..20.0,
        integral in 0.0f64..1.0,
    ) {
        let state = PolicyState { brownian: b, integral };
        for p in policy_catalog(rho) {
            let a = p.eval(t, x, &state);
            prop_assert!((-1.0..=1.0).contains(&a), "{} gave {a}", p.id());
        }
    }

    #[test]
    fn corridor_drift_is_bounded((mu, m, rho, sigma) in corridor_params(), x in -100.0f64..100.0, a in -1.0f64..1.0) {
        let spec = corridor_spec(mu, m, rho, sigma).unwrap();
        prop_assert!(spec.drift(0.0, x, a).abs() <= spec.bound() + 1e-12);
    }

    #[test]
    fn paired_difference_is_antisymmetric(values in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..200)) {
        let (a, b): (Vec<f64>, Vec<f64>) = values.into_iter().unzip();
        let ab = MeanSe::paired(&a, &b);
        let ba = MeanSe::paired(&b, &a);
        prop_assert_eq!(ab.mean, -ba.mean);
        prop_assert_eq!(ab.std_error, ba.std_error);
    }

    #[test]
    fn mirrored_noise_mirrors_corridor_paths((mu, m, rho, sigma) in corridor_params(), x0 in -3.0f64..3.0, seed in any::<u64>()) {
        let spec = corridor_spec(mu, m, rho, sigma).unwrap();
        let cfg = EnsembleConfig::new(TimeGrid::new(1.0, 200).unwrap(), x0, 3, seed);
        let policy = ControlPolicy::Corridor { rho, sign: 1.0 };
        let e = simulate(&spec, &policy, &cfg).unwrap();
        let f = simulate(&spec, &policy, &cfg.mirrored()).unwrap();
        for p in 0..3 {
            for (u, v) in e.states(p).iter().zip(f.states(p)) {
                prop_assert_eq!(*u, -*v);
            }
        }
    }

    #[test]
    fn local_time_is_nondecreasing_and_nonnegative(seed in any::<u64>(), y in -1.0f64..1.0, sigma in 0.5f64..2.0) {
        let spec = bvsmp::drift::DriftSpec::zero(sigma).unwrap();
        let cfg = EnsembleConfig::new(TimeGrid::new(1.0, 400).unwrap(), 0.0, 1, seed);
        let e = simulate(&spec, &ControlPolicy::Constant(0.0), &cfg).unwrap();
        let eps = default_bandwidth(sigma, cfg.grid.dt());
        let curve = estimate_local_time(&e.path(0), sigma, y, eps).unwrap();
        prop_assert_eq!(curve.values[0], 0.0);
        prop_assert!(curve.values.windows(2).all(|w| w[1] >= w[0]));
        let field = LocalTimeField::estimate(&e.path(0), 0, sigma, eps, &[]).unwrap();
        for j in 0..cfg.grid.steps() {
            for i in 0..field.n_levels as i64 {
                prop_assert!(field.value(j + 1, i) >= field.value(j, i));
            }
        }
    }

    #[test]
    fn flow_cocycle((mu, m, rho, sigma) in corridor_params(), seed in any::<u64>(), s in 0usize..100, dt_nodes in (0usize..100, 0usize..100)) {
        let spec = corridor_spec(mu, m, rho, sigma).unwrap();
        let cfg = EnsembleConfig::new(TimeGrid::new(1.0, 300).unwrap(), 0.5, 1, seed);
        let e = simulate(&spec, &ControlPolicy::Constant(1.0), &cfg).unwrap();
        let t = s + dt_nodes.0;
        let u = t + dt_nodes.1;
        let flow = CorridorFlow { mu, m, rho, sigma };
        let eps = default_bandwidth(sigma, cfg.grid.dt());
        for r in [first_variation_corridor_cf(&flow, &e).unwrap(), first_variation_localtime(&spec, &e, eps).unwrap()] {
            let lhs = r[0].between(s, t) * r[0].between(t, u);
            let rhs = r[0].between(s, u);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
            prop_assert!(r[0].phi.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn simulation_is_reproducible(seed in any::<u64>(), n in 1usize..6) {
        let spec = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let cfg = EnsembleConfig::new(TimeGrid::new(0.5, 100).unwrap(), 0.0, n, seed);
        let a = simulate(&spec, &ControlPolicy::BrownianFunctional, &cfg).unwrap();
        let b = simulate(&spec, &ControlPolicy::BrownianFunctional, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}
