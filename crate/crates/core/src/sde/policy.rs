use crate::drift::sgn;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-path auxiliary state for path-functional policies.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyState {
    /// Driving Brownian motion `B_t`.
    pub brownian: f64,
    /// Running integral maintained by [`ControlPolicy::BrownianFunctional`].
    pub integral: f64,
}

/// Control rules with values in `A = [-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlPolicy {
    Constant(f64),
    /// `sign · 1{|x| > rho}`.
    Corridor { rho: f64, sign: f64 },
    /// `x / (1 + x²)`.
    RationalX,
    /// `1 / (1 + x²)`.
    RationalOne,
    /// `sign · sgn(x)`.
    Sign { sign: f64 },
    /// `∫_0^t e^{-s} / (1 + B_s²) ds`, accumulated with left-point quadrature.
    BrownianFunctional,
}

impl ControlPolicy {
    pub fn constant(value: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&value) {
            return Err(Error::config("control", format!("constant control {value} is outside [-1, 1]")));
        }
        Ok(ControlPolicy::Constant(value))
    }

    #[inline]
    pub fn eval(&self, _t: f64, x: f64, state: &PolicyState) -> f64 {
        match *self {
            ControlPolicy::Constant(c) => c,
            ControlPolicy::Corridor { rho, sign } => {
                if x.abs() > rho {
                    sign
                } else {
                    0.0
                }
            }
            ControlPolicy::RationalX => x / (1.0 + x * x),
            ControlPolicy::RationalOne => 1.0 / (1.0 + x * x),
            ControlPolicy::Sign { sign } => sign * sgn(x),
            ControlPolicy::BrownianFunctional => state.integral,
        }
    }

    /// Advances the auxiliary state over `[t, t + dt]` with Brownian increment `db`.
    #[inline]
    pub fn update(&self, state: &mut PolicyState, t: f64, dt: f64, db: f64) {
        if let ControlPolicy::BrownianFunctional = self {
            let b = state.brownian;
            state.integral += (-t).exp() / (1.0 + b * b) * dt;
        }
        state.brownian += db;
    }

    /// Feedback in the current state only, so conditioning on `X_t` suffices.
    pub fn is_markov(&self) -> bool {
        !matches!(self, ControlPolicy::BrownianFunctional)
    }

    pub fn id(&self) -> String {
        match *self {
            ControlPolicy::Constant(c) => format!("constant_{c}"),
            ControlPolicy::Corridor { sign, .. } if sign >= 0.0 => "opt_corridor".into(),
            ControlPolicy::Corridor { .. } => "neg_corridor".into(),
            ControlPolicy::RationalX => "rational_x".into(),
            ControlPolicy::RationalOne => "rational_1".into(),
            ControlPolicy::Sign { sign } if sign >= 0.0 => "sign_pos".into(),
            ControlPolicy::Sign { .. } => "sign_neg".into(),
            ControlPolicy::BrownianFunctional => "bm_functional".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_stay_in_control_set() {
        let policies = [
            ControlPolicy::Corridor { rho: 2.0, sign: 1.0 },
            ControlPolicy::Corridor { rho: 2.0, sign: -1.0 },
            ControlPolicy::RationalX,
            ControlPolicy::RationalOne,
            ControlPolicy::Sign { sign: 1.0 },
            ControlPolicy::Sign { sign: -1.0 },
        ];
        let st = PolicyState::default();
        for p in &policies {
            for i in -400..=400 {
                let a = p.eval(0.0, i as f64 * 0.05, &st);
                assert!((-1.0..=1.0).contains(&a));
            }
        }
        assert!(ControlPolicy::constant(1.5).is_err());
    }

    #[test]
    fn brownian_functional_is_bounded_and_left_point() {
        let p = ControlPolicy::BrownianFunctional;
        let mut st = PolicyState::default();
        let dt = 0.01;
        assert_eq!(p.eval(0.0, 0.0, &st), 0.0);
        p.update(&mut st, 0.0, dt, 0.3);
        // first step uses B_0 = 0
        assert!((st.integral - dt).abs() < 1e-15);
        for k in 1..2000 {
            p.update(&mut st, k as f64 * dt, dt, 0.0);
            assert!(p.eval(0.0, 0.0, &st) <= 1.0);
        }
        assert!(!p.is_markov());
    }
}
