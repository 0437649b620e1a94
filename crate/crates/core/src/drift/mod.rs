//! Structured drift `b(t, x, a) = b1(t, x) + b2(x) · b3(t, a)` and its
//! mollified approximations.

pub mod bv;
pub mod mollify;
pub mod smooth;

pub use bv::{sgn, AcPart, Atom, BvFunction};
pub use mollify::{mollify, Mollifier, MollifiedSpec};
pub use smooth::SmoothBoundedFn;

use crate::error::{require_finite, require_positive, Result};

/// `tanh` through a single `exp`; exactly odd, absolute error below 3e-16.
#[inline]
pub fn odd_tanh(x: f64) -> f64 {
    let r = 1.0 - 2.0 / ((2.0 * x.abs()).exp() + 1.0);
    r.copysign(x)
}

/// Anything the SDE engine can integrate.
pub trait Drift: Send + Sync {
    fn drift(&self, t: f64, x: f64, a: f64) -> f64;
    /// Upper bound on `sup |b|`.
    fn bound(&self) -> f64;
    fn sigma(&self) -> f64;
}

/// The control factor `b3(t, a)`; control values live in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControlFactor {
    Identity,
    Scaled(f64),
}

impl ControlFactor {
    #[inline]
    pub fn eval(&self, _t: f64, a: f64) -> f64 {
        match *self {
            ControlFactor::Identity => a,
            ControlFactor::Scaled(k) => k * a,
        }
    }

    #[inline]
    pub fn partial_a(&self, _t: f64, _a: f64) -> f64 {
        match *self {
            ControlFactor::Identity => 1.0,
            ControlFactor::Scaled(k) => k,
        }
    }

    pub fn bound(&self) -> f64 {
        match *self {
            ControlFactor::Identity => 1.0,
            ControlFactor::Scaled(k) => k.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    pub b1: SmoothBoundedFn,
    pub b2: BvFunction,
    pub b3: ControlFactor,
    pub sigma: f64,
}

impl DriftSpec {
    pub fn new(b1: SmoothBoundedFn, b2: BvFunction, b3: ControlFactor, sigma: f64) -> Result<Self> {
        require_positive("sigma", sigma)?;
        Ok(Self { b1, b2, b3, sigma })
    }

    /// Pure diffusion `dX = σ dB`.
    pub fn zero(sigma: f64) -> Result<Self> {
        Self::new(
            SmoothBoundedFn::Zero,
            BvFunction::zero(),
            ControlFactor::Identity,
            sigma,
        )
    }

    /// `b1 = p(clamp(x))`, no bounded-variation part.
    pub fn polynomial(coeffs: Vec<f64>, clamp: f64, sigma: f64) -> Result<Self> {
        require_positive("clamp", clamp)?;
        for c in &coeffs {
            require_finite("coefficient", *c)?;
        }
        Self::new(
            SmoothBoundedFn::ClampedPolynomial { coeffs, clamp },
            BvFunction::zero(),
            ControlFactor::Identity,
            sigma,
        )
    }

    pub fn composite_bound(&self) -> f64 {
        self.b1.sup_norm() + self.b2.sup_norm() * self.b3.bound()
    }

    /// Spatial derivative of the smooth part only.
    #[inline]
    pub fn b1_partial_x(&self, t: f64, x: f64) -> f64 {
        self.b1.partial_x(t, x)
    }
}

impl Drift for DriftSpec {
    #[inline]
    fn drift(&self, t: f64, x: f64, a: f64) -> f64 {
        let v2 = self.b2.eval(x);
        let mut v = self.b1.eval(t, x);
        if v2 != 0.0 {
            v += v2 * self.b3.eval(t, a);
        }
        v
    }

    fn bound(&self) -> f64 {
        self.composite_bound()
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Checked evaluation of `b1(t,x) + b2(x)·b3(t,a)`.
pub fn eval_drift(spec: &DriftSpec, t: f64, x: f64, a: f64) -> Result<f64> {
    require_finite("t", t)?;
    require_finite("x", x)?;
    require_finite("a", a)?;
    Ok(spec.drift(t, x, a))
}

/// The insurance-surplus corridor drift
/// `μ tanh(x/M) - a·sgn(x)·1{|x| > ρ}`.
pub fn corridor_spec(mu: f64, m: f64, rho: f64, sigma: f64) -> Result<DriftSpec> {
    require_positive("mu", mu)?;
    require_positive("M", m)?;
    require_positive("rho", rho)?;
    require_positive("sigma", sigma)?;
    DriftSpec::new(
        SmoothBoundedFn::Tanh {
            amplitude: mu,
            scale: m,
        },
        BvFunction::corridor(rho),
        ControlFactor::Identity,
        sigma,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corridor_drift_values() {
        let s = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        assert_eq!(eval_drift(&s, 0.0, 0.0, 1.0).unwrap(), 0.0);
        let oracle = 0.5 * (3.0f64 / 4.0).tanh() - 1.0;
        let v = eval_drift(&s, 0.0, 3.0, 1.0).unwrap();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v + 0.68243).abs() < 1e-5);
        assert_eq!(s.b2.eval(-3.0), 1.0);
        assert_eq!(s.b2.eval(3.0), -1.0);
        assert_eq!(s.b2.total_variation(), 2.0);
        assert!((s.b1.partial_x(0.0, 0.0) - 0.125).abs() < 1e-15);
        let x = 1.7;
        let c = (x / 4.0f64).cosh();
        assert!((s.b1.partial_x(0.0, x) - 0.5 / (4.0 * c * c)).abs() < 1e-15);
    }

    #[test]
    fn zero_b2_ignores_control() {
        let s = DriftSpec::polynomial(vec![0.2, -0.5], 10.0, 1.0).unwrap();
        for a in [-1.0, 0.0, 0.3, 1.0] {
            assert_eq!(s.drift(0.0, 1.5, a), s.b1.eval(0.0, 1.5));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        for (mu, m, rho, sigma) in [(0.0, 4.0, 2.0, 1.0), (0.5, -1.0, 2.0, 1.0), (0.5, 4.0, 0.0, 1.0), (0.5, 4.0, 2.0, f64::NAN)] {
            assert!(matches!(corridor_spec(mu, m, rho, sigma), Err(Error::Config { .. })));
        }
        let s = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        assert!(eval_drift(&s, 0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn drift_within_composite_bound() {
        let s = corridor_spec(0.5, 4.0, 2.0, 1.0).unwrap();
        let bound = s.composite_bound();
        assert_eq!(bound, 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-50.0..50.0);
            let a: f64 = rng.gen_range(-1.0..=1.0);
            let t: f64 = rng.gen_range(0.0..5.0);
            assert!(s.drift(t, x, a).abs() <= bound);
        }
    }

    #[test]
    fn control_factor_derivative() {
        let f = ControlFactor::Scaled(0.8);
        let h = 1e-5;
        let fd = (f.eval(0.0, 0.3 + h) - f.eval(0.0, 0.3 - h)) / (2.0 * h);
        assert!((fd - f.partial_a(0.0, 0.3)).abs() < 1e-9);
        assert!(f.eval(0.0, 1.0).abs() <= f.bound());
    }
}

#[cfg(test)]
mod tanh_tests {
    use super::odd_tanh;

    #[test]
    fn odd_tanh_accuracy_and_symmetry() {
        for i in -40_000..40_000 {
            let x = i as f64 * 1e-3;
            assert!((odd_tanh(x) - x.tanh()).abs() < 3e-16);
            assert_eq!(odd_tanh(-x), -odd_tanh(x));
        }
        assert_eq!(odd_tanh(800.0), 1.0);
    }
}
