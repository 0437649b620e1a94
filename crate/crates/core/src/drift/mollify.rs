//! Mollified drifts: Gaussian convolution (truncated at six standard
//! deviations) followed by a smooth cutoff onto `[-n, n]`.

use super::smooth::{Mollified, MollifySource, SmoothBoundedFn};
use super::{ControlFactor, Drift, DriftSpec};
use statrs::function::erf::erf;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

const TRUNCATION: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mollifier {
    n: u32,
    sd: f64,
    norm: f64,
}

#[inline]
fn smooth_step_weight(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

/// C^∞ transition from 0 (s ≤ 0) to 1 (s ≥ 1).
#[inline]
fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        let a = smooth_step_weight(s);
        a / (a + smooth_step_weight(1.0 - s))
    }
}

#[inline]
fn smooth_step_derivative(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        return 0.0;
    }
    let a = smooth_step_weight(s);
    let b = smooth_step_weight(1.0 - s);
    let da = a / (s * s);
    let db = -b / ((1.0 - s) * (1.0 - s));
    (da * b - a * db) / ((a + b) * (a + b))
}

impl Mollifier {
    pub fn new(n: u32) -> Self {
        assert!(n >= 1, "mollification index must be at least 1");
        Self {
            n,
            sd: 1.0 / n as f64,
            norm: erf(TRUNCATION * FRAC_1_SQRT_2),
        }
    }

    pub fn index(&self) -> u32 {
        self.n
    }

    pub fn kernel_sd(&self) -> f64 {
        self.sd
    }

    /// Truncated, renormalized Gaussian density.
    #[inline]
    pub fn kernel(&self, u: f64) -> f64 {
        let z = u / self.sd;
        if z.abs() > TRUNCATION {
            return 0.0;
        }
        (-0.5 * z * z).exp() / (self.sd * (2.0 * PI).sqrt() * self.norm)
    }

    #[inline]
    pub fn kernel_cdf(&self, u: f64) -> f64 {
        let z = u / self.sd;
        if z <= -TRUNCATION {
            0.0
        } else if z >= TRUNCATION {
            1.0
        } else {
            0.5 + 0.5 * erf(z * FRAC_1_SQRT_2) / self.norm
        }
    }

    /// Equal to 1 on `[-(n-1), n-1]`, 0 outside `[-n, n]`.
    #[inline]
    pub fn cutoff(&self, x: f64) -> f64 {
        1.0 - smooth_step(x.abs() - (self.n as f64 - 1.0))
    }

    #[inline]
    pub fn cutoff_derivative(&self, x: f64) -> f64 {
        let s = x.abs() - (self.n as f64 - 1.0);
        let d = smooth_step_derivative(s);
        if d == 0.0 {
            0.0
        } else if x > 0.0 {
            -d
        } else {
            d
        }
    }
}

/// Smooth, compactly supported approximation of a [`DriftSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct MollifiedSpec {
    pub n: u32,
    pub b1n: SmoothBoundedFn,
    pub b2n: SmoothBoundedFn,
    pub b3: ControlFactor,
    pub sigma: f64,
    pub source: DriftSpec,
}

pub fn mollify(spec: &DriftSpec, n: u32) -> MollifiedSpec {
    let mollifier = Mollifier::new(n);
    let wrap = |source| {
        SmoothBoundedFn::Mollified(Box::new(Mollified {
            source,
            mollifier,
        }))
    };
    let b1n = if spec.b1.is_zero() {
        SmoothBoundedFn::Zero
    } else {
        wrap(MollifySource::Smooth(spec.b1.clone()))
    };
    let b2n = if spec.b2.is_zero() {
        SmoothBoundedFn::Zero
    } else {
        wrap(MollifySource::Bv(spec.b2.clone()))
    };
    MollifiedSpec {
        n,
        b1n,
        b2n,
        b3: spec.b3,
        sigma: spec.sigma,
        source: spec.clone(),
    }
}

impl MollifiedSpec {
    /// `∂_x b_n(t, x, a) = ∂_x b1n + b2n' · b3(t, a)`.
    #[inline]
    pub fn partial_x(&self, t: f64, x: f64, a: f64) -> f64 {
        let d2 = self.b2n.partial_x(t, x);
        let mut v = self.b1n.partial_x(t, x);
        if d2 != 0.0 {
            v += d2 * self.b3.eval(t, a);
        }
        v
    }
}

impl Drift for MollifiedSpec {
    #[inline]
    fn drift(&self, t: f64, x: f64, a: f64) -> f64 {
        let v2 = self.b2n.eval(t, x);
        let mut v = self.b1n.eval(t, x);
        if v2 != 0.0 {
            v += v2 * self.b3.eval(t, a);
        }
        v
    }

    fn bound(&self) -> f64 {
        self.b1n.sup_norm() + self.b2n.sup_norm() * self.b3.bound()
    }

    fn sigma(&self) -> f64 {
        self.sigma
    }
}
