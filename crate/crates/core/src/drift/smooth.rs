use super::bv::BvFunction;
use super::mollify::Mollifier;
use super::odd_tanh;
use crate::quadrature::GaussHermite;

/// A bounded function of `(t, x)` with a known spatial derivative.
#[derive(Debug, Clone, PartialEq)]
pub enum SmoothBoundedFn {
    Zero,
    /// `amplitude · tanh(x / scale)`.
    Tanh { amplitude: f64, scale: f64 },
    /// `p(clamp(x, -clamp, clamp))` with `p(x) = Σ coeffs[k] x^k`.
    ClampedPolynomial { coeffs: Vec<f64>, clamp: f64 },
    Mollified(Box<Mollified>),
}

/// What a mollified function was built from.
#[derive(Debug, Clone, PartialEq)]
pub enum MollifySource {
    Smooth(SmoothBoundedFn),
    Bv(BvFunction),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mollified {
    pub source: MollifySource,
    pub mollifier: Mollifier,
}

impl Mollified {
    /// Convolution with the kernel, before the cutoff.
    fn smoothed(&self, t: f64, x: f64) -> f64 {
        let gh = GaussHermite::ten();
        let sd = self.mollifier.kernel_sd();
        match &self.source {
            MollifySource::Smooth(f) => gh
                .nodes
                .iter()
                .zip(&gh.weights)
                .map(|(z, w)| w * f.eval(t, x + sd * z))
                .sum(),
            MollifySource::Bv(f) => {
                let mut v = f.left_limit();
                for a in f.atoms() {
                    v += a.jump * self.mollifier.kernel_cdf(x - a.location);
                }
                if !f.ac_part().is_none() {
                    let ac = f.ac_part();
                    v += gh
                        .nodes
                        .iter()
                        .zip(&gh.weights)
                        .map(|(z, w)| w * ac.primitive(x + sd * z))
                        .sum::<f64>();
                }
                v
            }
        }
    }

    fn smoothed_derivative(&self, t: f64, x: f64) -> f64 {
        let gh = GaussHermite::ten();
        let sd = self.mollifier.kernel_sd();
        match &self.source {
            MollifySource::Smooth(f) => gh
                .nodes
                .iter()
                .zip(&gh.weights)
                .map(|(z, w)| w * f.partial_x(t, x + sd * z))
                .sum(),
            MollifySource::Bv(f) => {
                let mut v = 0.0;
                for a in f.atoms() {
                    v += a.jump * self.mollifier.kernel(x - a.location);
                }
                if !f.ac_part().is_none() {
                    let ac = f.ac_part();
                    v += gh
                        .nodes
                        .iter()
                        .zip(&gh.weights)
                        .map(|(z, w)| w * ac.density(x + sd * z))
                        .sum::<f64>();
                }
                v
            }
        }
    }

    fn source_sup(&self) -> f64 {
        match &self.source {
            MollifySource::Smooth(f) => f.sup_norm(),
            MollifySource::Bv(f) => f.sup_norm(),
        }
    }
}

impl SmoothBoundedFn {
    #[inline]
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match self {
            SmoothBoundedFn::Zero => 0.0,
            SmoothBoundedFn::Tanh { amplitude, scale } => amplitude * odd_tanh(x / scale),
            SmoothBoundedFn::ClampedPolynomial { coeffs, clamp } => {
                let u = x.clamp(-*clamp, *clamp);
                coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
            }
            SmoothBoundedFn::Mollified(m) => {
                let chi = m.mollifier.cutoff(x);
                if chi == 0.0 {
                    0.0
                } else {
                    chi * m.smoothed(t, x)
                }
            }
        }
    }

    #[inline]
    pub fn partial_x(&self, t: f64, x: f64) -> f64 {
        match self {
            SmoothBoundedFn::Zero => 0.0,
            SmoothBoundedFn::Tanh { amplitude, scale } => {
                let c = (x / scale).cosh();
                amplitude / (scale * c * c)
            }
            SmoothBoundedFn::ClampedPolynomial { coeffs, clamp } => {
                if x.abs() > *clamp {
                    return 0.0;
                }
                let mut acc = 0.0;
                for (k, c) in coeffs.iter().enumerate().skip(1).rev() {
                    acc = acc * x + k as f64 * c;
                }
                acc
            }
            SmoothBoundedFn::Mollified(m) => {
                let chi = m.mollifier.cutoff(x);
                if chi == 0.0 {
                    return 0.0;
                }
                let dchi = m.mollifier.cutoff_derivative(x);
                let mut v = chi * m.smoothed_derivative(t, x);
                if dchi != 0.0 {
                    v += dchi * m.smoothed(t, x);
                }
                v
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            SmoothBoundedFn::Zero => 0.0,
            SmoothBoundedFn::Tanh { amplitude, .. } => amplitude.abs(),
            SmoothBoundedFn::ClampedPolynomial { coeffs, clamp } => coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c.abs() * clamp.powi(k as i32))
                .sum(),
            SmoothBoundedFn::Mollified(m) => m.source_sup(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, SmoothBoundedFn::Zero)
    }

    /// True when `f(t, -x) = -f(t, x)` holds structurally.
    pub fn is_odd(&self) -> bool {
        match self {
            SmoothBoundedFn::Zero | SmoothBoundedFn::Tanh { .. } => true,
            SmoothBoundedFn::ClampedPolynomial { coeffs, .. } => coeffs
                .iter()
                .enumerate()
                .all(|(k, c)| k % 2 == 1 || *c == 0.0),
            SmoothBoundedFn::Mollified(m) => match &m.source {
                MollifySource::Smooth(f) => f.is_odd(),
                MollifySource::Bv(_) => false,
            },
        }
    }
}
