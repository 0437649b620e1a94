//! Bounded-variation functions stored through their derivative measure.

use serde::{Deserialize, Serialize};

/// A point mass `jump · δ_location` of the derivative measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub location: f64,
    pub jump: f64,
}

/// Absolutely continuous part of the derivative measure, with a closed-form
/// primitive `∫_{-∞}^x density`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AcPart {
    None,
    /// Primitive `amplitude · (tanh(x/scale) + 1)`.
    Tanh { amplitude: f64, scale: f64 },
    /// Primitive `amplitude · exp(-(x/width)²)`.
    Bump { amplitude: f64, width: f64 },
}

impl AcPart {
    #[inline]
    pub fn density(&self, x: f64) -> f64 {
        match *self {
            AcPart::None => 0.0,
            AcPart::Tanh { amplitude, scale } => {
                let c = (x / scale).cosh();
                amplitude / (scale * c * c)
            }
            AcPart::Bump { amplitude, width } => {
                let u = x / width;
                -2.0 * amplitude * u / width * (-u * u).exp()
            }
        }
    }

    #[inline]
    pub fn primitive(&self, x: f64) -> f64 {
        match *self {
            AcPart::None => 0.0,
            AcPart::Tanh { amplitude, scale } => amplitude * (super::odd_tanh(x / scale) + 1.0),
            AcPart::Bump { amplitude, width } => {
                let u = x / width;
                amplitude * (-u * u).exp()
            }
        }
    }

    pub fn total_variation(&self) -> f64 {
        match *self {
            AcPart::None => 0.0,
            AcPart::Tanh { amplitude, .. } => 2.0 * amplitude.abs(),
            AcPart::Bump { amplitude, .. } => 2.0 * amplitude.abs(),
        }
    }

    fn sup_primitive(&self) -> f64 {
        match *self {
            AcPart::None => 0.0,
            AcPart::Tanh { amplitude, .. } => 2.0 * amplitude.abs(),
            AcPart::Bump { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, AcPart::None)
    }
}

/// A right-continuous function of bounded variation,
/// `f(x) = f(-∞) + Σ_{loc ≤ x} jump + ∫_{-∞}^x density`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvFunction {
    left_limit: f64,
    atoms: Vec<Atom>,
    ac: AcPart,
}

impl BvFunction {
    pub fn new(left_limit: f64, mut atoms: Vec<Atom>, ac: AcPart) -> Self {
        atoms.retain(|a| a.jump != 0.0);
        atoms.sort_by(|a, b| a.location.total_cmp(&b.location));
        Self {
            left_limit,
            atoms,
            ac,
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self::new(c, Vec::new(), AcPart::None)
    }

    /// `-sgn(x)·1{|x| > rho}` in its right-continuous version.
    pub fn corridor(rho: f64) -> Self {
        Self::new(
            1.0,
            vec![
                Atom {
                    location: -rho,
                    jump: -1.0,
                },
                Atom {
                    location: rho,
                    jump: -1.0,
                },
            ],
            AcPart::None,
        )
    }

    /// `-sgn(x)` with a single atom of size -2 at the origin.
    pub fn negative_sign() -> Self {
        Self::new(
            1.0,
            vec![Atom {
                location: 0.0,
                jump: -2.0,
            }],
            AcPart::None,
        )
    }

    /// `amplitude · tanh(x/scale)`.
    pub fn tanh(amplitude: f64, scale: f64) -> Self {
        Self::new(-amplitude, Vec::new(), AcPart::Tanh { amplitude, scale })
    }

    /// `amplitude · exp(-(x/width)²)`.
    pub fn bump(amplitude: f64, width: f64) -> Self {
        Self::new(0.0, Vec::new(), AcPart::Bump { amplitude, width })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let mut v = self.left_limit;
        for a in &self.atoms {
            if a.location <= x {
                v += a.jump;
            } else {
                break;
            }
        }
        v + self.ac.primitive(x)
    }

    #[inline]
    pub fn density(&self, x: f64) -> f64 {
        self.ac.density(x)
    }

    pub fn left_limit(&self) -> f64 {
        self.left_limit
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn ac_part(&self) -> &AcPart {
        &self.ac
    }

    /// The derivative measure as (atoms, absolutely continuous part).
    pub fn derivative_measure(&self) -> (&[Atom], &AcPart) {
        (&self.atoms, &self.ac)
    }

    pub fn total_variation(&self) -> f64 {
        self.atoms.iter().map(|a| a.jump.abs()).sum::<f64>() + self.ac.total_variation()
    }

    /// Upper bound on `sup |f|`; exact when there is no absolutely continuous part.
    pub fn sup_norm(&self) -> f64 {
        let mut v = self.left_limit;
        let mut best = v.abs();
        for a in &self.atoms {
            v += a.jump;
            best = best.max(v.abs());
        }
        best + self.ac.sup_primitive()
    }

    pub fn is_zero(&self) -> bool {
        self.left_limit == 0.0 && self.atoms.is_empty() && self.ac.is_none()
    }
}

/// `sgn` with `sgn(0) = 0`.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::simpson;

    #[test]
    fn corridor_values_and_measure() {
        let b2 = BvFunction::corridor(2.0);
        assert_eq!(b2.eval(-3.0), 1.0);
        assert_eq!(b2.eval(0.0), 0.0);
        assert_eq!(b2.eval(3.0), -1.0);
        // right-continuous at the atoms
        assert_eq!(b2.eval(-2.0), 0.0);
        assert_eq!(b2.eval(2.0), -1.0);
        let (atoms, ac) = b2.derivative_measure();
        assert_eq!(atoms.len(), 2);
        assert!(atoms.iter().all(|a| a.jump == -1.0));
        assert!(ac.is_none());
        assert_eq!(b2.total_variation(), 2.0);
        assert_eq!(b2.sup_norm(), 1.0);
    }

    #[test]
    fn jumps_match_eval_differences() {
        let b2 = BvFunction::corridor(2.0);
        for a in b2.atoms() {
            let d = b2.eval(a.location) - b2.eval(a.location - 1e-9);
            assert_eq!(d, a.jump);
        }
    }

    #[test]
    fn zero_and_smooth_have_no_atoms() {
        let z = BvFunction::zero();
        assert!(z.atoms().is_empty());
        assert_eq!(z.density(1.3), 0.0);
        assert!(z.is_zero());
        let s = BvFunction::tanh(-1.0, 2.0);
        assert!(s.atoms().is_empty());
        assert!((s.eval(0.7) + (0.35f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn total_variation_matches_quadrature() {
        for f in [BvFunction::tanh(0.7, 1.5), BvFunction::bump(-1.2, 0.8)] {
            let tv = simpson(|x| f.density(x).abs(), -60.0, 60.0, 200_000);
            assert!((tv - f.total_variation()).abs() < 1e-8, "{tv}");
        }
    }

    #[test]
    fn reconstruction_identity() {
        let mut f = BvFunction::new(
            0.3,
            vec![
                Atom {
                    location: -1.0,
                    jump: 0.5,
                },
                Atom {
                    location: 0.25,
                    jump: -1.25,
                },
            ],
            AcPart::Bump {
                amplitude: 0.4,
                width: 1.1,
            },
        );
        let pairs = [(-2.0, 2.0), (-1.0, 0.25), (-0.5, 0.1), (0.25, 3.0)];
        for &(x1, x2) in &pairs {
            let jumps: f64 = f
                .atoms()
                .iter()
                .filter(|a| a.location > x1 && a.location <= x2)
                .map(|a| a.jump)
                .sum();
            let dens = simpson(|x| f.density(x), x1, x2, 20_000);
            assert!((f.eval(x2) - f.eval(x1) - jumps - dens).abs() < 1e-8);
        }
        f = BvFunction::tanh(1.0, 1.0);
        assert!((f.eval(1e3) - 1.0).abs() < 1e-12);
    }
}
