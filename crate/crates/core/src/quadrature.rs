//! Small numerical integration helpers.

use nalgebra::{DMatrix, SymmetricEigen};
use std::sync::OnceLock;

/// Composite Simpson rule on `[a, b]` with `n` (rounded up to even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 1 { n + 1 } else { n.max(2) };
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Gauss–Hermite rule for the standard normal weight: `E[f(Z)] ≈ Σ wᵢ f(zᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch on the probabilists' Hermite Jacobi matrix.
    pub fn new(n: usize) -> Self {
        let mut j = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64).sqrt();
            j[(k - 1, k)] = off;
            j[(k, k - 1)] = off;
        }
        let eig = SymmetricEigen::new(j);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize so that odd integrands vanish exactly
        for i in 0..n / 2 {
            let k = n - 1 - i;
            let z = 0.5 * (pairs[k].0 - pairs[i].0);
            let w = 0.5 * (pairs[k].1 + pairs[i].1);
            pairs[i] = (-z, w);
            pairs[k] = (z, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// The shared 10-point rule; its largest node is below 4.9.
    pub fn ten() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(10))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_polynomial_exact() {
        let v = simpson(|x| x * x * x - x, 0.0, 2.0, 10);
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hermite_moments() {
        let gh = GaussHermite::ten();
        let m = |p: i32| -> f64 {
            gh.nodes
                .iter()
                .zip(&gh.weights)
                .map(|(z, w)| w * z.powi(p))
                .sum()
        };
        assert!((m(0) - 1.0).abs() < 1e-14);
        assert!(m(1).abs() < 1e-15);
        assert!((m(2) - 1.0).abs() < 1e-12);
        assert!((m(4) - 3.0).abs() < 1e-11);
        assert!((m(8) - 105.0).abs() < 1e-8);
        assert!(gh.nodes.iter().all(|z| z.abs() < 6.0));
    }
}
