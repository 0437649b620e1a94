//! Sample statistics used across the estimators.

use serde::{Deserialize, Serialize};

/// Critical value for two-sided 95% normal intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl MeanSe {
    /// Summation is sequential in slice order, so results are reproducible.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, n }
    }

    /// Statistics of the per-sample difference `a - b`.
    pub fn paired(a: &[f64], b: &[f64]) -> Self {
        assert_eq!(a.len(), b.len(), "paired samples must have equal length");
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Self::of(&d)
    }

    pub fn ci95(&self) -> (f64, f64) {
        (
            self.mean - Z95 * self.std_error,
            self.mean + Z95 * self.std_error,
        )
    }

    pub fn sample_variance(&self) -> f64 {
        self.std_error * self.std_error * self.n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_se() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((m.std_error - sd / 2.0).abs() < 1e-15);
        let (lo, hi) = m.ci95();
        assert!(lo < m.mean && m.mean < hi);
        assert_eq!(MeanSe::of(&[3.0]).std_error, 0.0);
    }

    #[test]
    fn paired_antisymmetry() {
        let a = [0.3, 1.7, -2.2, 0.9];
        let b = [1.1, -0.4, 0.5, 0.25];
        assert_eq!(MeanSe::paired(&a, &b).mean, -MeanSe::paired(&b, &a).mean);
    }
}
