//! 2-D Gaussian product-kernel density estimation over normalized
//! diagram coordinates.

use serde::{Deserialize, Serialize};

/// Per-axis bandwidths never go below this, which keeps zero-variance
/// sample sets evaluable.
pub const BANDWIDTH_FLOOR: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum KdeError {
    #[error("need at least one sample")]
    NoSamples,
    #[error("sample {0} lies outside [0,1]²")]
    OutOfRange(usize),
    #[error("bandwidth must be positive, got ({0}, {1})")]
    BadBandwidth(f64, f64),
}

/// Gaussian product-kernel estimate in X,Y space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde2d {
    samples: Vec<(f64, f64)>,
    bandwidth: (f64, f64),
}

fn sample_std(values: impl Iterator<Item = f64> + Clone, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

impl Kde2d {
    /// Fits the estimate. Without an explicit bandwidth, Scott's rule
    /// `h = n^(-1/6) · σ_axis` is applied per axis (sample standard
    /// deviation), floored at [`BANDWIDTH_FLOOR`].
    pub fn fit(samples: &[(f64, f64)], bandwidth: Option<(f64, f64)>) -> Result<Self, KdeError> {
        if samples.is_empty() {
            return Err(KdeError::NoSamples);
        }
        for (i, (x, y)) in samples.iter().enumerate() {
            if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
                return Err(KdeError::OutOfRange(i));
            }
        }
        let bandwidth = match bandwidth {
            Some((hx, hy)) => {
                if hx <= 0.0 || hy <= 0.0 || !hx.is_finite() || !hy.is_finite() {
                    return Err(KdeError::BadBandwidth(hx, hy));
                }
                (hx, hy)
            }
            None => {
                let n = samples.len();
                let factor = (n as f64).powf(-1.0 / 6.0);
                let sx = sample_std(samples.iter().map(|s| s.0), n);
                let sy = sample_std(samples.iter().map(|s| s.1), n);
                (
                    (factor * sx).max(BANDWIDTH_FLOOR),
                    (factor * sy).max(BANDWIDTH_FLOOR),
                )
            }
        };
        Ok(Self {
            samples: samples.to_vec(),
            bandwidth,
        })
    }

    pub fn bandwidth(&self) -> (f64, f64) {
        self.bandwidth
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Density at a point; non-negative and integrates to 1 over the
    /// plane.
    pub fn density(&self, x: f64, y: f64) -> f64 {
        let (hx, hy) = self.bandwidth;
        let norm = 1.0 / (2.0 * std::f64::consts::PI * hx * hy);
        let sum: f64 = self
            .samples
            .iter()
            .map(|&(sx, sy)| {
                let dx = (x - sx) / hx;
                let dy = (y - sy) / hy;
                (-0.5 * (dx * dx + dy * dy)).exp()
            })
            .sum();
        norm * sum / self.samples.len() as f64
    }

    /// Maximum density over the centers of a `side × side` grid; used to
    /// map densities onto [0,1] scores comparable with classifier output.
    pub fn peak_on_grid(&self, side: usize) -> f64 {
        let mut peak = 0.0f64;
        for row in 0..side {
            let y = (row as f64 + 0.5) / side as f64;
            for col in 0..side {
                let x = (col as f64 + 0.5) / side as f64;
                peak = peak.max(self.density(x, y));
            }
        }
        peak
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_sample_peak_matches_closed_form() {
        let kde = Kde2d::fit(&[(0.5, 0.5)], Some((0.1, 0.1))).unwrap();
        // Peak of a product of two 1-D Gaussians: 1 / (2π h²).
        let expected = 1.0 / (2.0 * std::f64::consts::PI * 0.01);
        assert!((kde.density(0.5, 0.5) - expected).abs() < 1e-9);
        assert!((expected - 15.9155).abs() < 1e-3);
    }

    #[test]
    fn density_ten_bandwidths_away_is_negligible() {
        let kde = Kde2d::fit(&[(0.2, 0.2)], Some((0.05, 0.05))).unwrap();
        let peak = kde.density(0.2, 0.2);
        let far = kde.density(0.7, 0.2); // 10 h away on one axis
        assert!(far < 1e-15 * peak);
    }

    #[test]
    fn zero_variance_axis_hits_bandwidth_floor() {
        let samples = vec![(0.5, 0.2), (0.5, 0.4), (0.5, 0.8)];
        let kde = Kde2d::fit(&samples, None).unwrap();
        assert_eq!(kde.bandwidth().0, BANDWIDTH_FLOOR);
        assert!(kde.bandwidth().1 > BANDWIDTH_FLOOR);
    }

    #[test]
    fn monte_carlo_integral_is_close_to_one() {
        // Interior points keep boundary leakage well under the tolerance.
        let mut rng = StdRng::seed_from_u64(2024);
        let samples: Vec<(f64, f64)> = (0..50)
            .map(|_| (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)))
            .collect();
        let kde = Kde2d::fit(&samples, None).unwrap();

        let trials = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let x: f64 = rng.random_range(0.0..1.0);
            let y: f64 = rng.random_range(0.0..1.0);
            acc += kde.density(x, y);
        }
        let integral = acc / trials as f64;
        assert!(
            (0.97..=1.03).contains(&integral),
            "Monte-Carlo integral {integral}"
        );
    }

    #[test]
    fn density_is_nonnegative_everywhere() {
        let samples = vec![(0.1, 0.9), (0.9, 0.1), (0.5, 0.5)];
        let kde = Kde2d::fit(&samples, None).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let d = kde.density(i as f64 / 19.0, j as f64 / 19.0);
                assert!(d >= 0.0 && d.is_finite());
            }
        }
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(matches!(Kde2d::fit(&[], None), Err(KdeError::NoSamples)));
    }
}
