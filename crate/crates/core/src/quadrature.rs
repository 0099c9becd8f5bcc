//! Expectations over centred Gaussian vectors.
//!
//! A [`GaussianRule`] is a weighted point set approximating `N(0, C)`. Rules
//! come either from a tensor-product Gauss–Hermite grid or from a Monte-Carlo
//! bank of standard normals. Monte-Carlo banks are keyed by a stream id so that
//! every expectation taken with the same id reuses the same draws.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, PsdSqrt, COND_WARN};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Gauss–Hermite for one-dimensional pre-activations, Monte-Carlo otherwise.
    #[default]
    Auto,
    GaussHermite,
    MonteCarlo,
}

/// Gauss–Hermite nodes and weights for `∫ f(x) e^{-x²} dx`.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "Gauss–Hermite order must be >= 1");
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let n = order;
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`.
pub fn standard_normal_rule(order: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(order);
    let s = std::f64::consts::PI.sqrt();
    let nodes = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let weights: Vec<f64> = w.iter().map(|v| v / s).collect();
    let total: f64 = weights.iter().sum();
    (nodes, weights.iter().map(|v| v / total).collect())
}

/// Weighted points in `R^dim`, stored row-major.
#[derive(Debug, Clone)]
pub struct GaussianRule {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub monte_carlo: bool,
}

/// A mean with its Monte-Carlo standard error (zero for quadrature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl GaussianRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Apply `x ↦ S x` to every point.
    pub fn transformed(&self, s: &DMatrix<f64>) -> GaussianRule {
        let dim = self.dim;
        assert_eq!(s.shape(), (dim, dim));
        let mut points = vec![0.0; self.points.len()];
        for (src, dst) in self
            .points
            .chunks_exact(dim)
            .zip(points.chunks_exact_mut(dim))
        {
            for r in 0..dim {
                let mut acc = 0.0;
                for c in 0..dim {
                    acc += s[(r, c)] * src[c];
                }
                dst[r] = acc;
            }
        }
        GaussianRule {
            dim,
            points,
            weights: self.weights.clone(),
            monte_carlo: self.monte_carlo,
        }
    }

    /// Weighted mean of a scalar function with its standard error.
    pub fn estimate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> Estimate {
        let mut mean = 0.0;
        let mut sq = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let v = f(self.point(i));
            mean += w * v;
            sq += w * v * v;
        }
        let stderr = if self.monte_carlo && self.len() > 1 {
            let n = self.len() as f64;
            let var = (sq - mean * mean).max(0.0) * n / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Estimate { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub method: Method,
    pub n_samples: usize,
    pub gh_order: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            method: Method::Auto,
            n_samples: 200_000,
            gh_order: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpectationEngine {
    config: EngineConfig,
    gh_nodes: Vec<f64>,
    gh_weights: Vec<f64>,
}

impl ExpectationEngine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        if config.gh_order == 0 || config.gh_order > 256 {
            return Err(Error::config(format!(
                "gh_order must be in 1..=256, got {}",
                config.gh_order
            )));
        }
        if config.n_samples < 2 {
            return Err(Error::config("n_samples must be >= 2"));
        }
        let (gh_nodes, gh_weights) = standard_normal_rule(config.gh_order);
        Ok(ExpectationEngine {
            config,
            gh_nodes,
            gh_weights,
        })
    }

    pub fn monte_carlo(n_samples: usize, seed: u64) -> Result<Self> {
        Self::new(EngineConfig {
            method: Method::MonteCarlo,
            n_samples,
            seed,
            ..EngineConfig::default()
        })
    }

    pub fn gauss_hermite(order: usize) -> Result<Self> {
        Self::new(EngineConfig {
            method: Method::GaussHermite,
            gh_order: order,
            ..EngineConfig::default()
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Whether expectations over pre-activations of width `width` use
    /// quadrature.
    pub fn uses_quadrature(&self, width: usize) -> bool {
        match self.config.method {
            Method::GaussHermite => true,
            Method::MonteCarlo => false,
            Method::Auto => width == 1,
        }
    }

    /// Rule for `N(0, I_dim)`. Monte-Carlo banks depend only on
    /// `(seed, stream, dim)`.
    pub fn standard(&self, dim: usize, quadrature: bool, stream: u64) -> Result<GaussianRule> {
        if quadrature {
            let order = self.config.gh_order;
            let count = order
                .checked_pow(dim as u32)
                .filter(|&c| c <= 1 << 22)
                .ok_or_else(|| {
                    Error::config(format!(
                        "Gauss–Hermite grid of order {order} in {dim} dimensions is too large"
                    ))
                })?;
            let mut points = Vec::with_capacity(count * dim);
            let mut weights = Vec::with_capacity(count);
            let mut idx = vec![0usize; dim];
            for _ in 0..count {
                let mut w = 1.0;
                for &k in &idx {
                    points.push(self.gh_nodes[k]);
                    w *= self.gh_weights[k];
                }
                weights.push(w);
                for slot in idx.iter_mut().rev() {
                    *slot += 1;
                    if *slot < order {
                        break;
                    }
                    *slot = 0;
                }
            }
            Ok(GaussianRule {
                dim,
                points,
                weights,
                monte_carlo: false,
            })
        } else {
            let n = self.config.n_samples;
            let mut rng = seeds::rng(
                self.config.seed,
                &[seeds::tag::QUADRATURE, stream, dim as u64],
            );
            let points = (0..n * dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(GaussianRule {
                dim,
                points,
                weights: vec![1.0 / n as f64; n],
                monte_carlo: true,
            })
        }
    }

    /// Rule for `N(0, cov)`. `(r, s)` label the covariance in errors.
    pub fn rule(
        &self,
        cov: &DMatrix<f64>,
        quadrature: bool,
        stream: u64,
        r: usize,
        s: usize,
    ) -> Result<GaussianRule> {
        let root = checked_sqrt(cov, r, s)?;
        Ok(self
            .standard(cov.nrows(), quadrature, stream)?
            .transformed(&root.sqrt))
    }
}

/// PSD square root, failing with the block labels and warning when near
/// singular.
pub fn checked_sqrt(cov: &DMatrix<f64>, r: usize, s: usize) -> Result<PsdSqrt> {
    let root = psd_sqrt(cov).map_err(|min| Error::NotPsd {
        r,
        s,
        min_eigenvalue: min,
    })?;
    if root.condition > COND_WARN && root.min_eigenvalue > 0.0 {
        log::debug!(
            "covariance ({r}, {s}) is near singular (condition {:.3e})",
            root.condition
        );
    }
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn hermite_rule_integrates_moments() {
        for order in [1usize, 2, 5, 20, 64] {
            let (x, w) = standard_normal_rule(order);
            let moment = |k: i32| x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum::<f64>();
            assert_relative_eq!(moment(0), 1.0, epsilon = 1e-13);
            assert!(moment(1).abs() < 1e-12);
            if order >= 2 {
                assert_relative_eq!(moment(2), 1.0, epsilon = 1e-12);
            }
            if order >= 3 {
                assert_relative_eq!(moment(4), 3.0, epsilon = 1e-11);
            }
            if order >= 4 {
                assert_relative_eq!(moment(6), 15.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn hermite_rule_integrates_smooth_function() {
        // E[cos Z] = e^{-1/2}
        let (x, w) = standard_normal_rule(64);
        let v: f64 = x.iter().zip(&w).map(|(x, w)| w * x.cos()).sum();
        assert_relative_eq!(v, (-0.5f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn tensor_rule_reproduces_covariance() {
        let eng = ExpectationEngine::gauss_hermite(10).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let rule = eng.rule(&cov, true, 0, 1, 1).unwrap();
        assert_eq!(rule.len(), 100);
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            let e = rule.estimate(|x| x[a] * x[b]).mean;
            assert_relative_eq!(e, cov[(a, b)], epsilon = 1e-12);
        }
    }

    #[test]
    fn monte_carlo_mean_is_within_tolerance() {
        let n = 50_000;
        let eng = ExpectationEngine::monte_carlo(n, 3).unwrap();
        let cov = DMatrix::from_row_slice(1, 1, &[2.5]);
        let rule = eng.rule(&cov, false, 7, 1, 1).unwrap();
        let est = rule.estimate(|x| x[0]);
        assert!(est.mean.abs() < 4.0 * (2.5 / n as f64).sqrt());
        assert_relative_eq!(est.stderr, (2.5 / n as f64).sqrt(), max_relative = 0.05);
    }

    #[test]
    fn monte_carlo_banks_are_common_per_stream() {
        let eng = ExpectationEngine::monte_carlo(100, 1).unwrap();
        let a = eng.standard(2, false, 5).unwrap();
        let b = eng.standard(2, false, 5).unwrap();
        let c = eng.standard(2, false, 6).unwrap();
        assert_eq!(a.points, b.points);
        assert_ne!(a.points, c.points);
    }

    #[test]
    fn stderr_halves_with_four_times_samples() {
        let cov = DMatrix::from_row_slice(1, 1, &[1.0]);
        let se = |n| {
            let eng = ExpectationEngine::monte_carlo(n, 9).unwrap();
            eng.rule(&cov, false, 0, 1, 1)
                .unwrap()
                .estimate(|x| x[0] * x[0])
                .stderr
        };
        let ratio = se(80_000) / se(20_000);
        assert!((ratio - 0.5).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn non_psd_covariance_names_the_block() {
        let eng = ExpectationEngine::gauss_hermite(4).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        match eng.rule(&cov, true, 0, 2, 5) {
            Err(Error::NotPsd { r: 2, s: 5, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn auto_method_uses_quadrature_only_for_scalar_preactivations() {
        let eng = ExpectationEngine::new(EngineConfig::default()).unwrap();
        assert!(eng.uses_quadrature(1));
        assert!(!eng.uses_quadrature(2));
        assert!(ExpectationEngine::new(EngineConfig {
            gh_order: 0,
            ..Default::default()
        })
        .is_err());
    }
}
