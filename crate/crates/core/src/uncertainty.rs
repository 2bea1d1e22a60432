//! Mahalanobis consistency checks and post-hoc softmax temperature calibration.

use std::path::Path;

use nalgebra::{Cholesky, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::CorrelationVolume;
use crate::error::{Error, Result};
use crate::estimate::{array_to_matrix, estimate_covariance, mean_pose, soft_argmax, softmax_weights, PoseEstimate};
use crate::geometry::Pose;
use crate::scalar::Real;

/// Ridge always added to the covariance before inversion.
pub const LAMBDA_FLOOR: f64 = 1e-9;
/// Ridges above this mark the covariance as degenerate.
pub const LAMBDA_DEGENERATE: f64 = 1e-6;
/// Dimension of the pose, i.e. the expected mean of a well-calibrated `d^2`.
pub const CHI2_TARGET: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mahalanobis {
    pub d2: f64,
    /// Ridge that made the covariance factorisable.
    pub lambda: f64,
}

impl Mahalanobis {
    pub fn degenerate(&self) -> bool {
        self.lambda > LAMBDA_DEGENERATE
    }

    /// Fails with [`Error::DegenerateCovariance`] if the ridge had to grow past the threshold.
    pub fn checked(self) -> Result<f64> {
        if self.degenerate() {
            Err(Error::DegenerateCovariance { lambda: self.lambda })
        } else {
            Ok(self.d2)
        }
    }
}

fn residual<T: Real>(gt: &Pose<T>, mean: &Pose<T>) -> Vector3<f64> {
    let r = gt.residual(mean);
    Vector3::new(r[0].f64(), r[1].f64(), r[2].f64())
}

/// `r^T (Sigma + lambda I)^-1 r` with the smallest ridge `>= 1e-9` (growing tenfold) that factorises.
pub fn mahalanobis_sq_raw(residual: Vector3<f64>, covariance: &Matrix3<f64>) -> Result<Mahalanobis> {
    if !residual.iter().chain(covariance.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("residual or covariance".into()));
    }
    let sym = (covariance + covariance.transpose()) * 0.5;
    let scale = sym.diagonal().abs().max().max(1.0);
    let mut lambda = LAMBDA_FLOOR;
    loop {
        if let Some(ch) = Cholesky::new(sym + Matrix3::identity() * lambda) {
            let y = ch.solve(&residual);
            let d2 = residual.dot(&y).max(0.0);
            if lambda > LAMBDA_DEGENERATE {
                log::warn!("degenerate covariance: ridge {lambda:e} needed for Mahalanobis distance");
            }
            return Ok(Mahalanobis { d2, lambda });
        }
        lambda *= 10.0;
        if lambda > 1e6 * scale {
            return Err(Error::DegenerateCovariance { lambda });
        }
    }
}

/// Squared Mahalanobis distance of `gt` from the estimate (heading residual wrapped).
pub fn mahalanobis_sq<T: Real>(gt: &Pose<T>, est: &PoseEstimate<T>) -> Result<Mahalanobis> {
    mahalanobis_sq_raw(residual(gt, &est.mean), &array_to_matrix(&est.covariance))
}

/// A stored correlation volume with its ground truth and the pose found at `beta0`.
#[derive(Debug, Clone)]
pub struct CalibrationEntry<T> {
    pub volume: CorrelationVolume<T>,
    pub gt: Pose<T>,
    pub mean: Pose<T>,
}

impl<T: Real> CalibrationEntry<T> {
    /// Fixes the mean at the soft-argmax for `beta0`.
    pub fn new(volume: CorrelationVolume<T>, gt: Pose<T>, beta0: T) -> Result<Self> {
        let (mean, _) = soft_argmax(volume.grid(), &volume, beta0)?;
        Ok(Self { volume, gt, mean })
    }

    /// Covariance for temperature `beta`; the mean stays the `beta0` pose.
    pub fn estimate_at(&self, beta: T) -> PoseEstimate<T> {
        let grid = self.volume.grid();
        let w = softmax_weights(self.volume.scores(), beta);
        let cov = estimate_covariance(grid, &w, &mean_pose(grid, &w));
        PoseEstimate {
            mean: self.mean,
            covariance: cov.matrix,
            beta_used: beta,
            covariance_clamp: cov.clamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub beta_star: f64,
    pub mean_mahalanobis: f64,
    /// `(beta, mean d^2)` ascending in beta.
    pub sweep: Vec<(f64, f64)>,
    pub n_samples: usize,
    /// Samples whose covariance needed a ridge above the degeneracy threshold at `beta_star`.
    pub degenerate_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub beta_star: f64,
    pub mean_mahalanobis: f64,
    pub n_samples: usize,
}

impl CalibrationResult {
    pub fn summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            beta_star: self.beta_star,
            mean_mahalanobis: self.mean_mahalanobis,
            n_samples: self.n_samples,
        }
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_beta_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && n >= 2) {
        return Err(Error::config("beta_grid", "needs 0 < lo < hi and at least two points"));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

/// Default sweep: 25 points over [0.1, 10].
pub fn default_beta_grid() -> Vec<f64> {
    log_beta_grid(0.1, 10.0, 25).expect("valid default")
}

/// Mean `d^2` and number of degenerate covariances at temperature `beta`.
pub fn mean_mahalanobis<T: Real>(entries: &[CalibrationEntry<T>], beta: f64) -> Result<(f64, usize)> {
    let b = T::of(beta);
    let per: Vec<Result<Mahalanobis>> = entries
        .par_iter()
        .map(|e| mahalanobis_sq(&e.gt, &e.estimate_at(b)))
        .collect();
    let mut total = 0.0;
    let mut degenerate = 0;
    for m in per {
        let m = m?;
        total += m.d2;
        degenerate += usize::from(m.degenerate());
    }
    Ok((total / entries.len() as f64, degenerate))
}

/// Sweeps `beta_grid`, then refines by bisection in `ln beta` where the mean
/// `d^2` crosses 3; `beta_star` is the value closest to 3.
pub fn calibrate_beta<T: Real>(entries: &[CalibrationEntry<T>], beta_grid: &[f64]) -> Result<CalibrationResult> {
    if entries.is_empty() {
        return Err(Error::Data("calibration needs at least one sample".into()));
    }
    if beta_grid.is_empty() || beta_grid.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::config("beta_grid", "must be non-empty and positive"));
    }
    if beta_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("beta_grid", "must be strictly ascending"));
    }
    let mut sweep = Vec::with_capacity(beta_grid.len());
    for &b in beta_grid {
        sweep.push((b, mean_mahalanobis(entries, b)?.0));
    }
    let gap = |d: f64| (d - CHI2_TARGET).abs();
    let (mut beta_star, mut best) = sweep
        .iter()
        .copied()
        .min_by(|a, b| gap(a.1).total_cmp(&gap(b.1)))
        .expect("non-empty sweep");
    if let Some(w) = sweep
        .windows(2)
        .find(|w| (w[0].1 - CHI2_TARGET) * (w[1].1 - CHI2_TARGET) <= 0.0)
    {
        let (mut lo, mut hi) = (w[0].0.ln(), w[1].0.ln());
        let rising = w[1].1 >= w[0].1;
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            let d = mean_mahalanobis(entries, mid.exp())?.0;
            if gap(d) < gap(best) {
                beta_star = mid.exp();
                best = d;
            }
            if (d < CHI2_TARGET) == rising {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-10 {
                break;
            }
        }
    }
    let (mean, degenerate_samples) = mean_mahalanobis(entries, beta_star)?;
    Ok(CalibrationResult {
        beta_star,
        mean_mahalanobis: mean,
        sweep,
        n_samples: entries.len(),
        degenerate_samples,
    })
}

pub fn write_calibration_csv(path: &Path, result: &CalibrationResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["beta", "mean_mahalanobis"])?;
    for (b, d) in &result.sweep {
        w.write_record([b.to_string(), d.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_calibration_summary(path: &Path, result: &CalibrationResult) -> Result<()> {
    let text = serde_json::to_string_pretty(&result.summary())?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Two-sided normal quantile: `z` with `P(|N(0,1)| <= z) = confidence`.
pub fn normal_bound(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::config("confidence", "must lie in (0, 1)"));
    }
    let n = Normal::standard();
    Ok(n.inverse_cdf(0.5 + confidence / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub confidence: f64,
    pub z: f64,
    /// Fraction of samples with `|error_i| <= z * sigma_i`, per component.
    pub per_component: [f64; 3],
    pub n_samples: usize,
}

/// Per-component marginal coverage; the interval is closed.
pub fn coverage_report<T: Real>(errors: &[[T; 3]], estimates: &[PoseEstimate<T>], confidence: f64) -> Result<CoverageReport> {
    if errors.len() != estimates.len() {
        return Err(Error::Shape(format!(
            "{} errors but {} estimates",
            errors.len(),
            estimates.len()
        )));
    }
    if errors.is_empty() {
        return Err(Error::Data("coverage needs at least one sample".into()));
    }
    let z = normal_bound(confidence)?;
    let mut hits = [0usize; 3];
    for (e, est) in errors.iter().zip(estimates) {
        let sd = est.std_devs();
        for i in 0..3 {
            if e[i].f64().abs() <= z * sd[i].f64() {
                hits[i] += 1;
            }
        }
    }
    let n = errors.len() as f64;
    Ok(CoverageReport {
        confidence,
        z,
        per_component: hits.map(|h| h as f64 / n),
        n_samples: errors.len(),
    })
}

/// Draws from known Gaussians with scores equal to the exact log-likelihood on
/// a grid of `sigma / 2` spacing spanning `±5 sigma`; a calibrated matcher
/// should recover `beta ≈ 1`.
pub fn gaussian_toy(n: usize, sigma: [f64; 3], seed: u64) -> Result<Vec<CalibrationEntry<f64>>> {
    use crate::geometry::{make_pose_grid, GridResolution, SearchRegion};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::sync::Arc;

    let grid = Arc::new(make_pose_grid(
        SearchRegion::symmetric(5.0 * sigma[0], 5.0 * sigma[1], 5.0 * sigma[2]),
        GridResolution::new(sigma[0] / 2.0, sigma[1] / 2.0, sigma[2] / 2.0),
    )?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Correlated covariance shared by all draws: Sigma = L L^T.
    let l = Matrix3::new(
        sigma[0],
        0.0,
        0.0,
        0.3 * sigma[1],
        sigma[1] * 0.91f64.sqrt(),
        0.0,
        -0.2 * sigma[2],
        0.1 * sigma[2],
        sigma[2] * 0.95f64.sqrt(),
    );
    let cov = l * l.transpose();
    let inv = cov.try_inverse().expect("well-conditioned toy covariance");
    let scores = Array3::from_shape_fn(grid.shape(), |(i, j, k)| {
        let g = Vector3::new(grid.xs()[i], grid.ys()[j], grid.thetas()[k]);
        -0.5 * g.dot(&(inv * g))
    });
    let volume = CorrelationVolume::new(scores, grid.clone())?;
    let (mean, _) = soft_argmax(&grid, &volume, 1.0)?;
    (0..n)
        .map(|_| {
            let e = l * Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            Ok(CalibrationEntry {
                volume: volume.clone(),
                gt: Pose::new(e[0], e[1], e[2]),
                mean,
            })
        })
        .collect()
}
