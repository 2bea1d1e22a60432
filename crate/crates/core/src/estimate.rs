//! Soft-argmax pose estimate and Gaussian covariance from a correlation volume.

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationVolume;
use crate::error::{Error, Result};
use crate::geometry::{Pose, PoseGrid};
use crate::scalar::Real;

/// Softmax probabilities over the candidate grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxWeights<T> {
    omega: Array3<T>,
}

impl<T: Real> SoftmaxWeights<T> {
    /// Validates non-negativity and normalisation (to `1e-6`, loose enough for f32).
    pub fn new(omega: Array3<T>) -> Result<Self> {
        if omega.iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(Error::Data("softmax weights must be finite and non-negative".into()));
        }
        let total: f64 = omega.iter().map(|w| w.f64()).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("softmax weights sum to {total}")));
        }
        Ok(Self { omega })
    }

    pub fn omega(&self) -> &Array3<T> {
        &self.omega
    }

    pub fn max_weight(&self) -> T {
        self.omega.iter().fold(T::zero(), |a, b| a.max(*b))
    }
}

/// Mean pose and covariance (order `dx, dy, dtheta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate<T> {
    pub mean: Pose<T>,
    pub covariance: [[T; 3]; 3],
    pub beta_used: T,
    /// Magnitude of the most negative eigenvalue removed when making the covariance PSD.
    pub covariance_clamp: T,
}

impl<T: Real> PoseEstimate<T> {
    pub fn std_devs(&self) -> [T; 3] {
        [0, 1, 2].map(|i| self.covariance[i][i].max(T::zero()).sqrt())
    }
}

/// `softmax(beta * scores)` computed in f64 with max subtraction.
pub fn softmax_weights<T: Real>(scores: &Array3<T>, beta: T) -> SoftmaxWeights<T> {
    let b = beta.f64();
    let max = scores.iter().fold(f64::NEG_INFINITY, |a, s| a.max(b * s.f64()));
    let ex = scores.mapv(|s| (b * s.f64() - max).exp());
    let total: f64 = ex.sum();
    SoftmaxWeights {
        omega: ex.mapv(|e| T::of(e / total)),
    }
}

fn weighted_mean<T: Real>(grid: &PoseGrid<T>, omega: &Array3<T>) -> [f64; 3] {
    let mut m = [0.0; 3];
    for ((i, j, k), w) in omega.indexed_iter() {
        let w = w.f64();
        m[0] += w * grid.xs()[i].f64();
        m[1] += w * grid.ys()[j].f64();
        m[2] += w * grid.thetas()[k].f64();
    }
    m
}

pub(crate) fn mean_pose<T: Real>(grid: &PoseGrid<T>, weights: &SoftmaxWeights<T>) -> Pose<T> {
    let m = weighted_mean(grid, &weights.omega);
    Pose::new(T::of(m[0]), T::of(m[1]), T::of(m[2]))
}

/// Expected pose under `softmax(beta * c)`.
///
/// The heading is averaged linearly, which is only meaningful while the
/// heading search span stays well away from ±pi.
pub fn soft_argmax<T: Real>(
    grid: &PoseGrid<T>,
    c: &CorrelationVolume<T>,
    beta: T,
) -> Result<(Pose<T>, SoftmaxWeights<T>)> {
    if !(beta.is_finite() && beta > T::zero()) {
        return Err(Error::config("beta", "must be positive"));
    }
    if c.scores().dim() != grid.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} does not match grid {:?}",
            c.scores().dim(),
            grid.shape()
        )));
    }
    let weights = softmax_weights(c.scores(), beta);
    let m = weighted_mean(grid, &weights.omega);
    Ok((Pose::new(T::of(m[0]), T::of(m[1]), T::of(m[2])), weights))
}

/// `dL/dC` given `dL/dpose`: `beta * w_s * (g_s - mean) · dpose`.
pub fn soft_argmax_backward<T: Real>(
    grid: &PoseGrid<T>,
    weights: &SoftmaxWeights<T>,
    mean: &Pose<T>,
    beta: T,
    grad_pose: [T; 3],
) -> Array3<T> {
    let b = beta.f64();
    let (mx, my, mt) = (mean.dx.f64(), mean.dy.f64(), mean.dtheta.f64());
    let g = grad_pose.map(|v| v.f64());
    Array3::from_shape_fn(grid.shape(), |(i, j, k)| {
        let w = weights.omega[[i, j, k]].f64();
        let dot = (grid.xs()[i].f64() - mx) * g[0]
            + (grid.ys()[j].f64() - my) * g[1]
            + (grid.thetas()[k].f64() - mt) * g[2];
        T::of(b * w * dot)
    })
}

/// Covariance with its PSD clamp amount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance<T> {
    pub matrix: [[T; 3]; 3],
    pub clamp: T,
}

/// `sum_s w_s x_s x_s^T - mean mean^T`, symmetrised, negative eigenvalues set to zero.
pub fn estimate_covariance<T: Real>(
    grid: &PoseGrid<T>,
    weights: &SoftmaxWeights<T>,
    mean: &Pose<T>,
) -> Covariance<T> {
    // Accumulate about the weights' own centroid, then shift to `mean`. Equal to
    // the raw second moment minus the mean's outer product when `mean` is the
    // centroid, but free of cancellation and of the rounding in a narrow `mean`.
    let c = weighted_mean(grid, &weights.omega);
    let mut m = Matrix3::<f64>::zeros();
    for ((i, j, k), w) in weights.omega.indexed_iter() {
        let w = w.f64();
        if w == 0.0 {
            continue;
        }
        let d = [
            grid.xs()[i].f64() - c[0],
            grid.ys()[j].f64() - c[1],
            grid.thetas()[k].f64() - c[2],
        ];
        for r in 0..3 {
            for s in r..3 {
                m[(r, s)] += w * d[r] * d[s];
            }
        }
    }
    let mu = [mean.dx.f64(), mean.dy.f64(), mean.dtheta.f64()];
    for r in 0..3 {
        for s in r..3 {
            m[(r, s)] += (c[r] - mu[r]) * (c[s] - mu[s]);
            m[(s, r)] = m[(r, s)];
        }
    }
    let (matrix, clamp) = clamp_psd(m);
    Covariance {
        matrix: matrix_to_array(&matrix),
        clamp: T::of(clamp),
    }
}

fn clamp_psd(m: Matrix3<f64>) -> (Matrix3<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return (sym, 0.0);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    ((rebuilt + rebuilt.transpose()) * 0.5, -min)
}

pub(crate) fn matrix_to_array<T: Real>(m: &Matrix3<f64>) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = T::of(m[(r, c)]);
        }
    }
    out
}

pub(crate) fn array_to_matrix<T: Real>(a: &[[T; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| a[r][c].f64())
}

/// Soft-argmax mean plus covariance in one call.
pub fn estimate_pose<T: Real>(grid: &PoseGrid<T>, c: &CorrelationVolume<T>, beta: T) -> Result<PoseEstimate<T>> {
    let (mean, weights) = soft_argmax(grid, c, beta)?;
    let cov = estimate_covariance(grid, &weights, &mean);
    Ok(PoseEstimate {
        mean,
        covariance: cov.matrix,
        beta_used: beta,
        covariance_clamp: cov.clamp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_pose_grid, GridResolution, SearchRegion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn grid() -> Arc<PoseGrid<f64>> {
        Arc::new(
            make_pose_grid(
                SearchRegion::symmetric(1.0, 1.0, 0.2),
                GridResolution::new(0.5, 0.5, 0.1),
            )
            .unwrap(),
        )
    }

    /// Line grid {-1, 0, 1} in x; y and theta collapse to the zero sample by weight.
    fn line_grid() -> Arc<PoseGrid<f64>> {
        Arc::new(
            make_pose_grid(
                SearchRegion::symmetric(1.0, 1.0, 0.1),
                GridResolution::new(1.0, 1.0, 0.1),
            )
            .unwrap(),
        )
    }

    fn volume(g: &Arc<PoseGrid<f64>>, f: impl Fn(usize, usize, usize) -> f64) -> CorrelationVolume<f64> {
        CorrelationVolume::new(Array3::from_shape_fn(g.shape(), |(i, j, k)| f(i, j, k)), g.clone()).unwrap()
    }

    #[test]
    fn one_hot_scores_pick_their_cell() {
        let g = grid();
        let v = volume(&g, |i, j, k| if (i, j, k) == (4, 1, 3) { 10.0 } else { 0.0 });
        let (p, w) = soft_argmax(&g, &v, 100.0).unwrap();
        let target = g.pose(4, 1, 3);
        assert!(p.residual(&target).iter().all(|r| r.abs() < 1e-12));
        assert!((w.omega().sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_scores_give_centroid() {
        let g = grid();
        let (p, _) = soft_argmax(&g, &volume(&g, |_, _, _| 3.3), 1.0).unwrap();
        assert!(p.residual(&Pose::identity()).iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn hand_softmax_on_a_line() {
        let g = line_grid();
        let (_, j0, k0) = g.identity_index();
        // Everything off the x-line is effectively excluded.
        let v = volume(&g, |i, j, k| {
            if j == j0 && k == k0 {
                if i == 1 {
                    2f64.ln()
                } else {
                    0.0
                }
            } else {
                -1e3
            }
        });
        let (p, w) = soft_argmax(&g, &v, 1.0).unwrap();
        let line: Vec<f64> = (0..3).map(|i| w.omega()[[i, j0, k0]]).collect();
        for (a, b) in line.iter().zip([0.25, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(p.dx.abs() < 1e-12);
        let cov = estimate_covariance(&g, &w, &p);
        assert!((cov.matrix[0][0] - 0.5).abs() < 1e-12);

        let uniform = volume(&g, |_, j, k| if j == j0 && k == k0 { 0.0 } else { -1e3 });
        let (p, w) = soft_argmax(&g, &uniform, 1.0).unwrap();
        let cov = estimate_covariance(&g, &w, &p);
        assert!((cov.matrix[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!(cov.matrix[1][1].abs() < 1e-12 && cov.matrix[2][2].abs() < 1e-12);
    }

    #[test]
    fn one_hot_weights_have_no_spread() {
        let g = grid();
        let v = volume(&g, |i, j, k| if (i, j, k) == (2, 2, 1) { 1e4 } else { 0.0 });
        let e = estimate_pose(&g, &v, 1.0).unwrap();
        assert!(e.covariance.iter().flatten().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn symmetric_weights_cancel_cross_terms() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let half = Array3::from_shape_fn(g.shape(), |_| rng.random::<f64>());
        let n = g.shape().0;
        let v = volume(&g, |i, j, k| half[[i.min(n - 1 - i), j, k]]);
        let e = estimate_pose(&g, &v, 2.0).unwrap();
        assert!(e.covariance[0][1].abs() < 1e-9 && e.covariance[0][2].abs() < 1e-9);
        assert!(e.mean.dx.abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_and_beta_monotonicity() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Array3::from_shape_fn(g.shape(), |_| rng.random::<f64>() * 5.0);
        let a = softmax_weights(&base, 1.3);
        let b = softmax_weights(&(&base + 17.0), 1.3);
        let err = (a.omega() - b.omega()).mapv(f64::abs).sum();
        assert!(err < 1e-12);
        let mut last = 0.0;
        for beta in [0.1, 0.3, 1.0, 3.0, 10.0, 30.0] {
            let m = softmax_weights(&base, beta).max_weight();
            assert!(m >= last);
            last = m;
        }
    }

    #[test]
    fn large_beta_converges_to_hard_argmax() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = Array3::from_shape_fn(g.shape(), |_| rng.random::<f64>());
        s[[1, 3, 2]] = 2.0;
        let v = CorrelationVolume::new(s, g.clone()).unwrap();
        let (p, _) = soft_argmax(&g, &v, 1e4).unwrap();
        let r = p.residual(&g.pose(1, 3, 2));
        assert!(r[0].abs() < 1e-6 * 0.5 && r[1].abs() < 1e-6 * 0.5 && r[2].abs() < 1e-6 * 0.1);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores = Array3::from_shape_fn(g.shape(), |_| rng.random::<f64>());
        let up = [0.7, -1.3, 2.1];
        let beta = 1.7;
        let loss = |s: &Array3<f64>| {
            let v = CorrelationVolume::new(s.clone(), g.clone()).unwrap();
            let (p, _) = soft_argmax(&g, &v, beta).unwrap();
            up[0] * p.dx + up[1] * p.dy + up[2] * p.dtheta
        };
        let v = CorrelationVolume::new(scores.clone(), g.clone()).unwrap();
        let (p, w) = soft_argmax(&g, &v, beta).unwrap();
        let an = soft_argmax_backward(&g, &w, &p, beta, up);
        let h = 1e-3;
        for (idx, a) in an.indexed_iter() {
            let mut sp = scores.clone();
            sp[idx] += h;
            let mut sm = scores.clone();
            sm[idx] -= h;
            let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "{idx:?}: {fd} vs {a}");
        }
    }

    #[test]
    fn covariance_is_psd_on_random_volumes() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let scale = rng.random_range(0.1..50.0);
            let s = Array3::from_shape_fn(g.shape(), |_| rng.random::<f64>() * scale);
            let v = CorrelationVolume::new(s, g.clone()).unwrap();
            let e = estimate_pose(&g, &v, 1.0).unwrap();
            let m = array_to_matrix(&e.covariance);
            assert!((m - m.transpose()).abs().max() < 1e-10);
            assert!(SymmetricEigen::new(m).eigenvalues.min() >= -1e-10);
            assert!(e.covariance_clamp < 1e-8);
        }
    }

    #[test]
    fn non_positive_beta_rejected() {
        let g = grid();
        assert!(soft_argmax(&g, &volume(&g, |_, _, _| 0.0), 0.0).is_err());
    }
}
