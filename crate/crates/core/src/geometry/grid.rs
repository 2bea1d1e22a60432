use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::Pose;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Inclusive search bounds for each pose component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRegion<T> {
    pub x_range: (T, T),
    pub y_range: (T, T),
    pub theta_range: (T, T),
}

impl<T: Real> SearchRegion<T> {
    /// Region symmetric about the identity pose.
    pub fn symmetric(x: T, y: T, theta: T) -> Self {
        Self {
            x_range: (-x, x),
            y_range: (-y, y),
            theta_range: (-theta, theta),
        }
    }

    pub fn contains(&self, p: &Pose<T>) -> bool {
        let within = |v: T, (lo, hi): (T, T)| v >= lo && v <= hi;
        within(p.dx, self.x_range) && within(p.dy, self.y_range) && within(p.dtheta, self.theta_range)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("x_range", self.x_range),
            ("y_range", self.y_range),
            ("theta_range", self.theta_range),
        ] {
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(Error::config(name, "bounds must be finite"));
            }
            if lo > T::zero() || hi < T::zero() {
                return Err(Error::config(name, "region must contain the identity pose"));
            }
        }
        Ok(())
    }
}

/// Step between neighbouring candidate poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridResolution<T> {
    pub delta_x: T,
    pub delta_y: T,
    pub delta_theta: T,
}

impl<T: Real> GridResolution<T> {
    pub fn new(delta_x: T, delta_y: T, delta_theta: T) -> Self {
        Self {
            delta_x,
            delta_y,
            delta_theta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [
            ("delta_x", self.delta_x),
            ("delta_y", self.delta_y),
            ("delta_theta", self.delta_theta),
        ] {
            if !(d.is_finite() && d > T::zero()) {
                return Err(Error::config(name, "resolution must be strictly positive"));
            }
        }
        Ok(())
    }
}

/// Regular grid of candidate poses.
///
/// Stored as three axes; [`PoseGrid::mesh`] expands them into the dense
/// `(n_x, n_y, n_theta)` coordinate arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGrid<T> {
    xs: Vec<T>,
    ys: Vec<T>,
    thetas: Vec<T>,
    region: SearchRegion<T>,
    resolution: GridResolution<T>,
}

fn axis<T: Real>(name: &str, (lo, hi): (T, T), step: T) -> Result<Vec<T>> {
    let (lo, hi, step) = (lo.f64(), hi.f64(), step.f64());
    let span = hi - lo;
    let n = (span / step + 1e-9).floor() as i64 + 1;
    if n < 2 {
        return Err(Error::config(
            name,
            format!("span {span} at step {step} gives fewer than 2 samples"),
        ));
    }
    // Samples are integer multiples of the step so that zero is always one of them.
    let mut k_min = (lo / step).round() as i64;
    let k_max = k_min + n - 1;
    if k_max < 0 {
        k_min -= k_max;
    }
    if k_min > 0 {
        k_min = 0;
    }
    Ok((0..n).map(|i| T::of((k_min + i) as f64 * step)).collect())
}

impl<T: Real> PoseGrid<T> {
    pub fn new(region: SearchRegion<T>, resolution: GridResolution<T>) -> Result<Self> {
        region.validate()?;
        resolution.validate()?;
        Ok(Self {
            xs: axis("x_range", region.x_range, resolution.delta_x)?,
            ys: axis("y_range", region.y_range, resolution.delta_y)?,
            thetas: axis("theta_range", region.theta_range, resolution.delta_theta)?,
            region,
            resolution,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.xs.len(), self.ys.len(), self.thetas.len())
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len() * self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> &[T] {
        &self.xs
    }

    pub fn ys(&self) -> &[T] {
        &self.ys
    }

    pub fn thetas(&self) -> &[T] {
        &self.thetas
    }

    pub fn region(&self) -> &SearchRegion<T> {
        &self.region
    }

    pub fn resolution(&self) -> &GridResolution<T> {
        &self.resolution
    }

    pub fn pose(&self, i: usize, j: usize, k: usize) -> Pose<T> {
        Pose::new(self.xs[i], self.ys[j], self.thetas[k])
    }

    /// Index of the zero-motion cell.
    pub fn identity_index(&self) -> (usize, usize, usize) {
        let zero = |v: &[T]| v.iter().position(|x| *x == T::zero()).expect("grid contains zero");
        (zero(&self.xs), zero(&self.ys), zero(&self.thetas))
    }

    /// Index of the cell nearest to `p` in every component (clamped to the grid).
    pub fn nearest_index(&self, p: &Pose<T>) -> (usize, usize, usize) {
        let near = |v: &[T], x: T| {
            v.iter()
                .enumerate()
                .min_by(|a, b| (*a.1 - x).abs().partial_cmp(&(*b.1 - x).abs()).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        };
        (near(&self.xs, p.dx), near(&self.ys, p.dy), near(&self.thetas, p.dtheta))
    }

    /// Dense coordinate arrays `(gx, gy, gtheta)`.
    pub fn mesh(&self) -> (Array3<T>, Array3<T>, Array3<T>) {
        let shape = self.shape();
        (
            Array3::from_shape_fn(shape, |(i, _, _)| self.xs[i]),
            Array3::from_shape_fn(shape, |(_, j, _)| self.ys[j]),
            Array3::from_shape_fn(shape, |(_, _, k)| self.thetas[k]),
        )
    }

    /// Largest absolute translation on the grid, per axis.
    pub fn max_translation(&self) -> (T, T) {
        let m = |v: &[T]| v.iter().fold(T::zero(), |a, b| a.max(b.abs()));
        (m(&self.xs), m(&self.ys))
    }
}

/// Builds the candidate grid spanning `region` at `resolution`.
pub fn make_pose_grid<T: Real>(
    region: SearchRegion<T>,
    resolution: GridResolution<T>,
) -> Result<PoseGrid<T>> {
    PoseGrid::new(region, resolution)
}
