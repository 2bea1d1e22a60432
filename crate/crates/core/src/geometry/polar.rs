use std::f64::consts::TAU;

use ndarray::Array2;

use super::scan::{default_center, CartesianScan, PolarScan};
use super::warp::LinearWarp;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Output geometry of a polar-to-Cartesian conversion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartesianSpec<T> {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: T,
}

impl<T: Real> CartesianSpec<T> {
    pub fn new(width: usize, height: usize, meters_per_pixel: T) -> Self {
        Self {
            width,
            height,
            meters_per_pixel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::config("cartesian.width", "image must be at least 2x2"));
        }
        if !(self.meters_per_pixel.is_finite() && self.meters_per_pixel > T::zero()) {
            return Err(Error::config("cartesian.meters_per_pixel", "must be positive"));
        }
        Ok(())
    }
}

/// Precomputed bilinear lookup from a polar sweep onto a Cartesian grid.
///
/// Azimuths wrap around; ranges below the first bin centre clamp to it and
/// pixels past the last bin centre read zero.
#[derive(Debug, Clone)]
pub struct PolarToCartesian<T> {
    warp: LinearWarp<T>,
    spec: CartesianSpec<T>,
    center: (T, T),
}

impl<T: Real> PolarToCartesian<T> {
    pub fn new(
        n_azimuths: usize,
        n_range_bins: usize,
        range_resolution: T,
        azimuth_0_direction: T,
        spec: CartesianSpec<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let center: (T, T) = default_center((spec.width, spec.height));
        let (cx, cy) = (center.0.f64(), center.1.f64());
        let mpp = spec.meters_per_pixel.f64();
        let res = range_resolution.f64();
        let az0 = azimuth_0_direction.f64();
        let az_step = TAU / n_azimuths as f64;
        let last = (n_range_bins - 1) as f64;
        let warp = LinearWarp::from_fn(
            (n_azimuths, n_range_bins),
            (spec.width, spec.height),
            |u, v, taps| {
                let x = (u as f64 - cx) * mpp;
                let y = (v as f64 - cy) * mpp;
                let fr = (x.hypot(y) / res - 0.5).max(0.0);
                if fr > last {
                    return;
                }
                let fa = (y.atan2(x) - az0).rem_euclid(TAU) / az_step;
                let a0 = (fa.floor() as usize).min(n_azimuths - 1);
                let a1 = (a0 + 1) % n_azimuths;
                let wa = fa - a0 as f64;
                let r0 = fr.floor() as usize;
                let r1 = (r0 + 1).min(n_range_bins - 1);
                let wr = fr - r0 as f64;
                for (a, r, w) in [
                    (a0, r0, (1.0 - wa) * (1.0 - wr)),
                    (a1, r0, wa * (1.0 - wr)),
                    (a0, r1, (1.0 - wa) * wr),
                    (a1, r1, wa * wr),
                ] {
                    if w != 0.0 {
                        taps.push((a * n_range_bins + r, T::of(w)));
                    }
                }
            },
        );
        Ok(Self { warp, spec, center })
    }

    pub fn for_scan(scan: &PolarScan<T>, spec: CartesianSpec<T>) -> Result<Self> {
        Self::new(
            scan.n_azimuths(),
            scan.n_range_bins(),
            scan.range_resolution(),
            scan.azimuth_0_direction(),
            spec,
        )
    }

    pub fn polar_dim(&self) -> (usize, usize) {
        self.warp.in_dim()
    }

    pub fn spec(&self) -> &CartesianSpec<T> {
        &self.spec
    }

    pub fn apply_array(&self, polar: &Array2<T>) -> Array2<T> {
        self.warp.apply(polar)
    }

    pub fn backward(&self, grad_cartesian: &Array2<T>) -> Array2<T> {
        self.warp.apply_transpose(grad_cartesian)
    }

    pub fn apply(&self, scan: &PolarScan<T>) -> Result<CartesianScan<T>> {
        if scan.power().dim() != self.polar_dim() {
            return Err(Error::Shape(format!(
                "polar scan {:?} does not match conversion table {:?}",
                scan.power().dim(),
                self.polar_dim()
            )));
        }
        Ok(CartesianScan::from_parts(
            self.apply_array(scan.power()),
            self.spec.meters_per_pixel,
            self.center,
        ))
    }
}

/// Resamples a polar sweep onto a `w x h` grid centred on the sensor.
pub fn polar_to_cartesian<T: Real>(
    s: &PolarScan<T>,
    w: usize,
    h: usize,
    mpp: T,
) -> Result<CartesianScan<T>> {
    PolarToCartesian::for_scan(s, CartesianSpec::new(w, h, mpp))?.apply(s)
}
