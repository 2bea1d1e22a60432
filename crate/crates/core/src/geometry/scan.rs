use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Real;

fn check_unit_interval<T: Real>(power: &Array2<T>, what: &str) -> Result<()> {
    if let Some(v) = power
        .iter()
        .find(|v| !(v.is_finite() && **v >= T::zero() && **v <= T::one()))
    {
        return Err(Error::Data(format!("{what} power {v} outside [0, 1]")));
    }
    Ok(())
}

/// Gridded power returns. Axis 0 runs along +x, axis 1 along +y, so
/// `power[[u, v]]` sits at world `((u - cx) * mpp, (v - cy) * mpp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianScan<T> {
    power: Array2<T>,
    meters_per_pixel: T,
    center: (T, T),
}

impl<T: Real> CartesianScan<T> {
    /// Scan centred on the middle of the image.
    pub fn new(power: Array2<T>, meters_per_pixel: T) -> Result<Self> {
        let center = default_center(power.dim());
        Self::with_center(power, meters_per_pixel, center)
    }

    pub fn with_center(power: Array2<T>, meters_per_pixel: T, center: (T, T)) -> Result<Self> {
        let (w, h) = power.dim();
        if w < 2 || h < 2 {
            return Err(Error::Shape(format!("cartesian scan must be at least 2x2, got {w}x{h}")));
        }
        if !(meters_per_pixel.is_finite() && meters_per_pixel > T::zero()) {
            return Err(Error::config("meters_per_pixel", "must be positive"));
        }
        check_unit_interval(&power, "cartesian")?;
        Ok(Self {
            power,
            meters_per_pixel,
            center,
        })
    }

    pub(crate) fn from_parts(power: Array2<T>, meters_per_pixel: T, center: (T, T)) -> Self {
        Self {
            power,
            meters_per_pixel,
            center,
        }
    }

    pub fn zeros(w: usize, h: usize, meters_per_pixel: T) -> Self {
        Self::from_parts(Array2::zeros((w, h)), meters_per_pixel, default_center((w, h)))
    }

    pub fn power(&self) -> &Array2<T> {
        &self.power
    }

    pub fn into_power(self) -> Array2<T> {
        self.power
    }

    pub fn meters_per_pixel(&self) -> T {
        self.meters_per_pixel
    }

    pub fn center(&self) -> (T, T) {
        self.center
    }

    pub fn dim(&self) -> (usize, usize) {
        self.power.dim()
    }

    /// Physical half-extent along each axis, in meters.
    pub fn half_extent(&self) -> (T, T) {
        let (w, h) = self.dim();
        let half = T::of(0.5) * self.meters_per_pixel;
        (T::of(w as f64) * half, T::of(h as f64) * half)
    }

    /// Same geometry, different content. Values are clamped into [0, 1].
    pub fn with_power(&self, power: Array2<T>) -> Result<Self> {
        if power.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "replacement power {:?} does not match scan {:?}",
                power.dim(),
                self.dim()
            )));
        }
        Ok(Self::from_parts(
            power.mapv(|v| v.max(T::zero()).min(T::one())),
            self.meters_per_pixel,
            self.center,
        ))
    }

    pub fn cast<U: Real>(&self) -> CartesianScan<U> {
        CartesianScan::from_parts(
            self.power.mapv(|v| U::of(v.f64())),
            U::of(self.meters_per_pixel.f64()),
            (U::of(self.center.0.f64()), U::of(self.center.1.f64())),
        )
    }
}

pub(crate) fn default_center<T: Real>((w, h): (usize, usize)) -> (T, T) {
    (T::of((w as f64 - 1.0) / 2.0), T::of((h as f64 - 1.0) / 2.0))
}

/// Raw sensor sweep: one power profile per azimuth.
///
/// Row `i` looks along `azimuth_0_direction + i * 2pi / n_azimuths`
/// (counter-clockwise from +x); bin `j` is centred at range `(j + 0.5) * range_resolution`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarScan<T> {
    power: Array2<T>,
    range_resolution: T,
    azimuth_0_direction: T,
}

impl<T: Real> PolarScan<T> {
    pub fn new(power: Array2<T>, range_resolution: T, azimuth_0_direction: T) -> Result<Self> {
        let (na, nr) = power.dim();
        if na < 2 || nr < 1 {
            return Err(Error::Shape(format!("polar scan needs >= 2 azimuths, got {na}x{nr}")));
        }
        if !(range_resolution.is_finite() && range_resolution > T::zero()) {
            return Err(Error::config("range_resolution", "must be positive"));
        }
        check_unit_interval(&power, "polar")?;
        Ok(Self {
            power,
            range_resolution,
            azimuth_0_direction,
        })
    }

    pub(crate) fn from_parts(power: Array2<T>, range_resolution: T, azimuth_0_direction: T) -> Self {
        Self {
            power,
            range_resolution,
            azimuth_0_direction,
        }
    }

    pub fn power(&self) -> &Array2<T> {
        &self.power
    }

    pub fn range_resolution(&self) -> T {
        self.range_resolution
    }

    pub fn azimuth_0_direction(&self) -> T {
        self.azimuth_0_direction
    }

    pub fn n_azimuths(&self) -> usize {
        self.power.dim().0
    }

    pub fn n_range_bins(&self) -> usize {
        self.power.dim().1
    }

    pub fn max_range(&self) -> T {
        T::of(self.n_range_bins() as f64) * self.range_resolution
    }

    pub fn azimuth(&self, i: usize) -> T {
        self.azimuth_0_direction + T::of(i as f64 * std::f64::consts::TAU / self.n_azimuths() as f64)
    }

    pub fn with_power(&self, power: Array2<T>) -> Result<Self> {
        if power.dim() != self.power.dim() {
            return Err(Error::Shape(format!(
                "replacement power {:?} does not match scan {:?}",
                power.dim(),
                self.power.dim()
            )));
        }
        Ok(Self::from_parts(
            power.mapv(|v| v.max(T::zero()).min(T::one())),
            self.range_resolution,
            self.azimuth_0_direction,
        ))
    }

    pub fn cast<U: Real>(&self) -> PolarScan<U> {
        PolarScan::from_parts(
            self.power.mapv(|v| U::of(v.f64())),
            U::of(self.range_resolution.f64()),
            U::of(self.azimuth_0_direction.f64()),
        )
    }
}

/// A scan in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Scan<T> {
    Polar(PolarScan<T>),
    Cartesian(CartesianScan<T>),
}

impl<T: Real> Scan<T> {
    pub fn power(&self) -> &Array2<T> {
        match self {
            Scan::Polar(s) => s.power(),
            Scan::Cartesian(s) => s.power(),
        }
    }

    pub fn cast<U: Real>(&self) -> Scan<U> {
        match self {
            Scan::Polar(p) => Scan::Polar(p.cast()),
            Scan::Cartesian(c) => Scan::Cartesian(c.cast()),
        }
    }

    pub fn is_polar(&self) -> bool {
        matches!(self, Scan::Polar(_))
    }
}

impl<T> From<CartesianScan<T>> for Scan<T> {
    fn from(s: CartesianScan<T>) -> Self {
        Scan::Cartesian(s)
    }
}

impl<T> From<PolarScan<T>> for Scan<T> {
    fn from(s: PolarScan<T>) -> Self {
        Scan::Polar(s)
    }
}
