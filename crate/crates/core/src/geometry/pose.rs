use serde::{Deserialize, Serialize};

use crate::scalar::{wrap_angle, Real};

/// Planar rigid motion: translation in meters, heading change in radians.
///
/// `dtheta` is kept in (-pi, pi] by every constructor and by [`compose`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose<T> {
    pub dx: T,
    pub dy: T,
    pub dtheta: T,
}

impl<T: Real> Pose<T> {
    pub fn new(dx: T, dy: T, dtheta: T) -> Self {
        Self {
            dx,
            dy,
            dtheta: wrap_angle(dtheta),
        }
    }

    pub fn identity() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn from_f64(dx: f64, dy: f64, dtheta: f64) -> Self {
        Self::new(T::of(dx), T::of(dy), T::of(dtheta))
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose::new(U::of(self.dx.f64()), U::of(self.dy.f64()), U::of(self.dtheta.f64()))
    }

    pub fn as_array(&self) -> [T; 3] {
        [self.dx, self.dy, self.dtheta]
    }

    pub fn is_finite(&self) -> bool {
        self.dx.is_finite() && self.dy.is_finite() && self.dtheta.is_finite()
    }

    /// Maps a point expressed in this pose's frame into the parent frame.
    pub fn transform_point(&self, x: T, y: T) -> (T, T) {
        let (s, c) = self.dtheta.sin_cos();
        (c * x - s * y + self.dx, s * x + c * y + self.dy)
    }

    /// Component-wise difference `self - other` with the angle wrapped.
    pub fn residual(&self, other: &Pose<T>) -> [T; 3] {
        [
            self.dx - other.dx,
            self.dy - other.dy,
            wrap_angle(self.dtheta - other.dtheta),
        ]
    }

    pub fn translation_norm(&self) -> T {
        self.dx.hypot(self.dy)
    }
}

/// `a ∘ b`: the pose of frame `b` (given relative to `a`) in `a`'s parent frame.
pub fn compose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Pose<T> {
    let (x, y) = a.transform_point(b.dx, b.dy);
    Pose::new(x, y, a.dtheta + b.dtheta)
}

pub fn inverse<T: Real>(p: &Pose<T>) -> Pose<T> {
    let (s, c) = p.dtheta.sin_cos();
    Pose::new(-(c * p.dx + s * p.dy), s * p.dx - c * p.dy, -p.dtheta)
}

/// Pose of `b` expressed in the frame of `a`: `inverse(a) ∘ b`.
pub fn relative<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Pose<T> {
    compose(&inverse(a), b)
}
