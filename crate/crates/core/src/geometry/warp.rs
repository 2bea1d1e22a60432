//! Bilinear image warps expressed as sparse linear maps.
//!
//! Every warp is linear in pixel values, so one [`LinearWarp`] gives the
//! forward resample and (via its transpose) the exact backward pass.

use ndarray::Array2;

use super::scan::{default_center, CartesianScan};
use super::Pose;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Sparse `out = A · in` over flattened row-major images.
#[derive(Debug, Clone)]
pub struct LinearWarp<T> {
    in_dim: (usize, usize),
    out_dim: (usize, usize),
    starts: Vec<u32>,
    index: Vec<u32>,
    weight: Vec<T>,
}

impl<T: Real> LinearWarp<T> {
    /// `taps(u, v, out)` pushes `(flat source index, weight)` pairs for output pixel `(u, v)`.
    pub fn from_fn(
        in_dim: (usize, usize),
        out_dim: (usize, usize),
        mut taps: impl FnMut(usize, usize, &mut Vec<(usize, T)>),
    ) -> Self {
        let n_out = out_dim.0 * out_dim.1;
        let mut starts = Vec::with_capacity(n_out + 1);
        let mut index = Vec::with_capacity(n_out * 4);
        let mut weight = Vec::with_capacity(n_out * 4);
        let mut scratch = Vec::with_capacity(4);
        starts.push(0);
        for u in 0..out_dim.0 {
            for v in 0..out_dim.1 {
                scratch.clear();
                taps(u, v, &mut scratch);
                for &(i, w) in &scratch {
                    index.push(i as u32);
                    weight.push(w);
                }
                starts.push(index.len() as u32);
            }
        }
        Self {
            in_dim,
            out_dim,
            starts,
            index,
            weight,
        }
    }

    pub fn in_dim(&self) -> (usize, usize) {
        self.in_dim
    }

    pub fn out_dim(&self) -> (usize, usize) {
        self.out_dim
    }

    pub fn apply(&self, img: &Array2<T>) -> Array2<T> {
        assert_eq!(img.dim(), self.in_dim, "warp input shape");
        let img = img.as_standard_layout();
        let src = img.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(self.out_dim.0 * self.out_dim.1);
        for o in 0..self.starts.len() - 1 {
            let (a, b) = (self.starts[o] as usize, self.starts[o + 1] as usize);
            let mut acc = T::zero();
            for t in a..b {
                acc += self.weight[t] * src[self.index[t] as usize];
            }
            out.push(acc);
        }
        Array2::from_shape_vec(self.out_dim, out).expect("output shape")
    }

    /// Adjoint: scatters an output-shaped gradient back onto the input grid.
    pub fn apply_transpose(&self, grad: &Array2<T>) -> Array2<T> {
        assert_eq!(grad.dim(), self.out_dim, "warp gradient shape");
        let grad = grad.as_standard_layout();
        let g = grad.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); self.in_dim.0 * self.in_dim.1];
        for o in 0..self.starts.len() - 1 {
            let go = g[o];
            if go == T::zero() {
                continue;
            }
            for t in self.starts[o] as usize..self.starts[o + 1] as usize {
                out[self.index[t] as usize] += self.weight[t] * go;
            }
        }
        Array2::from_shape_vec(self.in_dim, out).expect("input shape")
    }

    /// Rigid motion of a gridded image: output pixel `q` reads the input at
    /// `R(-theta) (q - t)`, everything measured in meters about each grid's centre.
    /// Samples outside the input read as zero.
    #[allow(clippy::too_many_arguments)]
    pub fn rigid(
        in_dim: (usize, usize),
        in_center: (T, T),
        in_mpp: T,
        out_dim: (usize, usize),
        out_center: (T, T),
        out_mpp: T,
        pose: &Pose<T>,
    ) -> Self {
        let (s, c) = pose.dtheta.sin_cos();
        Self::from_fn(in_dim, out_dim, |u, v, taps| {
            let px = (T::of(u as f64) - out_center.0) * out_mpp - pose.dx;
            let py = (T::of(v as f64) - out_center.1) * out_mpp - pose.dy;
            let sx = (c * px + s * py) / in_mpp + in_center.0;
            let sy = (-s * px + c * py) / in_mpp + in_center.1;
            bilinear_taps_zero(sx, sy, in_dim, taps);
        })
    }

    /// Rotation about `center` by `theta` (counter-clockwise, x right / y up).
    pub fn rotation(dim: (usize, usize), center: (T, T), theta: T) -> Self {
        let pose = Pose::new(T::zero(), T::zero(), theta);
        Self::rigid(dim, center, T::one(), dim, center, T::one(), &pose)
    }

    /// Half-pixel-aligned bilinear resize with edge clamping.
    pub fn resize(in_dim: (usize, usize), out_dim: (usize, usize)) -> Self {
        let sx = in_dim.0 as f64 / out_dim.0 as f64;
        let sy = in_dim.1 as f64 / out_dim.1 as f64;
        Self::from_fn(in_dim, out_dim, |u, v, taps| {
            let x = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (in_dim.0 - 1) as f64);
            let y = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (in_dim.1 - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(in_dim.0 - 1), (y0 + 1).min(in_dim.1 - 1));
            let (fx, fy) = (T::of(x - x0 as f64), T::of(y - y0 as f64));
            let one = T::one();
            push_tap(taps, x0 * in_dim.1 + y0, (one - fx) * (one - fy));
            push_tap(taps, x1 * in_dim.1 + y0, fx * (one - fy));
            push_tap(taps, x0 * in_dim.1 + y1, (one - fx) * fy);
            push_tap(taps, x1 * in_dim.1 + y1, fx * fy);
        })
    }
}

#[inline]
fn push_tap<T: Real>(taps: &mut Vec<(usize, T)>, i: usize, w: T) {
    if w != T::zero() {
        taps.push((i, w));
    }
}

/// Bilinear taps at fractional pixel `(x, y)`; corners outside the image are dropped (read as zero).
pub(crate) fn bilinear_taps_zero<T: Real>(
    x: T,
    y: T,
    (w, h): (usize, usize),
    taps: &mut Vec<(usize, T)>,
) {
    let (xf, yf) = (x.floor(), y.floor());
    let (fx, fy) = (x - xf, y - yf);
    let (x0, y0) = (xf.to_i64().unwrap_or(i64::MIN), yf.to_i64().unwrap_or(i64::MIN));
    let one = T::one();
    for (dx, dy, wt) in [
        (0, 0, (one - fx) * (one - fy)),
        (1, 0, fx * (one - fy)),
        (0, 1, (one - fx) * fy),
        (1, 1, fx * fy),
    ] {
        let (u, v) = (x0.saturating_add(dx), y0.saturating_add(dy));
        if u >= 0 && v >= 0 && (u as usize) < w && (v as usize) < h {
            push_tap(taps, u as usize * h + v as usize, wt);
        }
    }
}

/// Rotates a scan about its sensor origin.
pub fn rotate_bilinear<T: Real>(img: &CartesianScan<T>, theta: T) -> CartesianScan<T> {
    let warp = LinearWarp::rotation(img.dim(), img.center(), theta);
    CartesianScan::from_parts(warp.apply(img.power()), img.meters_per_pixel(), img.center())
}

/// Resamples a scan to `new_w x new_h`, preserving its physical extent.
pub fn resize_bilinear<T: Real>(
    img: &CartesianScan<T>,
    new_w: usize,
    new_h: usize,
) -> Result<CartesianScan<T>> {
    if new_w < 2 || new_h < 2 {
        return Err(Error::Shape(format!("resize target {new_w}x{new_h} below 2x2")));
    }
    let (w, h) = img.dim();
    let (sx, sy) = (w as f64 / new_w as f64, h as f64 / new_h as f64);
    if (sx - sy).abs() > 1e-9 * sx.max(sy) {
        return Err(Error::Shape(format!(
            "anisotropic resize {w}x{h} -> {new_w}x{new_h} cannot keep square pixels"
        )));
    }
    let warp = LinearWarp::resize((w, h), (new_w, new_h));
    let (cx, cy) = img.center();
    let center = (
        T::of((cx.f64() + 0.5) / sx - 0.5),
        T::of((cy.f64() + 0.5) / sy - 0.5),
    );
    Ok(CartesianScan::from_parts(
        warp.apply(img.power()),
        T::of(img.meters_per_pixel().f64() * sx),
        center,
    ))
}

/// Moves scan content by `pose`: a return at `p` in the input lands at `pose ∘ p`.
pub fn warp_pose<T: Real>(img: &CartesianScan<T>, pose: &Pose<T>) -> CartesianScan<T> {
    let warp = LinearWarp::rigid(
        img.dim(),
        img.center(),
        img.meters_per_pixel(),
        img.dim(),
        img.center(),
        img.meters_per_pixel(),
        pose,
    );
    CartesianScan::from_parts(warp.apply(img.power()), img.meters_per_pixel(), img.center())
}

/// Centre pixel used for an image of the given size.
pub fn image_center<T: Real>(dim: (usize, usize)) -> (T, T) {
    default_center(dim)
}
