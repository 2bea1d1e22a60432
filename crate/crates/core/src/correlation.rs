//! Dense correlation volume over a candidate pose grid.
//!
//! For every heading candidate the first scan is rotated about its sensor
//! origin and cross-correlated with the second scan; translations are read
//! off the correlation surface at the grid offsets. Scores peak at the pose
//! that carries the first scan's frame onto the second's, i.e. at `p` when
//! `s2 = warp_pose(s1, p)`.

use std::sync::Arc;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::{CartesianScan, LinearWarp, PoseGrid};
use crate::scalar::Real;

type C64 = Complex<f64>;

/// Correlation scores indexed like the grid: `(x, y, theta)`.
#[derive(Debug, Clone)]
pub struct CorrelationVolume<T> {
    scores: Array3<T>,
    grid: Arc<PoseGrid<T>>,
}

impl<T: Real> CorrelationVolume<T> {
    pub fn new(scores: Array3<T>, grid: Arc<PoseGrid<T>>) -> Result<Self> {
        if scores.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "volume {:?} does not match grid {:?}",
                scores.dim(),
                grid.shape()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("correlation volume".into()));
        }
        Ok(Self { scores, grid })
    }

    pub fn scores(&self) -> &Array3<T> {
        &self.scores
    }

    pub fn grid(&self) -> &Arc<PoseGrid<T>> {
        &self.grid
    }

    /// Index of the highest score (first on ties).
    pub fn argmax(&self) -> (usize, usize, usize) {
        let mut best = (0, 0, 0);
        let mut best_v = T::neg_infinity();
        for (idx, v) in self.scores.indexed_iter() {
            if *v > best_v {
                best_v = *v;
                best = idx;
            }
        }
        best
    }

    pub fn max_abs(&self) -> T {
        self.scores.iter().fold(T::zero(), |a, b| a.max(b.abs()))
    }
}

/// Where a grid translation lands on the integer-shift correlation surface.
#[derive(Debug, Clone, Copy)]
struct ShiftTap {
    base: i64,
    frac: f64,
}

fn shift_taps<T: Real>(values: &[T], pitch: f64) -> Vec<ShiftTap> {
    values
        .iter()
        .map(|v| {
            let s = v.f64() / pitch;
            let mut base = s.floor();
            let mut frac = s - base;
            if frac > 1.0 - 1e-9 {
                base += 1.0;
                frac = 0.0;
            } else if frac < 1e-9 {
                frac = 0.0;
            }
            ShiftTap {
                base: base as i64,
                frac,
            }
        })
        .collect()
}

fn shift_span(taps: &[ShiftTap]) -> (i64, i64) {
    let lo = taps.iter().map(|t| t.base).min().unwrap_or(0);
    let hi = taps
        .iter()
        .map(|t| t.base + i64::from(t.frac > 0.0))
        .max()
        .unwrap_or(0);
    (lo, hi)
}

/// Smallest integer >= n whose only prime factors are 2, 3 and 5.
fn fft_friendly(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Everything about a correlation that depends only on the grid and the scan geometry.
///
/// Plans hold shared FFT kernels and are safe to use from many threads at once.
pub struct CorrelationPlan<T> {
    grid: Arc<PoseGrid<T>>,
    in_dim: (usize, usize),
    resize: Option<LinearWarp<T>>,
    work_dim: (usize, usize),
    rotations: Vec<LinearWarp<T>>,
    x_taps: Vec<ShiftTap>,
    y_taps: Vec<ShiftTap>,
    x_span: (i64, i64),
    y_span: (i64, i64),
    pad: (usize, usize),
    fft_rows: Arc<dyn Fft<f64>>,
    ifft_rows: Arc<dyn Fft<f64>>,
    fft_cols: Arc<dyn Fft<f64>>,
    ifft_cols: Arc<dyn Fft<f64>>,
}

impl<T: Real> std::fmt::Debug for CorrelationPlan<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorrelationPlan")
            .field("in_dim", &self.in_dim)
            .field("work_dim", &self.work_dim)
            .field("pad", &self.pad)
            .finish()
    }
}

impl<T: Real> CorrelationPlan<T> {
    /// Plan for scans of shape `dim` at `mpp` meters/pixel with sensor origin at `center`.
    pub fn new(grid: Arc<PoseGrid<T>>, dim: (usize, usize), mpp: T, center: (T, T)) -> Result<Self> {
        let (w_in, h_in) = dim;
        let mpp_f = mpp.f64();
        let (ext_x, ext_y) = (w_in as f64 * mpp_f / 2.0, h_in as f64 * mpp_f / 2.0);
        let (mx, my) = grid.max_translation();
        if mx.f64() > ext_x + 1e-9 || my.f64() > ext_y + 1e-9 {
            return Err(Error::Coverage(format!(
                "grid reaches ({mx}, {my}) m but the scans only extend ±({ext_x}, {ext_y}) m"
            )));
        }

        // Resample so that one pixel matches one grid step.
        let res = grid.resolution();
        let (dx, dy) = (res.delta_x.f64(), res.delta_y.f64());
        let target = |n: usize, d: f64| {
            if (mpp_f - d).abs() <= 1e-9 * d {
                n
            } else {
                ((n as f64 * mpp_f / d).round() as usize).max(2)
            }
        };
        let work_dim = (target(w_in, dx), target(h_in, dy));
        let resize = (work_dim != dim).then(|| LinearWarp::resize(dim, work_dim));
        let sx = w_in as f64 / work_dim.0 as f64;
        let sy = h_in as f64 / work_dim.1 as f64;
        let (px, py) = (mpp_f * sx, mpp_f * sy);
        let (cx, cy) = ((center.0.f64() + 0.5) / sx - 0.5, (center.1.f64() + 0.5) / sy - 0.5);

        let rotations = grid
            .thetas()
            .iter()
            .map(|theta| {
                let (s, c) = theta.f64().sin_cos();
                LinearWarp::from_fn(work_dim, work_dim, |u, v, taps| {
                    let x = (u as f64 - cx) * px;
                    let y = (v as f64 - cy) * py;
                    let su = (c * x + s * y) / px + cx;
                    let sv = (-s * x + c * y) / py + cy;
                    crate::geometry::bilinear_taps_zero(T::of(su), T::of(sv), work_dim, taps);
                })
            })
            .collect();

        let x_taps = shift_taps(grid.xs(), px);
        let y_taps = shift_taps(grid.ys(), py);
        let x_span = shift_span(&x_taps);
        let y_span = shift_span(&y_taps);
        let pad = (
            fft_friendly(work_dim.0 + (x_span.1 - x_span.0) as usize + 1),
            fft_friendly(work_dim.1 + (y_span.1 - y_span.0) as usize + 1),
        );
        let mut planner = FftPlanner::<f64>::new();
        Ok(Self {
            fft_rows: planner.plan_fft_forward(pad.1),
            ifft_rows: planner.plan_fft_inverse(pad.1),
            fft_cols: planner.plan_fft_forward(pad.0),
            ifft_cols: planner.plan_fft_inverse(pad.0),
            grid,
            in_dim: dim,
            resize,
            work_dim,
            rotations,
            x_taps,
            y_taps,
            x_span,
            y_span,
            pad,
        })
    }

    pub fn for_scan(grid: Arc<PoseGrid<T>>, scan: &CartesianScan<T>) -> Result<Self> {
        Self::new(grid, scan.dim(), scan.meters_per_pixel(), scan.center())
    }

    pub fn grid(&self) -> &Arc<PoseGrid<T>> {
        &self.grid
    }

    pub fn input_dim(&self) -> (usize, usize) {
        self.in_dim
    }

    /// Shape the scans are resampled to before correlating.
    pub fn work_dim(&self) -> (usize, usize) {
        self.work_dim
    }

    /// Zero-padded FFT size.
    pub fn padded_dim(&self) -> (usize, usize) {
        self.pad
    }

    fn check(&self, a: &Array2<T>, what: &str) -> Result<()> {
        if a.dim() != self.in_dim {
            return Err(Error::Shape(format!(
                "{what} has shape {:?}, plan expects {:?}",
                a.dim(),
                self.in_dim
            )));
        }
        Ok(())
    }

    fn to_work(&self, a: &Array2<T>) -> Array2<T> {
        match &self.resize {
            Some(r) => r.apply(a),
            None => a.clone(),
        }
    }

    fn from_work(&self, g: Array2<T>) -> Array2<T> {
        match &self.resize {
            Some(r) => r.apply_transpose(&g),
            None => g,
        }
    }

    // Spectra live in transposed (column-major) layout between fft2 and ifft2.
    fn fft2(&self, img: &Array2<T>) -> Vec<C64> {
        let (n, m) = self.pad;
        let mut buf = vec![C64::new(0.0, 0.0); n * m];
        for ((u, v), x) in img.indexed_iter() {
            buf[u * m + v].re = x.f64();
        }
        self.fft2_in_place(buf)
    }

    fn fft2_in_place(&self, mut buf: Vec<C64>) -> Vec<C64> {
        let (n, m) = self.pad;
        self.fft_rows.process(&mut buf);
        let mut t = transpose(&buf, n, m);
        self.fft_cols.process(&mut t);
        t
    }

    fn ifft2(&self, mut spec: Vec<C64>) -> Vec<C64> {
        let (n, m) = self.pad;
        self.ifft_cols.process(&mut spec);
        let mut buf = transpose(&spec, m, n);
        self.ifft_rows.process(&mut buf);
        let scale = 1.0 / (n * m) as f64;
        buf.iter_mut().for_each(|c| *c *= scale);
        buf
    }

    fn wrap(&self, a: i64, b: i64) -> usize {
        let (n, m) = self.pad;
        let u = a.rem_euclid(n as i64) as usize;
        let v = b.rem_euclid(m as i64) as usize;
        u * m + v
    }

    /// Reads the grid slice from an integer-shift surface `surface(a, b)`.
    fn sample_slice(&self, surface: impl Fn(i64, i64) -> f64) -> Array2<T> {
        Array2::from_shape_fn((self.x_taps.len(), self.y_taps.len()), |(i, j)| {
            let (tx, ty) = (self.x_taps[i], self.y_taps[j]);
            let mut acc = (1.0 - tx.frac) * (1.0 - ty.frac) * surface(tx.base, ty.base);
            if tx.frac > 0.0 {
                acc += tx.frac * (1.0 - ty.frac) * surface(tx.base + 1, ty.base);
            }
            if ty.frac > 0.0 {
                acc += (1.0 - tx.frac) * ty.frac * surface(tx.base, ty.base + 1);
            }
            if tx.frac > 0.0 && ty.frac > 0.0 {
                acc += tx.frac * ty.frac * surface(tx.base + 1, ty.base + 1);
            }
            T::of(acc)
        })
    }

    /// Adjoint of [`Self::sample_slice`]: scatters a grid slice onto the padded surface.
    fn scatter_slice(&self, upstream: ndarray::ArrayView2<T>) -> Vec<C64> {
        let (n, m) = self.pad;
        let mut buf = vec![C64::new(0.0, 0.0); n * m];
        for ((i, j), g) in upstream.indexed_iter() {
            let g = g.f64();
            if g == 0.0 {
                continue;
            }
            let (tx, ty) = (self.x_taps[i], self.y_taps[j]);
            for (da, db, w) in [
                (0, 0, (1.0 - tx.frac) * (1.0 - ty.frac)),
                (1, 0, tx.frac * (1.0 - ty.frac)),
                (0, 1, (1.0 - tx.frac) * ty.frac),
                (1, 1, tx.frac * ty.frac),
            ] {
                if w != 0.0 {
                    buf[self.wrap(tx.base + da, ty.base + db)].re += w * g;
                }
            }
        }
        buf
    }

    /// FFT correlation of two arrays of the planned input shape.
    pub fn correlate(&self, s1: &Array2<T>, s2: &Array2<T>) -> Result<Array3<T>> {
        self.check(s1, "s1")?;
        self.check(s2, "s2")?;
        let x1 = self.to_work(s1);
        let f2 = self.fft2(&self.to_work(s2));
        let slices: Vec<Array2<T>> = self
            .rotations
            .par_iter()
            .map(|rot| {
                let fr = self.fft2(&rot.apply(&x1));
                let prod: Vec<C64> = fr.iter().zip(&f2).map(|(a, b)| a.conj() * b).collect();
                let surf = self.ifft2(prod);
                self.sample_slice(|a, b| surf[self.wrap(a, b)].re)
            })
            .collect();
        Ok(self.stack(slices))
    }

    /// Spatial-domain evaluation of the same quantity; quadratic cost, for verification.
    pub fn correlate_bruteforce(&self, s1: &Array2<T>, s2: &Array2<T>) -> Result<Array3<T>> {
        self.check(s1, "s1")?;
        self.check(s2, "s2")?;
        let x1 = self.to_work(s1);
        let x2 = self.to_work(s2).mapv(|v| v.f64());
        let (w, h) = self.work_dim;
        let slices: Vec<Array2<T>> = self
            .rotations
            .iter()
            .map(|rot| {
                let r = rot.apply(&x1).mapv(|v| v.f64());
                let direct = |a: i64, b: i64| {
                    let mut acc = 0.0;
                    for u in 0..w as i64 {
                        let uu = u + a;
                        if uu < 0 || uu >= w as i64 {
                            continue;
                        }
                        for v in 0..h as i64 {
                            let vv = v + b;
                            if vv < 0 || vv >= h as i64 {
                                continue;
                            }
                            acc += r[[u as usize, v as usize]] * x2[[uu as usize, vv as usize]];
                        }
                    }
                    acc
                };
                let nx = (self.x_span.1 - self.x_span.0 + 1) as usize;
                let ny = (self.y_span.1 - self.y_span.0 + 1) as usize;
                let table = Array2::from_shape_fn((nx, ny), |(i, j)| {
                    direct(i as i64 + self.x_span.0, j as i64 + self.y_span.0)
                });
                self.sample_slice(|a, b| {
                    table[[(a - self.x_span.0) as usize, (b - self.y_span.0) as usize]]
                })
            })
            .collect();
        Ok(self.stack(slices))
    }

    fn stack(&self, slices: Vec<Array2<T>>) -> Array3<T> {
        let (nx, ny, nt) = self.grid.shape();
        let mut out = Array3::zeros((nx, ny, nt));
        for (k, s) in slices.into_iter().enumerate() {
            out.index_axis_mut(Axis(2), k).assign(&s);
        }
        out
    }

    /// Gradients of a scalar loss with respect to both scans, given `dL/dC`.
    pub fn backward(
        &self,
        s1: &Array2<T>,
        s2: &Array2<T>,
        upstream: &Array3<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        self.check(s1, "s1")?;
        self.check(s2, "s2")?;
        if upstream.dim() != self.grid.shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match grid {:?}",
                upstream.dim(),
                self.grid.shape()
            )));
        }
        let (w, h) = self.work_dim;
        let m = self.pad.1;
        let x1 = self.to_work(s1);
        let f2 = self.fft2(&self.to_work(s2));
        let parts: Vec<(Vec<C64>, Array2<T>)> = self
            .rotations
            .par_iter()
            .enumerate()
            .map(|(k, rot)| {
                let g = upstream.index_axis(Axis(2), k);
                if g.iter().all(|v| *v == T::zero()) {
                    return (Vec::new(), Array2::zeros(self.work_dim));
                }
                let fg = self.fft2_in_place(self.scatter_slice(g));
                let fr = self.fft2(&rot.apply(&x1));
                let spec_s2: Vec<C64> = fr.iter().zip(&fg).map(|(a, b)| a * b).collect();
                let spec_r: Vec<C64> = f2.iter().zip(&fg).map(|(a, b)| a * b.conj()).collect();
                let grad_r = self.ifft2(spec_r);
                let grad_r = Array2::from_shape_fn((w, h), |(u, v)| T::of(grad_r[u * m + v].re));
                (spec_s2, rot.apply_transpose(&grad_r))
            })
            .collect();

        let mut grad1 = Array2::zeros(self.work_dim);
        let mut spec = vec![C64::new(0.0, 0.0); self.pad.0 * self.pad.1];
        let mut any = false;
        for (s, g) in parts {
            if s.is_empty() {
                continue;
            }
            any = true;
            grad1 += &g;
            spec.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
        let grad2 = if any {
            let buf = self.ifft2(spec);
            Array2::from_shape_fn((w, h), |(u, v)| T::of(buf[u * m + v].re))
        } else {
            Array2::zeros(self.work_dim)
        };
        Ok((self.from_work(grad1), self.from_work(grad2)))
    }
}

fn transpose(buf: &[C64], rows: usize, cols: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = buf[r * cols + c];
        }
    }
    out
}

fn check_pair<T: Real>(s1: &CartesianScan<T>, s2: &CartesianScan<T>) -> Result<()> {
    if s1.dim() != s2.dim() || s1.meters_per_pixel() != s2.meters_per_pixel() || s1.center() != s2.center() {
        return Err(Error::Shape(format!(
            "scan geometries differ: {:?}@{} vs {:?}@{}",
            s1.dim(),
            s1.meters_per_pixel(),
            s2.dim(),
            s2.meters_per_pixel()
        )));
    }
    Ok(())
}

/// Correlation volume of `s1` against `s2` via zero-padded 2-D FFTs.
pub fn correlate_fft<T: Real>(
    grid: &Arc<PoseGrid<T>>,
    s1: &CartesianScan<T>,
    s2: &CartesianScan<T>,
) -> Result<CorrelationVolume<T>> {
    check_pair(s1, s2)?;
    let plan = CorrelationPlan::for_scan(grid.clone(), s1)?;
    CorrelationVolume::new(plan.correlate(s1.power(), s2.power())?, grid.clone())
}

/// Same volume by direct summation. Intended for small inputs.
pub fn correlate_bruteforce<T: Real>(
    grid: &Arc<PoseGrid<T>>,
    s1: &CartesianScan<T>,
    s2: &CartesianScan<T>,
) -> Result<CorrelationVolume<T>> {
    check_pair(s1, s2)?;
    let plan = CorrelationPlan::for_scan(grid.clone(), s1)?;
    CorrelationVolume::new(plan.correlate_bruteforce(s1.power(), s2.power())?, grid.clone())
}

/// `(dL/ds1, dL/ds2)` from `dL/dC`.
pub fn correlate_backward<T: Real>(
    grid: &Arc<PoseGrid<T>>,
    s1: &CartesianScan<T>,
    s2: &CartesianScan<T>,
    upstream: &Array3<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    check_pair(s1, s2)?;
    let plan = CorrelationPlan::for_scan(grid.clone(), s1)?;
    plan.backward(s1.power(), s2.power(), upstream)
}
