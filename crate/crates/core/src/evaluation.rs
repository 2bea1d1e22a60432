//! Trajectory integration, KITTI-style segment errors, timing and resolution sweeps.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, inverse, make_pose_grid, relative, GridResolution, Pose, Scan, SearchRegion};
use crate::masknet::MaskNet;
use crate::matching::Matcher;
use crate::scalar::Real;

/// One frame: timestamp, relative pose from the previous frame, optional covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry<T> {
    pub t: f64,
    pub rel: Pose<T>,
    pub covariance: Option<[[T; 3]; 3]>,
}

/// Relative motions from a starting pose; absolute poses follow by composition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    origin: Pose<T>,
    entries: Vec<TrajectoryEntry<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(origin: Pose<T>, entries: Vec<TrajectoryEntry<T>>) -> Result<Self> {
        if entries.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Data("trajectory timestamps must be strictly increasing".into()));
        }
        if entries.iter().any(|e| !e.t.is_finite() || !e.rel.is_finite()) {
            return Err(Error::Data("trajectory contains non-finite values".into()));
        }
        Ok(Self { origin, entries })
    }

    /// Relative poses stamped `t0 + (i + 1) * period`.
    pub fn from_relative(rel: &[Pose<T>], t0: f64, period: f64) -> Result<Self> {
        let entries = rel
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectoryEntry {
                t: t0 + (i + 1) as f64 * period,
                rel: *p,
                covariance: None,
            })
            .collect();
        Self::new(Pose::identity(), entries)
    }

    pub fn origin(&self) -> Pose<T> {
        self.origin
    }

    pub fn with_origin(mut self, origin: Pose<T>) -> Self {
        self.origin = origin;
        self
    }

    pub fn entries(&self) -> &[TrajectoryEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn relative_poses(&self) -> Vec<Pose<T>> {
        self.entries.iter().map(|e| e.rel).collect()
    }

    /// `origin` followed by the running composition of every relative pose.
    pub fn absolute(&self) -> Vec<Pose<T>> {
        let mut out = Vec::with_capacity(self.entries.len() + 1);
        out.push(self.origin);
        for e in &self.entries {
            let last = *out.last().expect("non-empty");
            out.push(compose(&last, &e.rel));
        }
        out
    }

    /// Cumulative path length at every absolute pose.
    pub fn distances(&self) -> Vec<f64> {
        let mut d = Vec::with_capacity(self.entries.len() + 1);
        d.push(0.0);
        for e in &self.entries {
            d.push(d.last().expect("non-empty") + e.rel.translation_norm().f64());
        }
        d
    }

    pub fn path_length(&self) -> f64 {
        *self.distances().last().expect("non-empty")
    }
}

/// Left fold of `compose` from the origin, stamped at unit intervals.
pub fn integrate<T: Real>(rel: &[Pose<T>]) -> Trajectory<T> {
    Trajectory::from_relative(rel, 0.0, 1.0).expect("unit stamps increase")
}

/// Relative poses between consecutive absolute poses.
pub fn relative_from_absolute<T: Real>(abs: &[Pose<T>]) -> Vec<Pose<T>> {
    abs.windows(2).map(|w| relative(&w[0], &w[1])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthAveraging {
    /// Unweighted mean of the per-length means.
    PerLength,
    /// Mean over all segments, as in the original KITTI devkit.
    PerSegment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KittiConfig {
    /// Segment lengths in meters.
    pub lengths: Vec<f64>,
    /// Frames between segment starts.
    pub step: usize,
    pub averaging: LengthAveraging,
}

impl KittiConfig {
    /// The usual 100..800 m lengths.
    pub fn full_scale() -> Self {
        Self {
            lengths: (1..=8).map(|k| 100.0 * k as f64).collect(),
            step: 1,
            averaging: LengthAveraging::PerLength,
        }
    }

    /// Eight lengths in steps of a tenth of the path, mirroring 100..800 m on a ~1 km route.
    pub fn scaled_to(path_length: f64) -> Self {
        let unit = path_length / 10.0;
        Self {
            lengths: (1..=8).map(|k| unit * k as f64).collect(),
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::config("kitti.lengths", "must be non-empty and positive"));
        }
        if self.step == 0 {
            return Err(Error::config("kitti.step", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthErrors {
    pub length: f64,
    pub segments: usize,
    /// Percent.
    pub translational: f64,
    /// Degrees per meter.
    pub rotational: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryReport {
    /// True when no segment fitted inside the trajectory; all error fields are then `None`.
    pub empty: bool,
    pub averaging: LengthAveraging,
    pub translational_mean: Option<f64>,
    pub translational_iqr: Option<f64>,
    pub rotational_mean: Option<f64>,
    pub rotational_iqr: Option<f64>,
    pub segments: usize,
    pub per_length: Vec<LengthErrors>,
    pub runtime: Option<RuntimeStats>,
}

/// Linear-interpolation quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `Q3 - Q1` with linear interpolation.
pub fn iqr(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25))
}

/// Segment errors between an estimated and a ground-truth trajectory.
pub fn kitti_errors<T: Real>(est: &Trajectory<T>, gt: &Trajectory<T>, cfg: &KittiConfig) -> Result<OdometryReport> {
    cfg.validate()?;
    if est.len() != gt.len() {
        return Err(Error::Data(format!(
            "trajectory lengths differ: {} estimated vs {} ground truth",
            est.len(),
            gt.len()
        )));
    }
    if est
        .entries()
        .iter()
        .zip(gt.entries())
        .any(|(a, b)| (a.t - b.t).abs() > 1e-6)
    {
        return Err(Error::Data("trajectory timestamps are not aligned".into()));
    }
    let pe = est.absolute();
    let pg = gt.absolute();
    let dist = gt.distances();
    let starts: Vec<usize> = (0..pg.len()).step_by(cfg.step).collect();
    let per_length: Vec<(f64, Vec<(f64, f64)>)> = cfg
        .lengths
        .par_iter()
        .map(|&len| {
            let errs = starts
                .iter()
                .filter_map(|&i| {
                    let j = (i..pg.len()).find(|&j| dist[j] - dist[i] >= len)?;
                    let dg = relative(&pg[i], &pg[j]);
                    let de = relative(&pe[i], &pe[j]);
                    let e = compose(&inverse(&de), &dg);
                    Some((
                        100.0 * e.translation_norm().f64() / len,
                        e.dtheta.f64().abs().to_degrees() / len,
                    ))
                })
                .collect();
            (len, errs)
        })
        .collect();

    let all: Vec<(f64, f64)> = per_length.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    let summaries: Vec<LengthErrors> = per_length
        .iter()
        .filter(|(_, e)| !e.is_empty())
        .map(|(len, e)| {
            let n = e.len() as f64;
            LengthErrors {
                length: *len,
                segments: e.len(),
                translational: e.iter().map(|x| x.0).sum::<f64>() / n,
                rotational: e.iter().map(|x| x.1).sum::<f64>() / n,
            }
        })
        .collect();
    if all.is_empty() {
        return Ok(OdometryReport {
            empty: true,
            averaging: cfg.averaging,
            translational_mean: None,
            translational_iqr: None,
            rotational_mean: None,
            rotational_iqr: None,
            segments: 0,
            per_length: Vec::new(),
            runtime: None,
        });
    }
    let (t_mean, r_mean) = match cfg.averaging {
        LengthAveraging::PerLength => {
            let k = summaries.len() as f64;
            (
                summaries.iter().map(|s| s.translational).sum::<f64>() / k,
                summaries.iter().map(|s| s.rotational).sum::<f64>() / k,
            )
        }
        LengthAveraging::PerSegment => {
            let n = all.len() as f64;
            (
                all.iter().map(|x| x.0).sum::<f64>() / n,
                all.iter().map(|x| x.1).sum::<f64>() / n,
            )
        }
    };
    let ts: Vec<f64> = all.iter().map(|x| x.0).collect();
    let rs: Vec<f64> = all.iter().map(|x| x.1).collect();
    Ok(OdometryReport {
        empty: false,
        averaging: cfg.averaging,
        translational_mean: Some(t_mean),
        translational_iqr: iqr(&ts),
        rotational_mean: Some(r_mean),
        rotational_iqr: iqr(&rs),
        segments: all.len(),
        per_length: summaries,
        runtime: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub repetitions: usize,
    pub warmup: usize,
    /// Worker threads for the timed matches; 1 keeps timings stable.
    pub threads: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            repetitions: 10,
            warmup: 2,
            threads: 1,
        }
    }
}

fn mean_std(xs: &[f64]) -> RuntimeStats {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    RuntimeStats { mean, std, samples: n }
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config("threads", e.to_string()))
}

/// Wall-clock seconds per match, cycling through `pairs`; warm-up calls are not timed.
pub fn benchmark<T: Real>(
    matcher: &Matcher<T>,
    pairs: &[(Scan<T>, Scan<T>)],
    net: Option<&MaskNet<T>>,
    cfg: &BenchmarkConfig,
) -> Result<RuntimeStats> {
    if pairs.is_empty() || cfg.repetitions == 0 {
        return Err(Error::config("benchmark", "needs at least one pair and one repetition"));
    }
    pool(cfg.threads)?.install(|| {
        for i in 0..cfg.warmup {
            let (a, b) = &pairs[i % pairs.len()];
            matcher.match_scans(a, b, net)?;
        }
        let mut times = Vec::with_capacity(cfg.repetitions);
        for i in 0..cfg.repetitions {
            let (a, b) = &pairs[i % pairs.len()];
            let start = Instant::now();
            let e = matcher.match_scans(a, b, net)?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(e);
        }
        Ok(mean_std(&times))
    })
}

/// Pair of scans with the pose `p` such that `b = warp_pose(a, p)`.
#[derive(Debug, Clone)]
pub struct SweepPair<T> {
    pub a: Scan<T>,
    pub b: Scan<T>,
    pub pose_gt: Pose<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Translational grid step in meters.
    pub delta: f64,
    /// Mean translational error in meters.
    pub translation_error: f64,
    /// Mean absolute heading error in radians.
    pub rotation_error: f64,
    pub runtime: Option<RuntimeStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub region: SearchRegion<f64>,
    pub delta_theta: f64,
    pub beta: f64,
    /// `None` skips timing, which keeps the output reproducible.
    pub benchmark: Option<BenchmarkConfig>,
}

/// Raw-scan matching at each translational resolution.
pub fn sweep_resolution<T: Real>(
    pairs: &[SweepPair<T>],
    resolutions: &[f64],
    cfg: &SweepConfig,
    cartesian: Option<crate::geometry::CartesianSpec<T>>,
) -> Result<Vec<SweepRow>> {
    if pairs.is_empty() {
        return Err(Error::Data("sweep needs at least one scan pair".into()));
    }
    if resolutions.is_empty() || resolutions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::config("sweep.resolutions", "must be non-empty and positive"));
    }
    let region = SearchRegion {
        x_range: (T::of(cfg.region.x_range.0), T::of(cfg.region.x_range.1)),
        y_range: (T::of(cfg.region.y_range.0), T::of(cfg.region.y_range.1)),
        theta_range: (T::of(cfg.region.theta_range.0), T::of(cfg.region.theta_range.1)),
    };
    resolutions
        .iter()
        .map(|&delta| {
            let grid = make_pose_grid(region, GridResolution::new(T::of(delta), T::of(delta), T::of(cfg.delta_theta)))?;
            let mut matcher = Matcher::new(grid, T::of(cfg.beta))?;
            if let Some(spec) = cartesian {
                matcher = matcher.with_cartesian(spec)?;
            }
            let errs: Vec<Result<(f64, f64)>> = pairs
                .par_iter()
                .map(|p| {
                    let e = matcher.match_scans(&p.a, &p.b, None)?;
                    let r = e.mean.residual(&p.pose_gt);
                    Ok((r[0].f64().hypot(r[1].f64()), r[2].f64().abs()))
                })
                .collect();
            let mut t = 0.0;
            let mut r = 0.0;
            for e in errs {
                let (a, b) = e?;
                t += a;
                r += b;
            }
            let n = pairs.len() as f64;
            let runtime = match &cfg.benchmark {
                Some(b) => {
                    let scans: Vec<(Scan<T>, Scan<T>)> = pairs.iter().map(|p| (p.a.clone(), p.b.clone())).collect();
                    Some(benchmark(&matcher, &scans, None, b)?)
                }
                None => None,
            };
            Ok(SweepRow {
                delta,
                translation_error: t / n,
                rotation_error: r / n,
                runtime,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["delta", "translation_error", "rotation_error", "runtime_mean", "runtime_std"])?;
    for r in rows {
        let (m, s) = r
            .runtime
            .map(|t| (t.mean.to_string(), t.std.to_string()))
            .unwrap_or_default();
        w.write_record([
            r.delta.to_string(),
            r.translation_error.to_string(),
            r.rotation_error.to_string(),
            m,
            s,
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

const TRAJECTORY_HEADER: [&str; 10] = ["t", "dx", "dy", "dtheta", "c00", "c01", "c02", "c11", "c12", "c22"];

/// Writes relative poses with the upper triangle of each covariance (empty when unknown).
pub fn write_trajectory_csv<T: Real>(path: &Path, traj: &Trajectory<T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    for e in traj.entries() {
        let mut rec = vec![
            e.t.to_string(),
            e.rel.dx.f64().to_string(),
            e.rel.dy.f64().to_string(),
            e.rel.dtheta.f64().to_string(),
        ];
        for (r, c) in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)] {
            rec.push(e.covariance.map(|m| m[r][c].f64().to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Trajectory<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRAJECTORY_HEADER {
        return Err(Error::Data(format!(
            "{}: expected header {}",
            path.display(),
            TRAJECTORY_HEADER.join(",")
        )));
    }
    let mut entries = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>> {
            let s = rec.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::Data(format!("{} row {}: bad number `{s}`", path.display(), line + 2)))
        };
        let need = |i: usize| -> Result<f64> {
            num(i)?.ok_or_else(|| Error::Data(format!("{} row {}: missing {}", path.display(), line + 2, TRAJECTORY_HEADER[i])))
        };
        let c: Vec<Option<f64>> = (4..10).map(num).collect::<Result<_>>()?;
        let covariance = if c.iter().all(Option::is_some) {
            let c: Vec<f64> = c.into_iter().flatten().collect();
            Some([[c[0], c[1], c[2]], [c[1], c[3], c[4]], [c[2], c[4], c[5]]])
        } else {
            None
        };
        entries.push(TrajectoryEntry {
            t: need(0)?,
            rel: Pose::new(need(1)?, need(2)?, need(3)?),
            covariance,
        });
    }
    Trajectory::new(Pose::identity(), entries)
}

pub fn write_report_json(path: &Path, report: &OdometryReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
