use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{render_scan_detailed, NoiseConfig, SensorConfig};
use super::world::WorldModel;
use crate::error::{Error, Result};
use crate::evaluation::{Trajectory, TrajectoryEntry};
use crate::geometry::{compose, relative, warp_pose, CartesianScan, PolarScan, Pose, Scan, SearchRegion};
use crate::training::TrainingSample;

/// Ego motion: forward speed with jitter and a yaw random walk pulled back
/// towards the street centre line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySpec {
    pub frames: usize,
    /// Seconds between scans.
    pub period: f64,
    pub speed: f64,
    pub speed_jitter: f64,
    /// Std of the per-frame heading change (rad).
    pub yaw_std: f64,
    pub start: Pose<f64>,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frames: 50,
            period: 0.25,
            speed: 8.0,
            speed_jitter: 1.0,
            yaw_std: 0.02,
            start: Pose::new(20.0, 0.0, 0.0),
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::config("trajectory.frames", "must be at least 1"));
        }
        if !(self.period > 0.0 && self.speed >= 0.0 && self.speed_jitter >= 0.0 && self.yaw_std >= 0.0) {
            return Err(Error::config("trajectory", "period must be positive; speed and jitter non-negative"));
        }
        Ok(())
    }
}

/// Absolute poses whose consecutive relative motions all lie in `region`.
pub fn ego_poses(spec: &TrajectorySpec, region: &SearchRegion<f64>) -> Result<Vec<Pose<f64>>> {
    spec.validate()?;
    region.validate()?;
    let margin = 0.9;
    let (x_lo, x_hi) = (region.x_range.0 * margin, region.x_range.1 * margin);
    let (t_lo, t_hi) = (region.theta_range.0 * margin, region.theta_range.1 * margin);
    let step_max = spec.speed * spec.period + spec.speed_jitter * spec.period;
    if step_max > x_hi || region.y_range.0 > 0.0 || region.y_range.1 < 0.0 {
        return Err(Error::config(
            "trajectory.speed",
            format!("forward step up to {step_max} m exceeds the search region ({x_hi} m)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(3);
    let mut poses = vec![spec.start];
    let (y_lo, y_hi) = (region.y_range.0 * margin, region.y_range.1 * margin);
    for _ in 1..spec.frames {
        let last = *poses.last().expect("non-empty");
        let v = spec.speed + spec.speed_jitter * rng.random_range(-1.0..1.0);
        let dx = (v * spec.period).clamp(x_lo.max(0.0), x_hi);
        // Steer back towards y = start.y and heading zero.
        let pull = -0.3 * last.dtheta - 0.02 * (last.dy - spec.start.dy);
        let dtheta = (pull + spec.yaw_std * rng.sample::<f64, _>(StandardNormal)).clamp(t_lo, t_hi);
        let rel = Pose::new(dx, 0.0f64.clamp(y_lo, y_hi), dtheta);
        poses.push(compose(&last, &rel));
    }
    Ok(poses)
}

/// Rendered frames with ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub times: Vec<f64>,
    pub poses: Vec<Pose<f64>>,
    pub scans: Vec<PolarScan<f64>>,
    /// Per-frame share of returns produced by moving objects.
    pub distractor_fractions: Vec<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    /// `inverse(P_{t-1}) ∘ P_t` for every consecutive pair.
    pub fn relative_poses(&self) -> Vec<Pose<f64>> {
        self.poses.windows(2).map(|w| relative(&w[0], &w[1])).collect()
    }

    /// Pairs `(Z_t, Z_{t-1})` labelled with their relative pose.
    pub fn samples(&self) -> Vec<TrainingSample<f64>> {
        self.relative_poses()
            .into_iter()
            .enumerate()
            .map(|(i, rel)| TrainingSample {
                z1: Scan::Polar(self.scans[i + 1].clone()),
                z2: Scan::Polar(self.scans[i].clone()),
                pose_gt: rel,
            })
            .collect()
    }

    pub fn ground_truth(&self) -> Trajectory<f64> {
        let entries = self
            .relative_poses()
            .into_iter()
            .zip(&self.times[1..])
            .map(|(rel, &t)| TrajectoryEntry {
                t,
                rel,
                covariance: None,
            })
            .collect();
        Trajectory::new(self.poses[0], entries).expect("times increase")
    }

    pub fn mean_distractor_fraction(&self) -> f64 {
        if self.distractor_fractions.is_empty() {
            return 0.0;
        }
        self.distractor_fractions.iter().sum::<f64>() / self.distractor_fractions.len() as f64
    }
}

/// Renders every frame of `spec` (in parallel; each frame is seeded from its timestamp).
pub fn generate_sequence(
    world: &WorldModel,
    spec: &TrajectorySpec,
    region: &SearchRegion<f64>,
    sensor: &SensorConfig,
    noise: &NoiseConfig,
) -> Result<Sequence> {
    world.validate()?;
    let poses = ego_poses(spec, region)?;
    let times: Vec<f64> = (0..poses.len()).map(|i| i as f64 * spec.period).collect();
    let frames: Vec<Result<(PolarScan<f64>, f64)>> = poses
        .par_iter()
        .zip(&times)
        .map(|(p, &t)| {
            let d = render_scan_detailed(world, p, sensor, noise, t)?;
            let f = d.distractor_fraction();
            Ok((d.scan, f))
        })
        .collect();
    let mut scans = Vec::with_capacity(frames.len());
    let mut distractor_fractions = Vec::with_capacity(frames.len());
    for f in frames {
        let (s, d) = f?;
        scans.push(s);
        distractor_fractions.push(d);
    }
    Ok(Sequence {
        times,
        poses,
        scans,
        distractor_fractions,
    })
}

/// Per-cell vote over scans already warped into a common frame: 1 where more
/// than `min_count` scans exceed `power_threshold`.
pub fn generate_static_labels(scans: &[CartesianScan<f64>], power_threshold: f64, min_count: usize) -> Result<Array2<f64>> {
    if !(power_threshold > 0.0 && power_threshold < 1.0) {
        return Err(Error::config("labels.power_threshold", "must lie in (0, 1)"));
    }
    if scans.len() < min_count {
        return Err(Error::Data(format!(
            "{} scans cannot vote with min_count {min_count}",
            scans.len()
        )));
    }
    let Some(first) = scans.first() else {
        return Err(Error::Data("no scans to label".into()));
    };
    if scans.iter().any(|s| s.dim() != first.dim()) {
        return Err(Error::Shape("label scans must share a raster".into()));
    }
    let mut counts = Array2::<usize>::zeros(first.dim());
    for s in scans {
        ndarray::Zip::from(&mut counts)
            .and(s.power())
            .for_each(|c, p| *c += usize::from(*p > power_threshold));
    }
    Ok(counts.mapv(|c| if c > min_count { 1.0 } else { 0.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub power_threshold: f64,
    pub min_count: usize,
    /// Frames whose sensor lies within this distance of the target frame vote.
    pub radius: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            power_threshold: 0.05,
            min_count: 9,
            radius: 40.0,
        }
    }
}

/// Static-scene labels for every frame, from Cartesian scans of the same sequence.
pub fn sequence_static_labels(
    cartesian: &[CartesianScan<f64>],
    poses: &[Pose<f64>],
    cfg: &LabelConfig,
) -> Result<Vec<Array2<f64>>> {
    if cartesian.len() != poses.len() {
        return Err(Error::Shape("one pose per scan required".into()));
    }
    (0..poses.len())
        .into_par_iter()
        .map(|t| {
            let voters: Vec<CartesianScan<f64>> = (0..poses.len())
                .filter(|&k| (poses[k].dx - poses[t].dx).hypot(poses[k].dy - poses[t].dy) <= cfg.radius)
                .map(|k| warp_pose(&cartesian[k], &relative(&poses[t], &poses[k])))
                .collect();
            if voters.len() < cfg.min_count {
                return Ok(Array2::zeros(cartesian[t].dim()));
            }
            generate_static_labels(&voters, cfg.power_threshold, cfg.min_count)
        })
        .collect()
}
