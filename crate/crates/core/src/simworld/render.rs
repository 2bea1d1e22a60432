use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::world::{Segment, WorldModel};
use crate::error::{Error, Result};
use crate::geometry::{PolarScan, Pose};
use crate::scalar::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub n_azimuths: usize,
    pub n_range_bins: usize,
    /// Meters per range bin.
    pub range_resolution: f64,
    /// Heading of azimuth 0 in the sensor frame.
    pub azimuth_0_direction: f64,
    /// Returns closer than this are not attenuated; beyond it power falls as `1/r`.
    pub falloff_reference: f64,
    /// Std (meters) of the Gaussian range profile of a return; 0 splits each
    /// return linearly between the two nearest bins.
    pub range_spread: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_azimuths: 128,
            n_range_bins: 128,
            range_resolution: 0.25,
            azimuth_0_direction: 0.0,
            falloff_reference: 8.0,
            range_spread: 0.4,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_azimuths < 2 || self.n_range_bins < 1 {
            return Err(Error::config("sensor", "needs at least 2 azimuths and 1 range bin"));
        }
        if !(self.range_resolution > 0.0 && self.falloff_reference > 0.0) {
            return Err(Error::config("sensor", "range_resolution and falloff_reference must be positive"));
        }
        if !(self.range_spread.is_finite() && self.range_spread >= 0.0) {
            return Err(Error::config("sensor.range_spread", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn max_range(&self) -> f64 {
        self.n_range_bins as f64 * self.range_resolution
    }

    fn beam_width(&self) -> f64 {
        TAU / self.n_azimuths as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Std of the multiplicative speckle factor.
    pub speckle_std: f64,
    /// Probability that an azimuth carries a ghost streak.
    pub ghost_probability: f64,
    /// Peak power of a ghost streak.
    pub ghost_power: f64,
    /// Returns are clipped at this power.
    pub saturation_level: f64,
    /// Scale of the additive receiver noise.
    pub receiver_noise_floor: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            speckle_std: 0.2,
            ghost_probability: 0.03,
            ghost_power: 0.4,
            saturation_level: 0.9,
            receiver_noise_floor: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            speckle_std: 0.0,
            ghost_probability: 0.0,
            ghost_power: 0.0,
            saturation_level: 1.0,
            receiver_noise_floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let non_neg = [
            self.speckle_std,
            self.ghost_probability,
            self.ghost_power,
            self.saturation_level,
            self.receiver_noise_floor,
        ];
        if non_neg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("noise", "all parameters must be finite and non-negative"));
        }
        if self.ghost_probability > 1.0 {
            return Err(Error::config("noise.ghost_probability", "must not exceed 1"));
        }
        Ok(())
    }
}

/// What produced each cell's noise-free return.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HitSource {
    None,
    Static,
    Dynamic,
}

#[derive(Debug, Clone)]
pub struct RenderDetail {
    pub scan: PolarScan<f64>,
    /// Noise-free power before artefacts.
    pub clean: Array2<f64>,
    pub source: Array2<HitSource>,
    /// Azimuths that received a ghost streak.
    pub ghosts: Vec<bool>,
}

impl RenderDetail {
    /// Share of non-empty clean cells produced by moving objects.
    pub fn distractor_fraction(&self) -> f64 {
        let hits = self.source.iter().filter(|s| **s != HitSource::None).count();
        let dynamic = self.source.iter().filter(|s| **s == HitSource::Dynamic).count();
        if hits == 0 {
            0.0
        } else {
            dynamic as f64 / hits as f64
        }
    }
}

fn ray_segment(o: [f64; 2], d: [f64; 2], s: &Segment) -> Option<f64> {
    let e = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
    let denom = d[0] * e[1] - d[1] * e[0];
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = [s.a[0] - o[0], s.a[1] - o[1]];
    let r = (w[0] * e[1] - w[1] * e[0]) / denom;
    let u = (w[0] * d[1] - w[1] * d[0]) / denom;
    (r > 1e-9 && (0.0..=1.0).contains(&u)).then_some(r)
}

/// Per-frame generator seeded from the world seed and the timestamp.
pub(crate) fn frame_rng(seed: u64, time: f64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(time.to_bits());
    rng
}

/// Ray-cast scan with noise; see [`render_scan_detailed`].
pub fn render_scan(
    world: &WorldModel,
    sensor_pose: &Pose<f64>,
    sensor: &SensorConfig,
    noise: &NoiseConfig,
    time: f64,
) -> Result<PolarScan<f64>> {
    Ok(render_scan_detailed(world, sensor_pose, sensor, noise, time)?.scan)
}

/// First hit per azimuth with `1/r` falloff, spread over range by the sensor's
/// range profile; then ghost streaks, receiver noise, speckle and
/// saturation. Deterministic in `(world.seed, time)`.
pub fn render_scan_detailed(
    world: &WorldModel,
    sensor_pose: &Pose<f64>,
    sensor: &SensorConfig,
    noise: &NoiseConfig,
    time: f64,
) -> Result<RenderDetail> {
    sensor.validate()?;
    noise.validate()?;
    if !world.contains(sensor_pose.dx, sensor_pose.dy) {
        return Err(Error::Data(format!(
            "sensor at ({}, {}) lies outside the world bounds",
            sensor_pose.dx, sensor_pose.dy
        )));
    }
    let (na, nr) = (sensor.n_azimuths, sensor.n_range_bins);
    let max_range = sensor.max_range();
    let o = [sensor_pose.dx, sensor_pose.dy];

    let near = |s: &Segment| {
        let d = |p: [f64; 2]| (p[0] - o[0]).hypot(p[1] - o[1]);
        let len = (s.b[0] - s.a[0]).hypot(s.b[1] - s.a[1]);
        d(s.a).min(d(s.b)) <= max_range + len
    };
    let statics: Vec<&Segment> = world.segments.iter().filter(|s| near(s)).collect();
    let dynamics: Vec<Segment> = world
        .dynamic
        .iter()
        .flat_map(|d| d.segments_at(time))
        .filter(near)
        .collect();

    // Point reflectors belong to the beam whose centre is nearest their bearing.
    let mut point_hits: Vec<Option<(f64, f64)>> = vec![None; na];
    for p in &world.points {
        let (dx, dy) = (p.position[0] - o[0], p.position[1] - o[1]);
        let r = dx.hypot(dy);
        if r <= 1e-9 || r >= max_range {
            continue;
        }
        let bearing = wrap_angle(dy.atan2(dx) - sensor_pose.dtheta - sensor.azimuth_0_direction);
        let i = ((bearing / sensor.beam_width()).round() as i64).rem_euclid(na as i64) as usize;
        if point_hits[i].is_none_or(|(r0, _)| r < r0) {
            point_hits[i] = Some((r, p.reflectivity));
        }
    }

    let mut clean = Array2::<f64>::zeros((na, nr));
    let mut source = Array2::from_elem((na, nr), HitSource::None);
    for i in 0..na {
        let phi = sensor_pose.dtheta + sensor.azimuth_0_direction + i as f64 * sensor.beam_width();
        let d = [phi.cos(), phi.sin()];
        let mut best: Option<(f64, f64, HitSource)> = None;
        let mut consider = |r: f64, refl: f64, src: HitSource| {
            if best.is_none_or(|(r0, _, _)| r < r0) {
                best = Some((r, refl, src));
            }
        };
        for s in &statics {
            if let Some(r) = ray_segment(o, d, s) {
                consider(r, s.reflectivity, HitSource::Static);
            }
        }
        for s in &dynamics {
            if let Some(r) = ray_segment(o, d, s) {
                consider(r, s.reflectivity, HitSource::Dynamic);
            }
        }
        if let Some((r, refl)) = point_hits[i] {
            consider(r, refl, HitSource::Static);
        }
        let Some((r, refl, src)) = best else { continue };
        let f = r / sensor.range_resolution - 0.5;
        if f > (nr - 1) as f64 {
            continue;
        }
        let power = refl * (sensor.falloff_reference / r).min(1.0);
        if sensor.range_spread > 0.0 {
            let sigma = sensor.range_spread / sensor.range_resolution;
            let lo = (f - 3.0 * sigma).ceil().max(0.0) as usize;
            let hi = ((f + 3.0 * sigma).floor() as usize).min(nr - 1);
            for j in lo..=hi {
                let z = (j as f64 - f) / sigma;
                clean[[i, j]] += power * (-0.5 * z * z).exp();
                source[[i, j]] = src;
            }
            continue;
        }
        let (j0, w) = if f <= 0.0 { (0, 0.0) } else { (f.floor() as usize, f - f.floor()) };
        for (j, share) in [(j0, 1.0 - w), (j0 + 1, w)] {
            if j < nr && share > 0.0 {
                clean[[i, j]] += power * share;
                source[[i, j]] = src;
            }
        }
    }

    let mut rng = frame_rng(world.seed, time);
    let mut power = clean.clone();
    let mut ghosts = vec![false; na];
    for (i, g) in ghosts.iter_mut().enumerate() {
        if noise.ghost_probability > 0.0 && rng.random_bool(noise.ghost_probability) {
            *g = true;
            let len = rng.random_range((nr / 8).max(1)..=(nr / 3).max(1));
            let start = rng.random_range(0..nr.saturating_sub(len).max(1));
            let level = noise.ghost_power * rng.random_range(0.5..1.0);
            for j in start..(start + len).min(nr) {
                power[[i, j]] += level;
            }
        }
    }
    if noise.receiver_noise_floor > 0.0 || noise.speckle_std > 0.0 {
        for p in power.iter_mut() {
            let floor: f64 = rng.sample::<f64, _>(StandardNormal).abs() * noise.receiver_noise_floor;
            let speckle: f64 = 1.0 + noise.speckle_std * rng.sample::<f64, _>(StandardNormal);
            *p = (*p + floor) * speckle.max(0.0);
        }
    }
    let sat = noise.saturation_level;
    power.mapv_inplace(|p| p.min(sat).clamp(0.0, 1.0));
    Ok(RenderDetail {
        scan: PolarScan::new(power, sensor.range_resolution, sensor.azimuth_0_direction)?,
        clean,
        source,
        ghosts,
    })
}
