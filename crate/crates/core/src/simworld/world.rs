use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reflective wall piece from `a` to `b` (world meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub reflectivity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointReflector {
    pub position: [f64; 2],
    pub reflectivity: f64,
}

/// Rigid cluster of segments translating at constant velocity; segment
/// coordinates are relative to `position` at time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicObject {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub segments: Vec<Segment>,
}

impl DynamicObject {
    /// Axis-aligned box outline of `length` x `width` centred on `position`.
    pub fn vehicle(position: [f64; 2], velocity: [f64; 2], length: f64, width: f64, reflectivity: f64) -> Self {
        let (hl, hw) = (length / 2.0, width / 2.0);
        let c = [[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]];
        let segments = (0..4)
            .map(|i| Segment {
                a: c[i],
                b: c[(i + 1) % 4],
                reflectivity,
            })
            .collect();
        Self {
            position,
            velocity,
            segments,
        }
    }

    pub fn position_at(&self, t: f64) -> [f64; 2] {
        [self.position[0] + self.velocity[0] * t, self.position[1] + self.velocity[1] * t]
    }

    /// Segments in world coordinates at time `t`.
    pub fn segments_at(&self, t: f64) -> impl Iterator<Item = Segment> + '_ {
        let p = self.position_at(t);
        self.segments.iter().map(move |s| Segment {
            a: [s.a[0] + p[0], s.a[1] + p[1]],
            b: [s.b[0] + p[0], s.b[1] + p[1]],
            reflectivity: s.reflectivity,
        })
    }
}

/// Static scene, moving distractors and the seed driving sensor noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub segments: Vec<Segment>,
    pub points: Vec<PointReflector>,
    pub dynamic: Vec<DynamicObject>,
    /// `[x_min, x_max, y_min, y_max]`.
    pub bounds: [f64; 4],
    pub seed: u64,
}

impl WorldModel {
    pub fn empty(bounds: [f64; 4], seed: u64) -> Self {
        Self {
            segments: Vec::new(),
            points: Vec::new(),
            dynamic: Vec::new(),
            bounds,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, x1, y0, y1] = self.bounds;
        if !(self.bounds.iter().all(|b| b.is_finite()) && x1 > x0 && y1 > y0) {
            return Err(Error::config("world.bounds", "must be finite with min < max"));
        }
        let refl = self
            .segments
            .iter()
            .map(|s| s.reflectivity)
            .chain(self.points.iter().map(|p| p.reflectivity))
            .chain(self.dynamic.iter().flat_map(|d| d.segments.iter().map(|s| s.reflectivity)));
        for r in refl {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config("world.reflectivity", format!("{r} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [x0, x1, y0, y1] = self.bounds;
        (x0..=x1).contains(&x) && (y0..=y1).contains(&y)
    }

    /// Same world without moving objects.
    pub fn without_dynamic(&self) -> Self {
        Self {
            dynamic: Vec::new(),
            ..self.clone()
        }
    }
}

/// Parameters of the procedurally generated street used for training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreetConfig {
    /// Street runs along +x from 0 to `length`.
    pub length: f64,
    /// Distance of the building fronts from the centre line.
    pub half_width: f64,
    pub wall_reflectivity: (f64, f64),
    pub pole_spacing: f64,
    pub pole_reflectivity: (f64, f64),
    /// Lateral offsets of the traffic lanes.
    pub lanes: [f64; 2],
    pub vehicles_per_lane: usize,
    /// Mean gap between vehicles in a lane.
    pub vehicle_gap: f64,
    /// Vehicle speed along +x (m/s); matching the ego speed makes them look static.
    pub vehicle_speed: f64,
    pub vehicle_speed_jitter: f64,
    pub vehicle_reflectivity: (f64, f64),
}

impl Default for StreetConfig {
    fn default() -> Self {
        Self {
            length: 400.0,
            half_width: 9.0,
            wall_reflectivity: (0.5, 0.8),
            pole_spacing: 6.0,
            pole_reflectivity: (0.4, 0.7),
            lanes: [-3.5, 3.5],
            vehicles_per_lane: 40,
            vehicle_gap: 12.0,
            vehicle_speed: 8.0,
            vehicle_speed_jitter: 0.3,
            vehicle_reflectivity: (0.8, 1.0),
        }
    }
}

/// Two jagged building fronts, roadside poles and platoons of vehicles in two lanes.
pub fn street_world(cfg: &StreetConfig, seed: u64) -> Result<WorldModel> {
    if !(cfg.length > 0.0 && cfg.half_width > 0.0 && cfg.pole_spacing > 0.0 && cfg.vehicle_gap >= 0.0) {
        return Err(Error::config("street", "length, half_width and pole_spacing must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 60.0;
    let (x0, x1) = (-margin, cfg.length + margin);
    let mut segments = Vec::new();
    let mut points = Vec::new();
    let refl = |rng: &mut ChaCha8Rng, r: (f64, f64)| if r.1 > r.0 { rng.random_range(r.0..r.1) } else { r.0 };
    for side in [-1.0, 1.0] {
        let mut x = x0;
        while x < x1 {
            let len = rng.random_range(2.0..9.0);
            let y = side * (cfg.half_width + rng.random_range(0.0..2.5));
            let r = refl(&mut rng, cfg.wall_reflectivity);
            segments.push(Segment {
                a: [x, y],
                b: [x + len, y],
                reflectivity: r,
            });
            // Recessed doorway or side street: a short perpendicular return.
            if rng.random_bool(0.5) {
                let depth = side * rng.random_range(0.5..3.0);
                segments.push(Segment {
                    a: [x + len, y],
                    b: [x + len, y + depth],
                    reflectivity: r,
                });
            }
            x += len + rng.random_range(0.3..3.0);
        }
        let mut x = x0;
        while x < x1 {
            x += cfg.pole_spacing * rng.random_range(0.5..1.5);
            points.push(PointReflector {
                position: [x, side * (cfg.half_width - rng.random_range(0.8..1.6))],
                reflectivity: refl(&mut rng, cfg.pole_reflectivity),
            });
        }
    }
    let mut dynamic = Vec::new();
    for &lane in &cfg.lanes {
        let mut x = x0 + rng.random_range(0.0..cfg.vehicle_gap.max(1.0));
        for _ in 0..cfg.vehicles_per_lane {
            let length = rng.random_range(3.8..5.5);
            let width = rng.random_range(1.6..2.1);
            let speed = cfg.vehicle_speed + cfg.vehicle_speed_jitter * rng.random_range(-1.0..1.0);
            dynamic.push(DynamicObject::vehicle(
                [x + length / 2.0, lane + rng.random_range(-0.3..0.3)],
                [speed, 0.0],
                length,
                width,
                refl(&mut rng, cfg.vehicle_reflectivity),
            ));
            x += length + cfg.vehicle_gap * rng.random_range(0.5..1.5);
        }
    }
    let world = WorldModel {
        segments,
        points,
        dynamic,
        bounds: [x0 - 200.0, x1 + 400.0, -cfg.half_width - 50.0, cfg.half_width + 50.0],
        seed,
    };
    world.validate()?;
    Ok(world)
}
