use std::path::{Path, PathBuf};

use maskscan::evaluation::{KittiConfig, LengthAveraging};
use maskscan::geometry::{make_pose_grid, CartesianSpec, GridResolution, Pose, PoseGrid, SearchRegion};
use maskscan::masknet::MaskNetConfig;
use maskscan::simworld::{LabelConfig, NoiseConfig, SensorConfig, StreetConfig, TrajectorySpec};
use maskscan::training::{OptimizerKind, TrainConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Simulate = 1,
    Train = 2,
    Eval = 3,
}

/// Seed for `stream`, so each command can be re-run on its own and still
/// draw the same numbers.
pub fn substream_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingSection {
    pub beta: f64,
    pub region: SearchRegion<f64>,
    pub resolution: GridResolution<f64>,
    pub cartesian: CartesianSpec<f64>,
}

impl Default for MatchingSection {
    fn default() -> Self {
        Self {
            beta: maskscan::DESK_BETA,
            region: SearchRegion::symmetric(3.0, 1.5, 0.1),
            resolution: GridResolution::new(0.5, 0.5, 0.05),
            cartesian: CartesianSpec::new(64, 64, 0.5),
        }
    }
}

impl MatchingSection {
    pub fn grid(&self) -> CliResult<PoseGrid<f32>> {
        let r = &self.region;
        let region = SearchRegion {
            x_range: (r.x_range.0 as f32, r.x_range.1 as f32),
            y_range: (r.y_range.0 as f32, r.y_range.1 as f32),
            theta_range: (r.theta_range.0 as f32, r.theta_range.1 as f32),
        };
        let d = &self.resolution;
        Ok(make_pose_grid(
            region,
            GridResolution::new(d.delta_x as f32, d.delta_y as f32, d.delta_theta as f32),
        )?)
    }
}

/// Training hyper-parameters; the temperature comes from `[matching]` and
/// the seed from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss_weights: [f64; 3],
    pub optimizer: OptimizerKind,
    pub max_steps: usize,
    pub validation_patience: usize,
    pub validation_fraction: f64,
    pub validation_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 5,
            loss_weights: [1.0; 3],
            optimizer: OptimizerKind::adam(),
            max_steps: 900,
            validation_patience: 0,
            validation_fraction: 0.1,
            validation_interval: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    pub frames: usize,
    pub period: f64,
    pub speed: f64,
    pub speed_jitter: f64,
    pub yaw_std: f64,
    pub start: Pose<f64>,
}

impl Default for TrajectorySection {
    fn default() -> Self {
        let d = TrajectorySpec::default();
        Self {
            frames: d.frames,
            period: d.period,
            speed: d.speed,
            speed_jitter: d.speed_jitter,
            yaw_std: d.yaw_std,
            start: d.start,
        }
    }
}

impl TrajectorySection {
    pub fn spec(&self, seed: u64) -> TrajectorySpec {
        TrajectorySpec {
            frames: self.frames,
            period: self.period,
            speed: self.speed,
            speed_jitter: self.speed_jitter,
            yaw_std: self.yaw_std,
            start: self.start,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub episodes: usize,
    /// Render vehicles; off gives a purely static street.
    pub dynamic: bool,
    /// Write proxy static-scene labels next to the scans.
    pub labels: bool,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            episodes: 4,
            dynamic: true,
            labels: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_count: usize,
    pub confidence: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 1000.0,
            beta_count: 25,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Segment lengths in meters; empty scales them to the ground-truth path.
    pub lengths: Vec<f64>,
    pub step: usize,
    pub averaging: LengthAveraging,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            lengths: Vec::new(),
            step: 1,
            averaging: LengthAveraging::PerLength,
        }
    }
}

impl EvaluationSection {
    pub fn kitti(&self, path_length: f64) -> KittiConfig {
        let mut k = if self.lengths.is_empty() {
            KittiConfig::scaled_to(path_length)
        } else {
            KittiConfig {
                lengths: self.lengths.clone(),
                ..KittiConfig::full_scale()
            }
        };
        k.step = self.step;
        k.averaging = self.averaging;
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Translational grid steps in meters.
    pub resolutions: Vec<f64>,
    pub repetitions: usize,
    pub warmup: usize,
    /// Random subset of pairs to use; 0 uses them all.
    pub max_pairs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            resolutions: vec![0.8, 0.4, 0.2],
            repetitions: 10,
            warmup: 2,
            max_pairs: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub init_weights: Option<PathBuf>,
}

/// Everything a command needs, read from a TOML file and then overridden by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub matching: MatchingSection,
    pub net: MaskNetConfig,
    pub train: TrainSection,
    pub sensor: SensorConfig,
    pub noise: NoiseConfig,
    pub street: StreetConfig,
    pub trajectory: TrajectorySection,
    pub simulate: SimulateSection,
    pub labels: LabelConfig,
    pub calibration: CalibrationSection,
    pub evaluation: EvaluationSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            beta: self.matching.beta,
            loss_weights: t.loss_weights,
            optimizer: t.optimizer,
            max_steps: t.max_steps,
            validation_patience: t.validation_patience,
            validation_fraction: t.validation_fraction,
            validation_interval: t.validation_interval,
            seed: substream_seed(self.seed, Stream::Train),
        }
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> CliResult<()> {
        let m = &self.matching;
        if !(m.beta.is_finite() && m.beta > 0.0) {
            return Err(CliError::field("matching.beta", "must be positive"));
        }
        m.region.validate()?;
        m.resolution.validate()?;
        m.cartesian.validate()?;
        self.grid_check()?;
        self.net.validate()?;
        self.train_config().validate()?;
        self.sensor.validate()?;
        self.noise.validate()?;
        self.trajectory.spec(0).validate()?;
        if self.simulate.episodes == 0 {
            return Err(CliError::field("simulate.episodes", "must be at least 1"));
        }
        let l = &self.labels;
        if !(l.power_threshold > 0.0 && l.power_threshold < 1.0) {
            return Err(CliError::field("labels.power_threshold", "must lie in (0, 1)"));
        }
        if !(l.radius.is_finite() && l.radius > 0.0) {
            return Err(CliError::field("labels.radius", "must be positive"));
        }
        let c = &self.calibration;
        maskscan::uncertainty::log_beta_grid(c.beta_min, c.beta_max, c.beta_count)
            .map_err(|_| CliError::field("calibration", "needs 0 < beta_min < beta_max and beta_count >= 2"))?;
        if !(c.confidence > 0.0 && c.confidence < 1.0) {
            return Err(CliError::field("calibration.confidence", "must lie in (0, 1)"));
        }
        if self.evaluation.step == 0 {
            return Err(CliError::field("evaluation.step", "must be at least 1"));
        }
        if self.evaluation.lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(CliError::field("evaluation.lengths", "must be positive"));
        }
        let s = &self.sweep;
        if s.resolutions.is_empty() || s.resolutions.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(CliError::field("sweep.resolutions", "must be non-empty and positive"));
        }
        if s.repetitions == 0 {
            return Err(CliError::field("sweep.repetitions", "must be at least 1"));
        }
        for (name, p) in [
            ("paths.dataset", &self.paths.dataset),
            ("paths.weights", &self.paths.weights),
            ("paths.init_weights", &self.paths.init_weights),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::field(name, &format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    fn grid_check(&self) -> CliResult<()> {
        let grid = self.matching.grid()?;
        let (mx, my) = grid.max_translation();
        let spec = &self.matching.cartesian;
        let half = |n: usize| (n as f64 - 1.0) / 2.0 * spec.meters_per_pixel;
        if f64::from(mx) >= half(spec.width) || f64::from(my) >= half(spec.height) {
            return Err(CliError::field(
                "matching.region",
                "search region reaches beyond the Cartesian image",
            ));
        }
        Ok(())
    }
}
