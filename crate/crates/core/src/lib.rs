pub mod correlation;
pub mod error;
pub mod estimate;
pub mod evaluation;
pub mod geometry;
pub mod masknet;
pub mod matching;
pub mod scalar;
pub mod simworld;
pub mod training;
pub mod uncertainty;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Real;

/// Softmax temperature for desk-scale simworld scans. Their correlation
/// scores are a few tenths at most, so the library default of 1 leaves
/// the softmax close to uniform.
pub const DESK_BETA: f64 = 100.0;

pub type Pose32 = geometry::Pose<f32>;
pub type Pose64 = geometry::Pose<f64>;
pub type PoseGrid32 = geometry::PoseGrid<f32>;
pub type PoseGrid64 = geometry::PoseGrid<f64>;
pub type CartesianScan32 = geometry::CartesianScan<f32>;
pub type CartesianScan64 = geometry::CartesianScan<f64>;
pub type PolarScan32 = geometry::PolarScan<f32>;
pub type PolarScan64 = geometry::PolarScan<f64>;
pub type MaskNet32 = masknet::MaskNet<f32>;
pub type MaskNet64 = masknet::MaskNet<f64>;
pub type Matcher32 = matching::Matcher<f32>;
pub type Matcher64 = matching::Matcher<f64>;
pub type PoseEstimate32 = estimate::PoseEstimate<f32>;
pub type PoseEstimate64 = estimate::PoseEstimate<f64>;
