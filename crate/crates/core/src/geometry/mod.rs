//! SE(2) poses, candidate grids, scans and differentiable image warps.
//!
//! Conventions used throughout the crate: x right, y up, positive angles
//! counter-clockwise; samples outside an image read as zero power.

mod grid;
mod polar;
mod pose;
mod scan;
mod warp;

pub use grid::{make_pose_grid, GridResolution, PoseGrid, SearchRegion};
pub use polar::{polar_to_cartesian, CartesianSpec, PolarToCartesian};
pub use pose::{compose, inverse, relative, Pose};
pub use scan::{CartesianScan, PolarScan, Scan};
pub(crate) use warp::bilinear_taps_zero;
pub use warp::{image_center, resize_bilinear, rotate_bilinear, warp_pose, LinearWarp};
