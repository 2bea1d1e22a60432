//! Synthetic radar street scenes: ray-cast polar scans with artefacts,
//! moving distractors, ground-truth trajectories and static-scene labels.

mod io;
mod render;
mod sequence;
mod world;

pub use io::{
    read_manifest, read_scan_file, write_manifest, write_scan_file, EpisodeEntry, FrameEntry, Manifest, SCAN_MAGIC,
    SCAN_VERSION,
};
pub use render::{render_scan, render_scan_detailed, HitSource, NoiseConfig, RenderDetail, SensorConfig};
pub use sequence::{
    ego_poses, generate_sequence, generate_static_labels, sequence_static_labels, LabelConfig, Sequence,
    TrajectorySpec,
};
pub use world::{street_world, DynamicObject, PointReflector, Segment, StreetConfig, WorldModel};

#[cfg(test)]
mod tests;
