//! Scan file: little-endian `RSCN`, u32 version, u8 frame type (0 polar,
//! 1 Cartesian), u32 rows, u32 columns, f32 row-major payload, then
//! metadata as f64: range resolution and azimuth-0 heading for polar scans,
//! meters per pixel and centre `(cx, cy)` for Cartesian ones.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::render::{NoiseConfig, SensorConfig};
use crate::error::{Error, Result};
use crate::geometry::{CartesianScan, CartesianSpec, PolarScan, Pose, Scan};
use crate::scalar::Real;

pub const SCAN_MAGIC: &[u8; 4] = b"RSCN";
pub const SCAN_VERSION: u32 = 1;

pub fn write_scan_file<T: Real>(path: impl AsRef<Path>, scan: &Scan<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_scan(&mut w, scan)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn write_scan<T: Real, W: Write>(w: &mut W, scan: &Scan<T>) -> std::io::Result<()> {
    w.write_all(SCAN_MAGIC)?;
    w.write_u32::<LE>(SCAN_VERSION)?;
    w.write_u8(u8::from(!scan.is_polar()))?;
    let p = scan.power();
    let (r, c) = p.dim();
    w.write_u32::<LE>(r as u32)?;
    w.write_u32::<LE>(c as u32)?;
    for v in p.iter() {
        w.write_f32::<LE>(v.to_f32().unwrap_or(f32::NAN))?;
    }
    match scan {
        Scan::Polar(s) => {
            w.write_f64::<LE>(s.range_resolution().f64())?;
            w.write_f64::<LE>(s.azimuth_0_direction().f64())?;
        }
        Scan::Cartesian(s) => {
            w.write_f64::<LE>(s.meters_per_pixel().f64())?;
            w.write_f64::<LE>(s.center().0.f64())?;
            w.write_f64::<LE>(s.center().1.f64())?;
        }
    }
    Ok(())
}

pub fn read_scan_file<T: Real>(path: impl AsRef<Path>) -> Result<Scan<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let eof = |e: std::io::Error| corrupt(format!("truncated: {e}"));
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != SCAN_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != SCAN_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: SCAN_VERSION,
        });
    }
    let frame = r.read_u8().map_err(eof)?;
    let rows = r.read_u32::<LE>().map_err(eof)? as usize;
    let cols = r.read_u32::<LE>().map_err(eof)? as usize;
    let meta = match frame {
        0 => 2,
        1 => 3,
        f => return Err(corrupt(format!("unknown frame type {f}"))),
    };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(meta * 8))
        .ok_or_else(|| corrupt("dimensions overflow".into()))?;
    if r.len() != expected {
        return Err(corrupt(format!("expected {expected} payload bytes, found {}", r.len())));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::of(r.read_f32::<LE>().map_err(eof)? as f64));
    }
    let power = Array2::from_shape_vec((rows, cols), data).map_err(|e| corrupt(e.to_string()))?;
    let mut m = [0.0; 3];
    for v in m.iter_mut().take(meta) {
        *v = r.read_f64::<LE>().map_err(eof)?;
    }
    let scan = if frame == 0 {
        Scan::Polar(PolarScan::new(power, T::of(m[0]), T::of(m[1])).map_err(|e| corrupt(e.to_string()))?)
    } else {
        Scan::Cartesian(
            CartesianScan::with_center(power, T::of(m[0]), (T::of(m[1]), T::of(m[2])))
                .map_err(|e| corrupt(e.to_string()))?,
        )
    };
    Ok(scan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub t: f64,
    /// Absolute sensor pose in the world frame.
    pub pose: Pose<f64>,
    /// Scan file, relative to the manifest.
    pub scan: String,
    pub label: Option<String>,
    pub distractor_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub id: usize,
    pub world_seed: u64,
    pub frames: Vec<FrameEntry>,
}

/// Index of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub sensor: SensorConfig,
    pub noise: NoiseConfig,
    pub cartesian: CartesianSpec<f64>,
    pub episodes: Vec<EpisodeEntry>,
}

impl Manifest {
    pub const VERSION: u32 = 1;

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(|e| e.frames.len()).sum()
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &Manifest) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != Manifest::VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: m.format_version,
            expected: Manifest::VERSION,
        });
    }
    Ok(m)
}
