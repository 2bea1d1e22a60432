//! Weights file: little-endian `MSKW`, u32 version, the network config, then
//! a u32 tensor count and per tensor (u32 name length, UTF-8 name, u32 rank,
//! u32 dims, f32 payload).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array4};

use super::net::{InputFrame, InputMode, MaskNet, MaskNetConfig};
use super::tape::Conv2d;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MSKW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Writes `net` to `path`. Parameters are stored as f32, so an `f64`
/// network round-trips exactly only if its values are f32-representable.
pub fn save_weights<T: Real>(net: &MaskNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_weights(net, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_weights<T: Real, W: Write>(net: &MaskNet<T>, w: &mut W) -> std::io::Result<()> {
    let cfg = net.config();
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_u32::<LE>(WEIGHTS_VERSION)?;
    w.write_u32::<LE>(cfg.depth as u32)?;
    w.write_u32::<LE>(cfg.base_channels as u32)?;
    w.write_u8(match cfg.input_mode {
        InputMode::Single => 0,
        InputMode::Dual => 1,
    })?;
    w.write_u8(match cfg.input_frame {
        InputFrame::Cartesian => 0,
        InputFrame::Polar => 1,
    })?;
    w.write_u32::<LE>(cfg.kernel_size as u32)?;
    w.write_u32::<LE>(2 * net.layers().len() as u32)?;
    for (name, layer) in net.layer_names().iter().zip(net.layers()) {
        let tensors: [(String, Vec<usize>, Vec<T>); 2] = [
            (
                format!("{name}.weight"),
                layer.weight.shape().to_vec(),
                layer.weight.iter().copied().collect(),
            ),
            (format!("{name}.bias"), layer.bias.shape().to_vec(), layer.bias.to_vec()),
        ];
        for (tname, dims, data) in tensors {
            w.write_u32::<LE>(tname.len() as u32)?;
            w.write_all(tname.as_bytes())?;
            w.write_u32::<LE>(dims.len() as u32)?;
            for d in dims {
                w.write_u32::<LE>(d as u32)?;
            }
            for v in data {
                w.write_f32::<LE>(v.to_f32().unwrap_or(f32::NAN))?;
            }
        }
    }
    Ok(())
}

/// Reads a network from `path`.
pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<MaskNet<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_weights(&bytes, path)
}

/// Reads a network and insists its configuration equals `expected`.
pub fn load_weights_expecting<T: Real>(path: impl AsRef<Path>, expected: &MaskNetConfig) -> Result<MaskNet<T>> {
    let net = load_weights::<T>(path)?;
    if net.config() != expected {
        return Err(Error::ConfigMismatch {
            found: format!("{:?}", net.config()),
            expected: format!("{expected:?}"),
        });
    }
    Ok(net)
}

fn parse_weights<T: Real>(bytes: &[u8], path: &Path) -> Result<MaskNet<T>> {
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    let eof = |e: std::io::Error| Error::CorruptFile {
        path: path.to_path_buf(),
        reason: format!("truncated: {e}"),
    };
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let depth = r.read_u32::<LE>().map_err(eof)? as usize;
    let base_channels = r.read_u32::<LE>().map_err(eof)? as usize;
    let input_mode = match r.read_u8().map_err(eof)? {
        0 => InputMode::Single,
        1 => InputMode::Dual,
        m => return Err(corrupt(format!("unknown input mode {m}"))),
    };
    let input_frame = match r.read_u8().map_err(eof)? {
        0 => InputFrame::Cartesian,
        1 => InputFrame::Polar,
        m => return Err(corrupt(format!("unknown input frame {m}"))),
    };
    let kernel_size = r.read_u32::<LE>().map_err(eof)? as usize;
    let config = MaskNetConfig {
        depth,
        base_channels,
        input_mode,
        input_frame,
        kernel_size,
    };
    if depth > 16 || base_channels > 4096 {
        return Err(corrupt(format!("implausible config {config:?}")));
    }
    config.validate().map_err(|e| corrupt(e.to_string()))?;

    let specs = config.layer_specs();
    let count = r.read_u32::<LE>().map_err(eof)? as usize;
    if count != 2 * specs.len() {
        return Err(Error::Shape(format!(
            "config needs {} tensors, file has {count}",
            2 * specs.len()
        )));
    }
    let mut read_tensor = |expected_name: &str, expected_dims: &[usize]| -> Result<Vec<T>> {
        let len = r.read_u32::<LE>().map_err(eof)? as usize;
        if len > 256 {
            return Err(corrupt(format!("tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(eof)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(corrupt(format!("expected tensor {expected_name}, found {name}")));
        }
        let rank = r.read_u32::<LE>().map_err(eof)? as usize;
        if rank > 8 {
            return Err(corrupt(format!("tensor rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(eof)?;
        if dims != expected_dims {
            return Err(Error::Shape(format!("{name}: file dims {dims:?}, config needs {expected_dims:?}")));
        }
        let n: usize = dims.iter().product();
        if r.len() < 4 * n {
            return Err(corrupt(format!("truncated payload for {name}")));
        }
        (0..n)
            .map(|_| r.read_f32::<LE>().map(|v| T::of(f64::from(v))).map_err(eof))
            .collect()
    };
    let mut layers = Vec::with_capacity(specs.len());
    for (name, c_in, c_out, k) in &specs {
        let w = read_tensor(&format!("{name}.weight"), &[*c_out, *c_in, *k, *k])?;
        let b = read_tensor(&format!("{name}.bias"), &[*c_out])?;
        layers.push(Conv2d {
            weight: Array4::from_shape_vec((*c_out, *c_in, *k, *k), w).expect("dims checked"),
            bias: Array1::from(b),
        });
    }
    if !r.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", r.len())));
    }
    let net = MaskNet::from_layers(config, layers)?;
    if !net.is_finite() {
        return Err(corrupt("non-finite parameter".into()));
    }
    Ok(net)
}
