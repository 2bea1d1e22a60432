//! Outputs are written under a temporary name and renamed into place, so a
//! failed command never leaves a partial file behind.

use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Runs `write` against a temporary path next to `path`, then renames it.
pub fn atomic_file<F>(path: &Path, write: F) -> CliResult<()>
where
    F: FnOnce(&Path) -> CliResult<()>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(CliError::Data(format!("output directory {} does not exist", parent.display())));
        }
    }
    let tmp = sibling(path, "tmp");
    match write(&tmp) {
        Ok(()) => std::fs::rename(&tmp, path).map_err(|e| io_err(path, e)),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Builds a directory under a temporary name, then renames it to `path`.
/// An existing `path` is only replaced when `overwrite` is set.
pub fn atomic_dir<F>(path: &Path, overwrite: bool, build: F) -> CliResult<()>
where
    F: FnOnce(&Path) -> CliResult<()>,
{
    if path.exists() && !overwrite {
        return Err(CliError::Config(format!(
            "{} already exists (pass --overwrite to replace it)",
            path.display()
        )));
    }
    let tmp = sibling(path, "partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    if let Err(e) = build(&tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| io_err(path, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
