//! File helpers: atomic writes and dataset discovery.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use selseg_core::image::load_image;
use selseg_core::{FieldKind, ScalarField};

use crate::Failure;

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Failure::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Failure::io(path, e))?;
    tmp.persist(path).map_err(|e| Failure::io(path, e.error))?;
    Ok(())
}

pub fn is_image(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("pgm" | "png"))
}

/// Files directly inside `dir` (no recursion), keyed by file name.
pub fn list_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Failure::io(dir, e))?.path();
        if path.is_file() {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

pub fn stem(path: &Path) -> Result<String, Failure> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Failure::usage(format!("{} has no usable file name", path.display())))
}

/// Loads a mask image; pixels above mid-grey are foreground.
pub fn load_mask(path: &Path) -> Result<ScalarField, Failure> {
    let img = load_image(path).map_err(|e| Failure::from(e).context(path))?;
    let (h, w) = img.dims();
    let data = img.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(ScalarField::new(h, w, data, FieldKind::Mask)?)
}
