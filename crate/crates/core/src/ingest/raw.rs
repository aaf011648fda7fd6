//! Headerless little-endian float64 images described by a sidecar manifest.
//!
//! The manifest holds one `id,width,height,path` line per image; relative
//! paths resolve against the manifest's directory. Blank lines and lines
//! starting with `#` are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, ImageRecord, IngestError, SourceRef};

pub const RAW_MANIFEST: &str = "manifest.csv";

/// Accepts either the manifest file itself or a directory containing
/// `manifest.csv`.
pub fn load_raw_dir(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>, IngestError> {
    let path = path.as_ref();
    let manifest = if path.is_dir() {
        path.join(RAW_MANIFEST)
    } else {
        path.to_path_buf()
    };
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;

    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| IngestError::Manifest {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.splitn(4, ',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected id,width,height,path"));
        }
        let width: usize = fields[1]
            .parse()
            .map_err(|_| bad("width is not an integer"))?;
        let height: usize = fields[2]
            .parse()
            .map_err(|_| bad("height is not an integer"))?;
        let file = base.join(fields[3]);
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        let expected = (width * height * 8) as u64;
        if (bytes.len() as u64) < expected {
            return Err(IngestError::Truncated {
                path: file,
                expected,
                actual: bytes.len() as u64,
            });
        }
        let pixels: Vec<f64> = bytes[..expected as usize]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(IngestError::NonFinite {
                path: file,
                section: 0,
            });
        }
        let rec = ImageRecord {
            id: fields[0].to_string(),
            width,
            height,
            pixels,
            source: SourceRef {
                path: file,
                frame: 0,
            },
            source_bytes: expected,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

/// Writes each image as `<id>.f64` plus the manifest; returns the manifest path.
pub fn write_raw_dir(
    dir: impl AsRef<Path>,
    images: &[ImageRecord],
) -> Result<PathBuf, IngestError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for img in images {
        let name = format!("{}.f64", img.id);
        let file = dir.join(&name);
        let bytes: Vec<u8> = img.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
        fs::write(&file, bytes).map_err(io_err(&file))?;
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            img.id, img.width, img.height, name
        ));
    }
    let path = dir.join(RAW_MANIFEST);
    fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}
