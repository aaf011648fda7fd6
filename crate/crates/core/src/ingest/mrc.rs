//! MRC2014 reader and a minimal writer.
//!
//! Only the fields the pipeline needs are decoded: nx/ny/nz (bytes 0-11),
//! mode (12-15), NSYMBT (92-95) and the machine stamp (212-215). Data starts
//! at `1024 + NSYMBT`; sections are stored x-fastest, so each section is a
//! row-major `ny x nx` raster.

use std::fs;
use std::path::Path;

use super::{io_err, ImageRecord, IngestError, SourceRef};

const HEADER_LEN: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn stamp(self) -> [u8; 4] {
        match self {
            ByteOrder::Little => [0x44, 0x44, 0x00, 0x00],
            ByteOrder::Big => [0x11, 0x11, 0x00, 0x00],
        }
    }

    /// Unknown or zeroed stamps (common in older files) fall back to
    /// little-endian.
    fn from_stamp(stamp: [u8; 4]) -> Self {
        match stamp[0] {
            0x11 => ByteOrder::Big,
            _ => ByteOrder::Little,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrcMode {
    Int8,
    Int16,
    Float32,
}

impl MrcMode {
    pub fn code(self) -> i32 {
        match self {
            MrcMode::Int8 => 0,
            MrcMode::Int16 => 1,
            MrcMode::Float32 => 2,
        }
    }

    fn from_code(code: i32) -> Option<Self> {
        match code {
            0 => Some(MrcMode::Int8),
            1 => Some(MrcMode::Int16),
            2 => Some(MrcMode::Float32),
            _ => None,
        }
    }

    pub fn bytes_per_pixel(self) -> usize {
        match self {
            MrcMode::Int8 => 1,
            MrcMode::Int16 => 2,
            MrcMode::Float32 => 4,
        }
    }
}

fn read_i32(buf: &[u8], offset: usize, order: ByteOrder) -> i32 {
    let b: [u8; 4] = buf[offset..offset + 4].try_into().unwrap();
    match order {
        ByteOrder::Little => i32::from_le_bytes(b),
        ByteOrder::Big => i32::from_be_bytes(b),
    }
}

fn decode(bytes: &[u8], mode: MrcMode, order: ByteOrder) -> f64 {
    match (mode, order) {
        (MrcMode::Int8, _) => bytes[0] as i8 as f64,
        (MrcMode::Int16, ByteOrder::Little) => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
        (MrcMode::Int16, ByteOrder::Big) => i16::from_be_bytes([bytes[0], bytes[1]]) as f64,
        (MrcMode::Float32, ByteOrder::Little) => {
            f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64
        }
        (MrcMode::Float32, ByteOrder::Big) => {
            f32::from_be_bytes(bytes[..4].try_into().unwrap()) as f64
        }
    }
}

/// Reads every section of an MRC file as its own image. Ids are
/// `<file stem>_f<frame>` so movie frames stay distinct.
pub fn load_mrc(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>, IngestError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let truncated = |expected: u64| IngestError::Truncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len() as u64,
    };
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN as u64));
    }
    let order = ByteOrder::from_stamp(bytes[212..216].try_into().unwrap());
    let nx = read_i32(&bytes, 0, order);
    let ny = read_i32(&bytes, 4, order);
    let nz = read_i32(&bytes, 8, order);
    let mode_code = read_i32(&bytes, 12, order);
    let nsymbt = read_i32(&bytes, 92, order).max(0) as u64;

    if nx < 1 || ny < 1 || nz < 1 {
        return Err(IngestError::InvalidDimensions {
            path: path.to_path_buf(),
            nx,
            ny,
            nz,
        });
    }
    let mode = MrcMode::from_code(mode_code).ok_or_else(|| IngestError::UnsupportedMode {
        path: path.to_path_buf(),
        mode: mode_code,
    })?;

    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    let bpp = mode.bytes_per_pixel();
    let section_bytes = (nx * ny * bpp) as u64;
    let data_start = HEADER_LEN as u64 + nsymbt;
    let expected = data_start + section_bytes * nz as u64;
    if expected > bytes.len() as u64 {
        return Err(truncated(expected));
    }

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mrc".to_string());

    let mut records = Vec::with_capacity(nz);
    for z in 0..nz {
        let start = (data_start + section_bytes * z as u64) as usize;
        let raster = &bytes[start..start + section_bytes as usize];
        let pixels: Vec<f64> = raster
            .chunks_exact(bpp)
            .map(|px| decode(px, mode, order))
            .collect();
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(IngestError::NonFinite {
                path: path.to_path_buf(),
                section: z,
            });
        }
        records.push(ImageRecord {
            id: format!("{stem}_f{z}"),
            width: nx,
            height: ny,
            pixels,
            source: SourceRef {
                path: path.to_path_buf(),
                frame: z,
            },
            source_bytes: section_bytes,
        });
    }
    Ok(records)
}

/// Writes equally sized images as a mode-2 (float32) stack. Pixel values are
/// narrowed to f32, so only f32-representable data round-trips exactly.
pub fn write_mrc(
    path: impl AsRef<Path>,
    images: &[ImageRecord],
    order: ByteOrder,
) -> Result<(), IngestError> {
    let path = path.as_ref();
    let first = images.first().ok_or(IngestError::Empty)?;
    let (nx, ny) = (first.width, first.height);
    for img in images {
        if img.width != nx || img.height != ny {
            return Err(IngestError::MixedDimensions {
                id: img.id.clone(),
                expected_w: nx,
                expected_h: ny,
                width: img.width,
                height: img.height,
            });
        }
    }

    let put_i32 = |buf: &mut [u8], offset: usize, v: i32| {
        let b = match order {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        };
        buf[offset..offset + 4].copy_from_slice(&b);
    };
    let put_f32 = |buf: &mut [u8], offset: usize, v: f32| {
        let b = match order {
            ByteOrder::Little => v.to_le_bytes(),
            ByteOrder::Big => v.to_be_bytes(),
        };
        buf[offset..offset + 4].copy_from_slice(&b);
    };

    let mut header = vec![0u8; HEADER_LEN];
    put_i32(&mut header, 0, nx as i32);
    put_i32(&mut header, 4, ny as i32);
    put_i32(&mut header, 8, images.len() as i32);
    put_i32(&mut header, 12, MrcMode::Float32.code());
    // mx, my, mz
    put_i32(&mut header, 28, nx as i32);
    put_i32(&mut header, 32, ny as i32);
    put_i32(&mut header, 36, images.len() as i32);
    // cell dimensions in angstroms, one per pixel
    put_f32(&mut header, 40, nx as f32);
    put_f32(&mut header, 44, ny as f32);
    put_f32(&mut header, 48, images.len() as f32);
    for offset in [52, 56, 60] {
        put_f32(&mut header, offset, 90.0);
    }
    put_i32(&mut header, 64, 1);
    put_i32(&mut header, 68, 2);
    put_i32(&mut header, 72, 3);
    put_i32(&mut header, 104, 20140);
    header[208..212].copy_from_slice(b"MAP ");
    header[212..216].copy_from_slice(&order.stamp());

    let mut out = header;
    out.reserve(images.len() * nx * ny * 4);
    for img in images {
        for &p in &img.pixels {
            let v = p as f32;
            match order {
                ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
                ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
            }
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(nx: i32, ny: i32, nz: i32, mode: i32) -> Vec<u8> {
        let mut h = vec![0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&nx.to_le_bytes());
        h[4..8].copy_from_slice(&ny.to_le_bytes());
        h[8..12].copy_from_slice(&nz.to_le_bytes());
        h[12..16].copy_from_slice(&mode.to_le_bytes());
        h[212..216].copy_from_slice(&[0x44, 0x44, 0, 0]);
        h
    }

    #[test]
    fn minimal_float_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mrc");
        let mut bytes = header(2, 2, 1, 2);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let recs = load_mrc(&p).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].width, recs[0].height), (2, 2));
        assert_eq!(recs[0].pixels, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(recs[0].pixel(1, 0), 3.0);
        assert_eq!(recs[0].source_bytes, 16);
    }

    #[test]
    fn three_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stack.mrc");
        let mut bytes = header(2, 2, 3, 2);
        for v in 0..12 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        let recs = load_mrc(&p).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.width == 2 && r.height == 2));
        assert_eq!(recs[2].pixels, vec![8.0, 9.0, 10.0, 11.0]);
        assert_eq!(recs[1].id, "stack_f1");
        assert_eq!(recs[1].source.frame, 1);
    }

    #[test]
    fn integer_modes_and_extended_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i8.mrc");
        let mut bytes = header(3, 1, 1, 0);
        bytes[92..96].copy_from_slice(&8i32.to_le_bytes());
        bytes.extend_from_slice(&[0xAA; 8]);
        bytes.extend_from_slice(&[0x01, 0xFF, 0x80]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(load_mrc(&p).unwrap()[0].pixels, vec![1.0, -1.0, -128.0]);

        let p = dir.path().join("i16.mrc");
        let mut bytes = header(2, 1, 1, 1);
        bytes.extend_from_slice(&(-300i16).to_le_bytes());
        bytes.extend_from_slice(&(7i16).to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert_eq!(load_mrc(&p).unwrap()[0].pixels, vec![-300.0, 7.0]);
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mrc");
        let mut bytes = header(4, 4, 2, 2);
        bytes.extend_from_slice(&[0u8; 40]);
        fs::write(&p, bytes).unwrap();
        match load_mrc(&p) {
            Err(IngestError::Truncated { expected, .. }) => assert_eq!(expected, 1024 + 128),
            other => panic!("expected truncation, got {other:?}"),
        }
        let short = dir.path().join("s.mrc");
        fs::write(&short, [0u8; 100]).unwrap();
        assert!(matches!(
            load_mrc(&short),
            Err(IngestError::Truncated { .. })
        ));
    }

    #[test]
    fn unsupported_mode() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mrc");
        let mut bytes = header(1, 1, 1, 4);
        bytes.extend_from_slice(&[0u8; 8]);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_mrc(&p),
            Err(IngestError::UnsupportedMode { mode: 4, .. })
        ));
    }

    #[test]
    fn non_finite_names_section() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.mrc");
        let mut bytes = header(1, 1, 3, 2);
        for v in [1.0f32, 2.0, f32::INFINITY] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_mrc(&p),
            Err(IngestError::NonFinite { section: 2, .. })
        ));
    }

    #[test]
    fn byte_order_is_respected() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![
            ImageRecord::new("a", 3, 2, vec![1.5, -2.0, 3.25, 1e-3, 7.0, -0.5]).unwrap(),
            ImageRecord::new("b", 3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        ];
        let le = dir.path().join("le.mrc");
        let be = dir.path().join("be.mrc");
        write_mrc(&le, &imgs, ByteOrder::Little).unwrap();
        write_mrc(&be, &imgs, ByteOrder::Big).unwrap();
        assert_ne!(fs::read(&le).unwrap(), fs::read(&be).unwrap());
        let a = load_mrc(&le).unwrap();
        let b = load_mrc(&be).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels, y.pixels);
        }
        assert_eq!(a[0].pixels[0], 1.5);
    }
}
