//! Binary matrix files.
//!
//! Layout: magic `WSTF`, u16 version, u32 rows, u32 cols, then rows·cols
//! little-endian reals in row-major order. Version 1 stores 32-bit reals and
//! is the feature-file format; version 2 stores 64-bit reals and is used for
//! checkpoint tensors so parameters round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WSTF";
pub const VERSION_F32: u16 = 1;
pub const VERSION_F64: u16 = 2;
pub const HEADER_LEN: usize = 14;

fn header(version: u16, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out
}

/// Encode a matrix as version 1 (values narrowed to f32).
pub fn encode_f32(m: &Array2<f64>) -> Vec<u8> {
    let mut out = header(VERSION_F32, m.nrows(), m.ncols());
    out.reserve(m.len() * 4);
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_f64(m: &Array2<f64>) -> Vec<u8> {
    let mut out = header(VERSION_F64, m.nrows(), m.ncols());
    out.reserve(m.len() * 8);
    for &v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode one matrix from the front of `bytes`, returning it and the number
/// of bytes consumed. `base` offsets reported byte positions.
pub fn decode(bytes: &[u8], path: &Path, base: u64) -> Result<(Array2<f64>, usize)> {
    let fail = |offset: usize, msg: String| Error::Format { path: path.to_path_buf(), offset: base + offset as u64, msg };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("header needs {HEADER_LEN} bytes, found {}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let width = match version {
        VERSION_F32 => 4,
        VERSION_F64 => 8,
        v => return Err(fail(4, format!("unsupported version {v}"))),
    };
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let n = rows * cols;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < n * width {
        let complete = payload.len() / width;
        return Err(fail(
            HEADER_LEN + complete * width,
            format!("truncated payload: expected {n} values, found {complete}"),
        ));
    }
    let data: Vec<f64> = if width == 4 {
        payload[..n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    } else {
        payload[..n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    let m = Array2::from_shape_vec((rows, cols), data).expect("shape matches payload");
    Ok((m, HEADER_LEN + n * width))
}

/// Read a feature file (either version).
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::ingest(path, format!("cannot open feature file: {e}")))?
        .read_to_end(&mut bytes)?;
    let (m, used) = decode(&bytes, path, 0)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: used as u64,
            msg: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(m)
}

pub fn write_matrix_f32(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_f32(m))?;
    Ok(())
}

pub fn write_matrix_f64(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_f64(m))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_by_three_in_write_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wstf");
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        write_matrix_f32(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"WSTF");
        assert_eq!(bytes.len(), HEADER_LEN + 24);
        assert_eq!(f32::from_le_bytes(bytes[14..18].try_into().unwrap()), 1.0);
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn truncated_after_five_floats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wstf");
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let bytes = encode_f32(&m);
        fs::write(&p, &bytes[..HEADER_LEN + 20]).unwrap();
        match read_matrix(&p) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, (HEADER_LEN + 20) as u64);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let path = Path::new("mem");
        let mut bytes = encode_f32(&array![[1.0]]);
        bytes[4] = 9;
        assert!(matches!(decode(&bytes, path, 0), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, path, 0), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_matrix(Path::new("/nonexistent/features.wstf")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/features.wstf"));
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let m = array![[0.1, -1e-300], [std::f64::consts::PI, 7.0]];
        let (back, used) = decode(&encode_f64(&m), Path::new("mem"), 0).unwrap();
        assert_eq!(used, HEADER_LEN + 32);
        assert_eq!(back, m);
    }
}
