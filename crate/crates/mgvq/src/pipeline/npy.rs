//! Minimal NPY (version 1.0) reader and writer.
//!
//! Supported on read: little-endian float32/float64, C order, any rank.
//! Float32 payloads are widened to f64. Everything is written back as
//! little-endian float64 in C order, so write-then-read is bitwise exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::PipelineError;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// An n-dimensional array as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_npy(path: &Path) -> Result<NpyArray, PipelineError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(PipelineError::BadMagic);
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    if version != [1, 0] {
        return Err(PipelineError::BadHeader(format!(
            "unsupported npy version {}.{}",
            version[0], version[1]
        )));
    }
    let mut len_bytes = [0u8; 2];
    r.read_exact(&mut len_bytes)?;
    let header_len = u16::from_le_bytes(len_bytes) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header)
        .map_err(|_| PipelineError::BadHeader("header is not valid UTF-8".into()))?;

    let descr = header_str_value(&header, "descr")?;
    let itemsize = match descr.as_str() {
        "<f8" => 8,
        "<f4" => 4,
        other => return Err(PipelineError::UnsupportedDtype(other.to_string())),
    };
    if header_bool_value(&header, "fortran_order")? {
        return Err(PipelineError::NonCOrder);
    }
    let shape = header_shape_value(&header)?;
    let count: usize = shape.iter().product();

    let mut payload = vec![0u8; count * itemsize];
    r.read_exact(&mut payload)?;
    let data = if itemsize == 8 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect()
    };
    Ok(NpyArray { shape, data })
}

pub fn write_npy(path: &Path, shape: &[usize], data: &[f64]) -> Result<(), PipelineError> {
    let count: usize = shape.iter().product();
    assert_eq!(count, data.len(), "shape does not match data length");

    let shape_str = match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': {shape_str}, }}");
    // Pad with spaces so the full preamble is a multiple of 64 bytes.
    let unpadded = MAGIC.len() + 2 + 2 + dict.len() + 1;
    let padding = (64 - unpadded % 64) % 64;
    dict.extend(std::iter::repeat(' ').take(padding));
    dict.push('\n');

    let file = File::create(path).map_err(PipelineError::WriteFailed)?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(PipelineError::WriteFailed);
    emit(MAGIC)?;
    emit(&[1u8, 0u8])?;
    emit(&(dict.len() as u16).to_le_bytes())?;
    emit(dict.as_bytes())?;
    for v in data {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(PipelineError::WriteFailed)
}

fn header_tail<'a>(header: &'a str, key: &str) -> Result<&'a str, PipelineError> {
    let pat = format!("'{key}':");
    let at = header
        .find(&pat)
        .ok_or_else(|| PipelineError::BadHeader(format!("missing key {key}")))?;
    Ok(header[at + pat.len()..].trim_start())
}

fn header_str_value(header: &str, key: &str) -> Result<String, PipelineError> {
    let tail = header_tail(header, key)?;
    let rest = tail
        .strip_prefix('\'')
        .ok_or_else(|| PipelineError::BadHeader(format!("{key} is not a string")))?;
    let end = rest
        .find('\'')
        .ok_or_else(|| PipelineError::BadHeader(format!("{key} is unterminated")))?;
    Ok(rest[..end].to_string())
}

fn header_bool_value(header: &str, key: &str) -> Result<bool, PipelineError> {
    let tail = header_tail(header, key)?;
    if tail.starts_with("True") {
        Ok(true)
    } else if tail.starts_with("False") {
        Ok(false)
    } else {
        Err(PipelineError::BadHeader(format!("{key} is not a bool")))
    }
}

fn header_shape_value(header: &str) -> Result<Vec<usize>, PipelineError> {
    let tail = header_tail(header, "shape")?;
    let rest = tail
        .strip_prefix('(')
        .ok_or_else(|| PipelineError::BadHeader("shape is not a tuple".into()))?;
    let end = rest
        .find(')')
        .ok_or_else(|| PipelineError::BadHeader("shape is unterminated".into()))?;
    let mut shape = Vec::new();
    for part in rest[..end].split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let dim: usize = part
            .parse()
            .map_err(|_| PipelineError::BadHeader(format!("bad shape entry {part:?}")))?;
        shape.push(dim);
    }
    Ok(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        let data = vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0];
        write_npy(&path, &[2, 3], &data).unwrap();
        let back = read_npy(&path).unwrap();
        assert_eq!(back.shape, vec![2, 3]);
        for (a, b) in data.iter().zip(&back.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_64_byte_aligned() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.npy");
        write_npy(&path, &[4], &[0.0; 4]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(bytes[10 + header_len - 1], b'\n');
    }

    #[test]
    fn reads_float32_widened() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f32.npy");
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (2,), }";
        let mut padded = dict.to_string();
        let unpadded = 10 + padded.len() + 1;
        padded.extend(std::iter::repeat(' ').take((64 - unpadded % 64) % 64));
        padded.push('\n');
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        bytes.extend_from_slice(padded.as_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        std::fs::write(&path, bytes).unwrap();

        let arr = read_npy(&path).unwrap();
        assert_eq!(arr.shape, vec![2]);
        assert_eq!(arr.data, vec![1.5, -2.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        std::fs::write(&path, b"NOTNPY__________").unwrap();
        assert!(matches!(read_npy(&path), Err(PipelineError::BadMagic)));
    }

    #[test]
    fn rejects_fortran_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.npy");
        let dict = "{'descr': '<f8', 'fortran_order': True, 'shape': (1,), }";
        let mut padded = dict.to_string();
        padded.push('\n');
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        bytes.extend_from_slice(padded.as_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_npy(&path), Err(PipelineError::NonCOrder)));
    }

    #[test]
    fn rejects_unsupported_dtype() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("i8.npy");
        let dict = "{'descr': '<i8', 'fortran_order': False, 'shape': (1,), }";
        let mut padded = dict.to_string();
        padded.push('\n');
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        bytes.extend_from_slice(padded.as_bytes());
        bytes.extend_from_slice(&1i64.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_npy(&path),
            Err(PipelineError::UnsupportedDtype(_))
        ));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.npy");
        write_npy(&path, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_npy(&path), Err(PipelineError::Io(_))));
    }
}
