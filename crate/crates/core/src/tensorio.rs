//! Minimal binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 4            | magic `GRDT`                     |
//! | 2            | version, u16 = 1                 |
//! | 1            | dtype: 0 = u8, 1 = f32           |
//! | 1            | ndim                             |
//! | 4 * ndim     | dims, u32 each                   |
//! | rest         | row-major payload, last dim fastest |
//!
//! The payload is exactly `product(dims) * size_of(dtype)` bytes; trailing
//! bytes are an error.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::gridify::{Grid, GridData, GridError};

pub const MAGIC: &[u8; 4] = b"GRDT";
pub const VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated {what}: need {expected} bytes, have {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("dimension {0} does not fit in u32")]
    DimTooLarge(usize),
    #[error("more than 255 dimensions")]
    TooManyDims,
    #[error(transparent)]
    Invalid(#[from] GridError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn dtype_code(data: &GridData) -> u8 {
    match data {
        GridData::U8(_) => 0,
        GridData::F32(_) => 1,
    }
}

pub fn encode(grid: &Grid) -> Result<Vec<u8>, TensorError> {
    let dims = grid.dims();
    if dims.len() > u8::MAX as usize {
        return Err(TensorError::TooManyDims);
    }
    let payload_len = match grid.data() {
        GridData::U8(v) => v.len(),
        GridData::F32(v) => v.len() * 4,
    };
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * dims.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype_code(grid.data()));
    out.push(dims.len() as u8);
    for &d in dims {
        let d32 = u32::try_from(d).map_err(|_| TensorError::DimTooLarge(d))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    match grid.data() {
        GridData::U8(v) => out.extend_from_slice(v),
        GridData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Grid, TensorError> {
    let need = |what, expected: usize| {
        if bytes.len() < expected {
            Err(TensorError::Truncated {
                what,
                expected,
                actual: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need("header", HEADER_FIXED)?;
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    let dtype = bytes[6];
    let elem = match dtype {
        0 => 1,
        1 => 4,
        d => return Err(TensorError::UnsupportedDtype(d)),
    };
    let ndim = bytes[7] as usize;
    let header_len = HEADER_FIXED + 4 * ndim;
    need("dims", header_len)?;
    let dims: Vec<usize> = bytes[HEADER_FIXED..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(elem))
        .ok_or(TensorError::Truncated {
            what: "payload",
            expected: usize::MAX,
            actual: bytes.len(),
        })?;
    let total = header_len + count;
    need("payload", total)?;
    if bytes.len() > total {
        return Err(TensorError::TrailingBytes(bytes.len() - total));
    }
    let payload = &bytes[header_len..];
    let data = match dtype {
        0 => GridData::U8(payload.to_vec()),
        _ => GridData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Grid::from_parts(dims, data)?)
}

/// Writes `grid` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_tensor(path: &Path, grid: &Grid) -> Result<(), TensorError> {
    let bytes = encode(grid)?;
    write_atomic(path, &bytes).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor(path: &Path) -> Result<Grid, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

/// Replaces `path` with `bytes` via a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    // temp files are created 0600; give the result ordinary permissions
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_arithmetic() {
        let g = Grid::from_parts(vec![2, 3], GridData::U8(vec![0, 1, 2, 3, 4, 5])).unwrap();
        let bytes = encode(&g).unwrap();
        assert_eq!(bytes.len(), 22);
        assert_eq!(
            &bytes[..16],
            &[b'G', b'R', b'D', b'T', 1, 0, 0, 2, 2, 0, 0, 0, 3, 0, 0, 0]
        );
        assert_eq!(decode(&bytes).unwrap(), g);
    }

    #[test]
    fn distinct_parse_errors() {
        let g = Grid::from_parts(vec![2, 2], GridData::F32(vec![1.0, -2.0, 0.5, 3.25])).unwrap();
        let good = encode(&g).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(TensorError::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode(&bad),
            Err(TensorError::UnsupportedVersion(2))
        ));

        let mut bad = good.clone();
        bad[6] = 7;
        assert!(matches!(
            decode(&bad),
            Err(TensorError::UnsupportedDtype(7))
        ));

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(TensorError::Truncated {
                what: "payload",
                ..
            })
        ));
        assert!(matches!(
            decode(&good[..10]),
            Err(TensorError::Truncated { what: "dims", .. })
        ));
        assert!(matches!(
            decode(&good[..3]),
            Err(TensorError::Truncated { what: "header", .. })
        ));

        let mut bad = good;
        bad.push(0);
        assert!(matches!(decode(&bad), Err(TensorError::TrailingBytes(1))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.t");
        let g =
            Grid::from_parts(vec![3], GridData::F32(vec![f32::MIN_POSITIVE, -0.0, 1e30])).unwrap();
        write_tensor(&p, &g).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(encode(&back).unwrap(), encode(&g).unwrap());
        // no temp files left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
