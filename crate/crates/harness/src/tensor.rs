//! `QKVT` tensor files: one attention instance per file.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `QKVT`                   |
//! | 4      | 2    | version, `1`                   |
//! | 6      | 1    | dtype, `0` = f64, `1` = f32    |
//! | 7      | 1    | reserved, `0`                  |
//! | 8      | 24   | `(rows: u32, cols: u32)` for Q, K, V |
//! | 32     | ..   | Q, K, V payloads, row-major    |

use std::fs;
use std::path::Path;

use ear_core::{Instance, Matrix, TokenMatrix};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"QKVT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic bytes {0:02x?}, expected \"QKVT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected 1")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("reserved byte is {0}, expected 0")]
    Reserved(u8),
    #[error("file is {actual} bytes, too short for the {expected}-byte header")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("declared shapes need {expected} bytes after the header, found {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("{0} trailing bytes after the V payload")]
    TrailingBytes(usize),
    #[error("inconsistent shapes: Q {q:?}, K {k:?}, V {v:?}")]
    Shapes {
        q: (usize, usize),
        k: (usize, usize),
        v: (usize, usize),
    },
    #[error("non-finite value in {tensor} at ({row}, {col})")]
    NonFinite {
        tensor: &'static str,
        row: usize,
        col: usize,
    },
    #[error("{tensor} is {rows}x{cols}, which does not fit the u32 header")]
    TooLarge {
        tensor: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Q, K and V plus the scalar type they are stored in.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dtype: Dtype,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl TensorFile {
    pub fn from_instance(instance: &Instance, dtype: Dtype) -> Self {
        let round = |m: &Matrix| match dtype {
            Dtype::F64 => m.clone(),
            Dtype::F32 => Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) as f32 as f64),
        };
        Self {
            dtype,
            q: round(instance.q.as_matrix()),
            k: round(instance.k.as_matrix()),
            v: round(instance.v.as_matrix()),
        }
    }

    /// Validated attention instance.
    pub fn to_instance(&self) -> Result<Instance, TensorError> {
        let shapes = TensorError::Shapes {
            q: self.q.shape(),
            k: self.k.shape(),
            v: self.v.shape(),
        };
        let token = |name: &'static str, m: &Matrix| {
            TokenMatrix::try_from(m.clone()).map_err(|e| match e {
                ear_core::Error::NonFinite { row, col } => TensorError::NonFinite {
                    tensor: name,
                    row,
                    col,
                },
                _ => unreachable!("only finiteness is checked"),
            })
        };
        let (q, k, v) = (token("Q", &self.q)?, token("K", &self.k)?, token("V", &self.v)?);
        Instance::new(q, k, v).map_err(|_| shapes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let w = self.dtype.width();
        let n = self.q.as_slice().len() + self.k.as_slice().len() + self.v.as_slice().len();
        let mut out = Vec::with_capacity(HEADER_LEN + n * w);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.push(0);
        for (name, m) in [("Q", &self.q), ("K", &self.k), ("V", &self.v)] {
            let too_large = || TensorError::TooLarge {
                tensor: name,
                rows: m.rows(),
                cols: m.cols(),
            };
            let rows = u32::try_from(m.rows()).map_err(|_| too_large())?;
            let cols = u32::try_from(m.cols()).map_err(|_| too_large())?;
            out.extend_from_slice(&rows.to_le_bytes());
            out.extend_from_slice(&cols.to_le_bytes());
        }
        for m in [&self.q, &self.k, &self.v] {
            for &x in m.as_slice() {
                match self.dtype {
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < HEADER_LEN {
            // report the magic first when even that is wrong
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(TensorError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(TensorError::TruncatedHeader {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let dtype = Dtype::from_code(bytes[6]).ok_or(TensorError::UnknownDtype(bytes[6]))?;
        if bytes[7] != 0 {
            return Err(TensorError::Reserved(bytes[7]));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let shapes: Vec<(usize, usize)> =
            (0..3).map(|t| (u32_at(8 + 8 * t), u32_at(12 + 8 * t))).collect();

        let payload = &bytes[HEADER_LEN..];
        let w = dtype.width();
        let expected = shapes
            .iter()
            .try_fold(0usize, |acc, &(r, c)| {
                r.checked_mul(c)
                    .and_then(|n| n.checked_mul(w))
                    .and_then(|n| acc.checked_add(n))
            })
            .unwrap_or(usize::MAX);
        if payload.len() < expected {
            return Err(TensorError::SizeMismatch {
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(TensorError::TrailingBytes(payload.len() - expected));
        }

        let mut offset = 0;
        let mut read = |(rows, cols): (usize, usize)| {
            let n = rows * cols;
            let chunk = &payload[offset..offset + n * w];
            offset += n * w;
            let data: Vec<f64> = match dtype {
                Dtype::F64 => chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
            };
            Matrix::new(rows, cols, data).expect("length checked above")
        };
        let q = read(shapes[0]);
        let k = read(shapes[1]);
        let v = read(shapes[2]);
        Ok(Self { dtype, q, k, v })
    }

    pub fn read(path: &Path) -> Result<Self, TensorError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), TensorError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dtype: Dtype) -> TensorFile {
        TensorFile {
            dtype,
            q: Matrix::new(2, 3, vec![1.0, -2.5, 0.125, 3.0, 4.0, 5.0]).unwrap(),
            k: Matrix::new(1, 3, vec![0.5, 0.25, -0.75]).unwrap(),
            v: Matrix::new(1, 3, vec![9.0, 8.0, 7.0]).unwrap(),
        }
    }

    #[test]
    fn round_trips_both_dtypes() {
        for dtype in [Dtype::F64, Dtype::F32] {
            let f = sample(dtype);
            let bytes = f.to_bytes().unwrap();
            assert_eq!(bytes.len(), HEADER_LEN + 12 * dtype.width());
            let back = TensorFile::from_bytes(&bytes).unwrap();
            assert_eq!(back, f);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample(Dtype::F32).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"QKVT");
        assert_eq!(&bytes[4..8], &[1, 0, 1, 0]);
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[32..36], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejection_matrix() {
        let good = sample(Dtype::F64).to_bytes().unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            TensorFile::from_bytes(&bad_magic),
            Err(TensorError::BadMagic(_))
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            TensorFile::from_bytes(&bad_version),
            Err(TensorError::UnsupportedVersion(2))
        ));
        let mut bad_dtype = good.clone();
        bad_dtype[6] = 7;
        assert!(matches!(
            TensorFile::from_bytes(&bad_dtype),
            Err(TensorError::UnknownDtype(7))
        ));
        assert!(matches!(
            TensorFile::from_bytes(&good[..good.len() - 1]),
            Err(TensorError::SizeMismatch { .. })
        ));
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(
            TensorFile::from_bytes(&trailing),
            Err(TensorError::TrailingBytes(1))
        ));
        assert!(matches!(
            TensorFile::from_bytes(&good[..10]),
            Err(TensorError::TruncatedHeader { .. })
        ));
        let messages: std::collections::HashSet<String> = [
            &bad_magic[..],
            &bad_version[..],
            &good[..good.len() - 1],
            &trailing[..],
        ]
        .iter()
        .map(|b| TensorFile::from_bytes(b).unwrap_err().to_string())
        .collect();
        assert_eq!(messages.len(), 4);
    }

    #[test]
    fn huge_declared_sizes_do_not_overflow() {
        let mut bytes = sample(Dtype::F64).to_bytes().unwrap();
        bytes[8..16].copy_from_slice(&[0xff; 8]);
        assert!(matches!(
            TensorFile::from_bytes(&bytes),
            Err(TensorError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn instance_checks() {
        let mut f = sample(Dtype::F64);
        assert_eq!(f.to_instance().unwrap().n_q(), 2);
        f.v = Matrix::zeros(2, 3);
        assert!(matches!(f.to_instance(), Err(TensorError::Shapes { .. })));
        f.v = Matrix::zeros(1, 3);
        f.q = Matrix::new(1, 3, vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(f.to_instance(), Err(TensorError::NonFinite { tensor: "Q", .. })));
    }
}
