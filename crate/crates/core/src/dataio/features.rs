use std::path::Path;

use ndarray::Array2;

use super::FeatureMatrix;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ASSF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Serializes a row-major f32 matrix in the ASSF layout.
pub fn write_assf_raw(values: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = values.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an ASSF byte buffer without any row validation.
pub fn read_assf_raw(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("ASSF header", "file shorter than 16 bytes"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("ASSF header", "bad magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(
            "ASSF header",
            format!("unsupported version {version}"),
        ));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let body = &bytes[HEADER_LEN..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("ASSF header", "size overflow"))?;
    if body.len() != expected {
        return Err(Error::format(
            "ASSF body",
            format!(
                "header declares {rows}x{cols} ({expected} bytes), body has {} bytes",
                body.len()
            ),
        ));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

pub fn encode_assf(features: &FeatureMatrix) -> Vec<u8> {
    write_assf_raw(features.values())
}

/// Decodes either an ASSF buffer or, failing the magic check, a CSV of floats.
pub fn decode_assf(bytes: &[u8], expected_dim: Option<usize>) -> Result<FeatureMatrix> {
    let values = if bytes.starts_with(MAGIC) {
        read_assf_raw(bytes)?
    } else {
        parse_csv(bytes)?
    };
    if let Some(d) = expected_dim {
        if values.ncols() != d {
            return Err(Error::Dimension(format!(
                "expected feature dimension {d}, file has {}",
                values.ncols()
            )));
        }
    }
    FeatureMatrix::new(values)
}

fn parse_csv(bytes: &[u8]) -> Result<Array2<f32>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::format("feature file", "neither ASSF nor UTF-8 CSV"))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut n = 0;
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::format(
                    "feature CSV",
                    format!("line {}: cannot parse {:?}", lineno + 1, field.trim()),
                )
            })?;
            data.push(v);
            n += 1;
        }
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::format(
                    "feature CSV",
                    format!("line {} has {n} fields, expected {c}", lineno + 1),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::format("feature CSV", "no rows"))?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rectangular"))
}

pub fn load_features(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_assf(&bytes, expected_dim)
}

pub fn write_features(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_assf(features)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn assf(rows: u32, cols: u32, body: &[f32]) -> Vec<u8> {
        let mut b = b"ASSF".to_vec();
        for w in [1u32, rows, cols] {
            b.extend_from_slice(&w.to_le_bytes());
        }
        for v in body {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn reads_small_file() {
        let f = decode_assf(&assf(3, 2, &[1., 0., 0., 1., 1., 1.]), None).unwrap();
        assert_eq!(f.values(), &array![[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn zero_row_reported() {
        let err = decode_assf(&assf(2, 2, &[1., 0., 0., 0.]), None).unwrap_err();
        assert_eq!(err.to_string(), "zero-norm row 1");
    }

    #[test]
    fn header_errors() {
        let mut bad = assf(1, 2, &[1., 2.]);
        bad[4] = 9;
        assert!(matches!(decode_assf(&bad, None), Err(Error::Format { .. })));
        let short = assf(2, 2, &[1., 2.]);
        assert!(matches!(decode_assf(&short, None), Err(Error::Format { .. })));
        let ok = assf(1, 2, &[1., 2.]);
        assert!(matches!(decode_assf(&ok, Some(3)), Err(Error::Dimension(_))));
        let inf = assf(1, 2, &[1., f32::INFINITY]);
        assert!(matches!(decode_assf(&inf, None), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn csv_fallback() {
        let f = decode_assf(b"1, 2\n3,4\n\n", Some(2)).unwrap();
        assert_eq!(f.values(), &array![[1.0f32, 2.0], [3.0, 4.0]]);
        assert!(decode_assf(b"1,2\n3\n", None).is_err());
    }

    proptest! {
        #[test]
        fn byte_identical_round_trip(
            rows in 1usize..12,
            cols in 1usize..9,
            seed in proptest::collection::vec(-1e6f32..1e6f32, 108),
        ) {
            let mut body: Vec<f32> = seed.into_iter().cycle().take(rows * cols).collect();
            for r in 0..rows {
                body[r * cols] = body[r * cols].abs() + 1.0;
            }
            let bytes = assf(rows as u32, cols as u32, &body);
            let f = decode_assf(&bytes, Some(cols)).unwrap();
            prop_assert_eq!(encode_assf(&f), bytes);
        }
    }
}
