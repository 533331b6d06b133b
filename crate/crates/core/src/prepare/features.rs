//! Feature file encoding (all integers little-endian).
//!
//! ```text
//! header  : magic "CSIF" | version u16 | size u16 | feature_count u64
//! feature : label i32 (-1 = unlabeled) | receiver_id u8 | window_index u32
//!           | size x size f32, row-major
//! ```

use std::path::Path;

use super::{CorrelationFeature, PrepareError};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"CSIF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const FEATURE_HEADER_LEN: usize = 9;

fn format_error(offset: usize, reason: impl Into<String>) -> PrepareError {
    PrepareError::FeatureFile {
        offset,
        reason: reason.into(),
    }
}

/// Encodes features of one common size. An empty list is written with size 0.
pub fn encode_features(features: &[CorrelationFeature]) -> Result<Vec<u8>, PrepareError> {
    let size = features.first().map_or(0, CorrelationFeature::size);
    if size > u16::MAX as usize {
        return Err(PrepareError::Shape(format!(
            "feature size {size} exceeds u16"
        )));
    }
    let mut out =
        Vec::with_capacity(HEADER_LEN + features.len() * (FEATURE_HEADER_LEN + 4 * size * size));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(size as u16).to_le_bytes());
    out.extend_from_slice(&(features.len() as u64).to_le_bytes());
    for (i, f) in features.iter().enumerate() {
        if f.matrix.shape() != (size, size) {
            return Err(PrepareError::Shape(format!(
                "feature {i} is {}x{}, file holds {size}x{size}",
                f.matrix.rows(),
                f.matrix.cols()
            )));
        }
        let label: i32 = match f.label {
            None => -1,
            Some(l) => i32::try_from(l)
                .map_err(|_| PrepareError::Parameter(format!("label {l} does not fit in i32")))?,
        };
        out.extend_from_slice(&label.to_le_bytes());
        out.push(f.receiver_id);
        out.extend_from_slice(&f.window_index.to_le_bytes());
        for v in f.matrix.as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<CorrelationFeature>, PrepareError> {
    if bytes.len() < HEADER_LEN {
        return Err(format_error(bytes.len(), "truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_error(0, "bad magic, expected \"CSIF\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_error(4, format!("unsupported version {version}")));
    }
    let size = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut count_bytes = [0u8; 8];
    count_bytes.copy_from_slice(&bytes[8..16]);
    let count = u64::from_le_bytes(count_bytes);

    let per_feature = FEATURE_HEADER_LEN + 4 * size * size;
    let body = bytes.len() - HEADER_LEN;
    if (body as u64) != count.saturating_mul(per_feature as u64) {
        return Err(format_error(
            HEADER_LEN,
            format!(
                "{count} features of size {size} need {per_feature} bytes each, body has {body}"
            ),
        ));
    }
    let mut features = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let at = HEADER_LEN + i * per_feature;
        let b = &bytes[at..at + per_feature];
        let label = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(format_error(at, format!("invalid label {l}"))),
        };
        let receiver_id = b[4];
        let window_index = u32::from_le_bytes([b[5], b[6], b[7], b[8]]);
        let mut data = Vec::with_capacity(size * size);
        for k in 0..size * size {
            let o = FEATURE_HEADER_LEN + 4 * k;
            let v = f32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]);
            if !v.is_finite() {
                return Err(format_error(at + o, "non-finite feature value"));
            }
            data.push(f64::from(v));
        }
        features.push(CorrelationFeature {
            matrix: Matrix::from_vec(size, size, data),
            label,
            receiver_id,
            window_index,
        });
    }
    Ok(features)
}

pub fn write_features(path: &Path, features: &[CorrelationFeature]) -> crate::Result<()> {
    let bytes = encode_features(features)?;
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn read_features(path: &Path) -> crate::Result<Vec<CorrelationFeature>> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode_features(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(label: Option<usize>, window_index: u32) -> CorrelationFeature {
        CorrelationFeature {
            matrix: Matrix::from_fn(3, 3, |r, c| {
                if r == c {
                    1.0
                } else {
                    0.25 * (r + c) as f64 - 0.5
                }
            }),
            label,
            receiver_id: 2,
            window_index,
        }
    }

    #[test]
    fn round_trip() {
        let fs = vec![feature(Some(3), 0), feature(None, 7)];
        let bytes = encode_features(&fs).unwrap();
        assert_eq!(bytes.len(), 16 + 2 * (9 + 36));
        assert_eq!(decode_features(&bytes).unwrap(), fs);
    }

    #[test]
    fn empty_file() {
        let bytes = encode_features(&[]).unwrap();
        assert!(decode_features(&bytes).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode_features(&[feature(Some(1), 0)]).unwrap();
        bytes.pop();
        assert!(decode_features(&bytes).is_err());
        assert!(decode_features(b"CSIF").is_err());
        let mut bytes = encode_features(&[feature(Some(1), 0)]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            decode_features(&bytes),
            Err(PrepareError::FeatureFile { offset: 0, .. })
        ));
    }

    #[test]
    fn mixed_sizes_rejected() {
        let mut other = feature(None, 1);
        other.matrix = Matrix::identity(4);
        assert!(encode_features(&[feature(None, 0), other]).is_err());
    }
}
