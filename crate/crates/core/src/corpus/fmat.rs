//! FMAT dense feature file format.
//!
//! Layout: magic `FMAT1` (5 bytes), little-endian `u32` rows, `u32` dims,
//! `f32` stride seconds, then `rows * dims` little-endian `f32` values in
//! row-major order.

use std::path::Path;

use super::{CorpusError, FeatureMatrix};

const MAGIC: &[u8; 5] = b"FMAT1";

/// Decode an FMAT byte buffer.
pub fn decode_features(
    bytes: &[u8],
    path: &Path,
    video_id: &str,
) -> Result<FeatureMatrix, CorpusError> {
    let fail = |reason: String| CorpusError::Fmat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 5 + 4 + 4 + 4 {
        return Err(fail("file too short for header".into()));
    }
    if &bytes[..5] != MAGIC {
        return Err(fail(format!("magic mismatch, expected {MAGIC:?}")));
    }
    let rows = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let dims = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let stride_s = f32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let payload = &bytes[17..];
    let expected = rows
        .checked_mul(dims)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(fail(format!(
            "payload size mismatch: have {} bytes, expected {}",
            payload.len(),
            expected
        )));
    }
    let mut data = Vec::with_capacity(rows * dims);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail("non-finite value in payload".into()));
        }
        data.push(v);
    }
    FeatureMatrix::new(video_id, stride_s, rows, dims, data)
}

/// Encode a feature matrix as FMAT bytes.
pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + m.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.dims as u32).to_le_bytes());
    out.extend_from_slice(&m.stride_s.to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Load a feature matrix from an FMAT file.
pub fn load_features(path: &Path, video_id: &str) -> Result<FeatureMatrix, CorpusError> {
    let bytes = std::fs::read(path).map_err(|e| CorpusError::Fmat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_features(&bytes, path, video_id)
}

/// Write a feature matrix to an FMAT file.
pub fn write_features(path: &Path, m: &FeatureMatrix) -> Result<(), CorpusError> {
    std::fs::write(path, encode_features(m)).map_err(|e| CorpusError::Fmat {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(rows: u32, dims: u32, stride: f32) -> Vec<u8> {
        let mut h = Vec::new();
        h.extend_from_slice(MAGIC);
        h.extend_from_slice(&rows.to_le_bytes());
        h.extend_from_slice(&dims.to_le_bytes());
        h.extend_from_slice(&stride.to_le_bytes());
        h
    }

    #[test]
    fn decodes_declared_shape() {
        let mut bytes = header(4, 2, 1.5);
        bytes.extend(std::iter::repeat(0u8).take(4 * 2 * 4));
        let m = decode_features(&bytes, Path::new("x.fmat"), "v").unwrap();
        assert_eq!((m.rows, m.dims), (4, 2));
        assert_eq!(m.stride_s, 1.5);
    }

    #[test]
    fn short_payload_is_reported() {
        let mut bytes = header(4, 2, 1.5);
        bytes.extend(std::iter::repeat(0u8).take(4 * 2 * 4 - 4));
        let err = decode_features(&bytes, Path::new("x.fmat"), "v").unwrap_err();
        match err {
            CorpusError::Fmat { reason, .. } => {
                assert!(reason.contains("payload size mismatch"), "{reason}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = header(1, 1, 1.0);
        bytes[0] = b'X';
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(decode_features(&bytes, Path::new("x.fmat"), "v").is_err());
    }

    #[test]
    fn nan_payload_is_rejected() {
        let mut bytes = header(1, 1, 1.0);
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_features(&bytes, Path::new("x.fmat"), "v").is_err());
    }
}
