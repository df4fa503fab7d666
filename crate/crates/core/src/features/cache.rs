use std::path::Path;

use super::{FeatureError, FeatureMap};

pub const FEATURE_MAGIC: &[u8; 8] = b"SERFEAT1";

/// Write `SERFEAT1`, u32 F, u32 T, then F×T little-endian f32 (row-major).
pub fn write_feature_cache(path: &Path, fm: &FeatureMap) -> Result<(), FeatureError> {
    let mut buf = Vec::with_capacity(16 + 4 * fm.values().len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(fm.n_mels() as u32).to_le_bytes());
    buf.extend_from_slice(&(fm.n_frames() as u32).to_le_bytes());
    for &v in fm.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureMap, FeatureError> {
    let bytes = std::fs::read(path).map_err(|source| FeatureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |reason: &str| FeatureError::BadCache {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing SERFEAT1 header"));
    }
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if f.checked_mul(t).and_then(|n| n.checked_mul(4)) != Some(body.len()) {
        return Err(bad(&format!("{} payload bytes for a {f}x{t} map", body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureMap::new(f, t, values).map_err(|e| bad(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.serfeat");
        let fm = FeatureMap::new(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, -7.5]).unwrap();
        write_feature_cache(&p, &fm).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"SERFEAT1");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(read_feature_cache(&p).unwrap(), fm);
    }

    #[test]
    fn truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.serfeat");
        let fm = FeatureMap::new(2, 2, vec![1.0; 4]).unwrap();
        write_feature_cache(&p, &fm).unwrap();
        let b = std::fs::read(&p).unwrap();
        std::fs::write(&p, &b[..b.len() - 2]).unwrap();
        assert!(matches!(read_feature_cache(&p), Err(FeatureError::BadCache { .. })));
        std::fs::write(&p, b"SERFEAT0xxxxxxxx").unwrap();
        assert!(matches!(read_feature_cache(&p), Err(FeatureError::BadCache { .. })));
    }
}
