//! Content-addressed on-disk cache of preprocessed image sets.
//!
//! Each entry is a directory named by its key holding numbered PNGs and a
//! `manifest.json` with the SHA-256 of every file. The manifest is written
//! last, so an interrupted build is simply rebuilt.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::image::ImageU8;
use crate::util::{sha256_hex, write_atomic};

const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    key: String,
    files: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Built,
    /// The entry failed verification and was rebuilt; the reason is kept for reports.
    Rebuilt(String),
}

impl CacheOutcome {
    pub fn warning(&self, key: &str) -> Option<String> {
        match self {
            CacheOutcome::Rebuilt(why) => Some(format!("cache entry {key} was corrupted ({why}) and has been rebuilt")),
            _ => None,
        }
    }
}

fn verify(dir: &Path, key: &str, expected: usize) -> std::result::Result<Vec<ImageU8>, String> {
    let text = std::fs::read_to_string(dir.join(MANIFEST)).map_err(|e| format!("manifest unreadable: {e}"))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| format!("manifest invalid: {e}"))?;
    if m.key != key {
        return Err(format!("manifest key {} does not match", m.key));
    }
    if m.files.len() != expected {
        return Err(format!("manifest lists {} files, expected {expected}", m.files.len()));
    }
    m.files
        .iter()
        .map(|(name, hash)| {
            let bytes = std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
            if &sha256_hex(&bytes) != hash {
                return Err(format!("{name}: content hash mismatch"));
            }
            let img = image::load_from_memory(&bytes).map_err(|e| format!("{name}: {e}"))?;
            ImageU8::from_dynamic(img).map_err(|e| format!("{name}: {e}"))
        })
        .collect()
}

/// Returns the `expected` images cached under `key`, building and storing
/// them with `build` when the entry is absent or fails verification.
pub fn materialize(
    cache_dir: &Path,
    key: &str,
    expected: usize,
    build: impl FnOnce() -> Result<Vec<ImageU8>>,
) -> Result<(Vec<ImageU8>, CacheOutcome)> {
    let dir = cache_dir.join(key);
    let outcome = if dir.join(MANIFEST).exists() {
        match verify(&dir, key, expected) {
            Ok(images) => return Ok((images, CacheOutcome::Hit)),
            Err(why) => {
                log::warn!("cache entry {key}: {why}; rebuilding");
                CacheOutcome::Rebuilt(why)
            }
        }
    } else {
        CacheOutcome::Built
    };
    let images = build()?;
    ensure!(images.len() == expected, "cache build produced {} images, expected {expected}", images.len());
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let name = format!("{i:06}.png");
        let bytes = img.encode_png()?;
        files.push((name.clone(), sha256_hex(&bytes)));
        std::fs::write(dir.join(&name), bytes)?;
    }
    write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&Manifest { key: key.to_string(), files })?)?;
    Ok((images, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imgs() -> Vec<ImageU8> {
        (0..3).map(|k| ImageU8::filled(8, 8, 3, 40 * k).unwrap()).collect()
    }

    #[test]
    fn build_hit_and_corruption_rebuild() {
        let dir = tempfile::tempdir().unwrap();
        let (a, o) = materialize(dir.path(), "k1", 3, || Ok(imgs())).unwrap();
        assert_eq!(o, CacheOutcome::Built);
        let (b, o) = materialize(dir.path(), "k1", 3, || panic!("should not rebuild")).unwrap();
        assert_eq!(o, CacheOutcome::Hit);
        assert_eq!(a, b);
        std::fs::write(dir.path().join("k1").join("000001.png"), b"garbage").unwrap();
        let (c, o) = materialize(dir.path(), "k1", 3, || Ok(imgs())).unwrap();
        assert!(matches!(o, CacheOutcome::Rebuilt(_)));
        assert!(o.warning("k1").unwrap().contains("000001.png"));
        assert_eq!(c, a);
        assert_eq!(materialize(dir.path(), "k1", 3, || Ok(imgs())).unwrap().1, CacheOutcome::Hit);
    }
}
