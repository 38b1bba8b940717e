//! Run manifests: a JSON record of the config hash, root seed, and SHA-256
//! checksums of every artifact a command produced, so any run can be
//! compared or regenerated bit-for-bit.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad manifest: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> ManifestError {
    ManifestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    /// artifact path (relative to the output dir) -> SHA-256 of contents;
    /// BTreeMap keeps serialization order deterministic
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| io_err(path, e))?))
}

impl Manifest {
    /// Checksums every artifact; paths are recorded relative to
    /// `output_dir` with `/` separators.
    pub fn collect(
        command: &str,
        config_sha256: String,
        seed: u64,
        output_dir: &Path,
        artifacts: &[PathBuf],
    ) -> Result<Self, ManifestError> {
        let mut map = BTreeMap::new();
        for path in artifacts {
            let rel = path
                .strip_prefix(output_dir)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            map.insert(rel, sha256_file(path)?);
        }
        Ok(Manifest {
            command: command.to_string(),
            config_sha256,
            seed,
            artifacts: map,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn collect_save_load_round_trip() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("sub");
        fs::create_dir(&b).unwrap();
        let b = b.join("b.bin");
        fs::write(&a, "hello").unwrap();
        fs::write(&b, [1u8, 2, 3]).unwrap();
        let m = Manifest::collect(
            "segment",
            sha256_hex(b"config"),
            7,
            dir.path(),
            &[a.clone(), b.clone()],
        )
        .unwrap();
        assert_eq!(m.artifacts.len(), 2);
        assert!(m.artifacts.contains_key("a.txt"));
        assert!(m.artifacts.contains_key("sub/b.bin"));
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }

    #[test]
    fn serialization_is_deterministic() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("z.txt");
        fs::write(&a, "x").unwrap();
        let m = Manifest::collect("x", String::new(), 0, dir.path(), &[a]).unwrap();
        let p1 = dir.path().join("m1.json");
        let p2 = dir.path().join("m2.json");
        m.save(&p1).unwrap();
        m.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
