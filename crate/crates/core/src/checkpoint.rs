//! Content-addressed checkpoint blobs.
//!
//! Blobs live under `<root>/<first two hex digits>/<sha256 hex>` and are
//! written through a temporary file plus rename, so a reader never sees a
//! partial blob. Reads re-hash the content before returning it.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bracket::ConfigId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub config_id: ConfigId,
    pub rung: usize,
    /// Hex SHA-256 of the blob; also its identity in the store.
    pub digest: String,
    pub size: u64,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {0} not found")]
    NotFound(String),
    #[error("checkpoint {digest} is corrupt (content hashes to {actual})")]
    DigestMismatch { digest: String, actual: String },
    #[error("malformed digest {0:?}")]
    BadDigest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn digest_of(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_digest(digest: &str) -> Result<(), CheckpointError> {
    if digest.len() == 64 && digest.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        Ok(())
    } else {
        Err(CheckpointError::BadDigest(digest.into()))
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn open(root: &Path) -> Result<Self, CheckpointError> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.into() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, digest: &str) -> PathBuf {
        self.root.join(&digest[..2]).join(digest)
    }

    pub fn put(&self, config_id: ConfigId, rung: usize, bytes: &[u8]) -> Result<CheckpointRef, CheckpointError> {
        let digest = digest_of(bytes);
        let path = self.blob_path(&digest);
        if !path.exists() {
            let dir = path.parent().expect("blob paths have a parent");
            fs::create_dir_all(dir)?;
            let tmp = dir.join(format!(".{digest}.{}.tmp", std::process::id()));
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)?;
        }
        Ok(CheckpointRef { config_id, rung, digest, size: bytes.len() as u64 })
    }

    pub fn contains(&self, digest: &str) -> bool {
        check_digest(digest).is_ok() && self.blob_path(digest).exists()
    }

    /// Reads a blob and verifies it still hashes to `digest`.
    pub fn get(&self, digest: &str) -> Result<Vec<u8>, CheckpointError> {
        check_digest(digest)?;
        let bytes = match fs::read(self.blob_path(digest)) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(CheckpointError::NotFound(digest.into())),
            Err(e) => return Err(e.into()),
        };
        let actual = digest_of(&bytes);
        if actual != digest {
            return Err(CheckpointError::DigestMismatch { digest: digest.into(), actual });
        }
        Ok(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        let r = store.put(3, 1, b"weights").unwrap();
        assert_eq!(r.size, 7);
        assert_eq!(store.get(&r.digest).unwrap(), b"weights");
        assert_eq!(store.put(4, 0, b"weights").unwrap().digest, r.digest);
        fs::write(store.blob_path(&r.digest), b"weightz").unwrap();
        assert!(matches!(store.get(&r.digest), Err(CheckpointError::DigestMismatch { .. })));
        assert!(matches!(store.get("../etc"), Err(CheckpointError::BadDigest(_))));
        assert!(matches!(store.get(&"0".repeat(64)), Err(CheckpointError::NotFound(_))));
    }
}
