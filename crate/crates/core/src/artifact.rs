//! Content-addressed artifact store.
//!
//! Every artifact is a file named by the lowercase SHA-256 hex digest of its
//! bytes. Writes go through a temporary file and an atomic rename, so a reader
//! never observes a partially written artifact and storing the same bytes twice
//! is a no-op.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("artifact {0} not found")]
    Missing(String),
    #[error("invalid artifact id `{0}`")]
    InvalidId(String),
    #[error("invalid artifact locator `{0}`")]
    InvalidLocator(String),
    #[error("artifact store I/O: {0}")]
    Io(#[from] io::Error),
}

/// Lowercase SHA-256 hex of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A 64-character lowercase hex SHA-256 digest naming stored bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ArtifactId(String);

impl ArtifactId {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ArtifactId(sha256_hex(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ArtifactId {
    type Error = ArtifactError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(ArtifactId(s))
        } else {
            Err(ArtifactError::InvalidId(s))
        }
    }
}

impl FromStr for ArtifactId {
    type Err = ArtifactError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArtifactId::try_from(s.to_string())
    }
}

impl From<ArtifactId> for String {
    fn from(id: ArtifactId) -> String {
        id.0
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Where an artifact lives: `store://<digest>` in the shared content store or
/// `file://<path>` on a filesystem visible to the backend.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ArtifactLocator {
    Store(ArtifactId),
    File(PathBuf),
}

impl ArtifactLocator {
    pub fn store_id(&self) -> Option<&ArtifactId> {
        match self {
            ArtifactLocator::Store(id) => Some(id),
            ArtifactLocator::File(_) => None,
        }
    }
}

impl FromStr for ArtifactLocator {
    type Err = ArtifactError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(id) = s.strip_prefix("store://") {
            return id
                .parse()
                .map(ArtifactLocator::Store)
                .map_err(|_| ArtifactError::InvalidLocator(s.to_string()));
        }
        if let Some(path) = s.strip_prefix("file://") {
            if !path.is_empty() {
                return Ok(ArtifactLocator::File(PathBuf::from(path)));
            }
        }
        Err(ArtifactError::InvalidLocator(s.to_string()))
    }
}

impl TryFrom<String> for ArtifactLocator {
    type Error = ArtifactError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ArtifactLocator> for String {
    fn from(l: ArtifactLocator) -> String {
        l.to_string()
    }
}

impl fmt::Display for ArtifactLocator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArtifactLocator::Store(id) => write!(f, "store://{id}"),
            ArtifactLocator::File(p) => write!(f, "file://{}", p.display()),
        }
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A directory of digest-named files.
#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ArtifactError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ArtifactStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, id: &ArtifactId) -> PathBuf {
        self.root.join(id.as_str())
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        self.path_of(id).is_file()
    }

    pub fn put_bytes(&self, bytes: &[u8]) -> Result<ArtifactId, ArtifactError> {
        let id = ArtifactId::of_bytes(bytes);
        let dest = self.path_of(&id);
        if dest.is_file() {
            return Ok(id);
        }
        let tmp = self.root.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &dest)?;
        Ok(id)
    }

    pub fn put_file(&self, src: &Path) -> Result<ArtifactId, ArtifactError> {
        let bytes = fs::read(src)?;
        self.put_bytes(&bytes)
    }

    pub fn read(&self, id: &ArtifactId) -> Result<Vec<u8>, ArtifactError> {
        fs::read(self.path_of(id)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ArtifactError::Missing(id.to_string()),
            _ => ArtifactError::Io(e),
        })
    }

    pub fn size_of(&self, id: &ArtifactId) -> Result<u64, ArtifactError> {
        fs::metadata(self.path_of(id))
            .map(|m| m.len())
            .map_err(|_| ArtifactError::Missing(id.to_string()))
    }

    /// Reads the bytes behind any locator.
    pub fn read_locator(&self, loc: &ArtifactLocator) -> Result<Vec<u8>, ArtifactError> {
        match loc {
            ArtifactLocator::Store(id) => self.read(id),
            ArtifactLocator::File(p) => fs::read(p).map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => ArtifactError::Missing(loc.to_string()),
                _ => ArtifactError::Io(e),
            }),
        }
    }

    pub fn exists(&self, loc: &ArtifactLocator) -> bool {
        match loc {
            ArtifactLocator::Store(id) => self.contains(id),
            ArtifactLocator::File(p) => p.is_file(),
        }
    }

    /// Copies the artifact behind `loc` to `dest`, creating parent directories.
    pub fn copy_to(&self, loc: &ArtifactLocator, dest: &Path) -> Result<u64, ArtifactError> {
        let src = match loc {
            ArtifactLocator::Store(id) => self.path_of(id),
            ArtifactLocator::File(p) => p.clone(),
        };
        if !src.is_file() {
            return Err(ArtifactError::Missing(loc.to_string()));
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(fs::copy(src, dest)?)
    }

    /// Ids of stored files whose content no longer matches their name.
    pub fn verify_all(&self) -> Result<Vec<String>, ArtifactError> {
        let mut bad = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with(".tmp-") {
                continue;
            }
            let bytes = fs::read(entry.path())?;
            if sha256_hex(&bytes) != name {
                bad.push(name);
            }
        }
        bad.sort();
        Ok(bad)
    }
}
