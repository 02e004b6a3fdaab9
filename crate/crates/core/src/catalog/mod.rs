//! Image metadata catalog, study-set selection and homogeneity checks.
//!
//! The catalog is a JSON-lines file with one [`ImageRecord`] per line. Several
//! handles (in one process or many) may share the file: appends take an
//! exclusive file lock, and every read first picks up lines appended since the
//! handle last looked.

mod homogeneity;
mod predicate;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::ArtifactLocator;

pub use homogeneity::{check_homogeneity, HomogeneityReport, Offender};
pub use predicate::{CmpOp, Predicate, PredicateError};

/// Tags every catalog knows about, present on records or not.
pub const STANDARD_TAGS: [&str; 5] = ["PatientName", "PatientID", "StudyDate", "Modality", "Age"];

pub type Header = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub subject_id: String,
    pub header: Header,
    pub payload_ref: ArtifactLocator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySet {
    pub set_id: String,
    pub owner: String,
    pub members: Vec<String>,
    pub created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defining_query: Option<String>,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("duplicate image id `{0}`")]
    DuplicateImage(String),
    #[error("record `{image_id}`: {message}")]
    InvalidRecord { image_id: String, message: String },
    #[error("unknown study-set member `{0}`")]
    UnknownMember(String),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error("catalog file line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("catalog I/O: {0}")]
    Io(#[from] io::Error),
}

fn check_record(r: &ImageRecord) -> Result<(), CatalogError> {
    if r.image_id.is_empty() {
        return Err(CatalogError::InvalidRecord {
            image_id: r.image_id.clone(),
            message: "empty image id".into(),
        });
    }
    if let Some(age) = r.header.get("Age") {
        if age.trim().parse::<u64>().is_err() {
            return Err(CatalogError::InvalidRecord {
                image_id: r.image_id.clone(),
                message: format!("Age `{age}` is not a non-negative integer"),
            });
        }
    }
    Ok(())
}

/// An immutable point-in-time view of the catalog.
#[derive(Clone, Debug, Default)]
pub struct CatalogSnapshot {
    records: Arc<BTreeMap<String, ImageRecord>>,
}

impl CatalogSnapshot {
    pub fn from_records(
        records: impl IntoIterator<Item = ImageRecord>,
    ) -> Result<Self, CatalogError> {
        let mut map = BTreeMap::new();
        for r in records {
            check_record(&r)?;
            if map.contains_key(&r.image_id) {
                return Err(CatalogError::DuplicateImage(r.image_id));
            }
            map.insert(r.image_id.clone(), r);
        }
        Ok(CatalogSnapshot {
            records: Arc::new(map),
        })
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.get(image_id)
    }

    /// Records in image-id order.
    pub fn iter(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The standard tags plus every tag present on some record.
    pub fn schema(&self) -> BTreeSet<String> {
        let mut tags: BTreeSet<String> = STANDARD_TAGS.iter().map(|s| s.to_string()).collect();
        for r in self.records.values() {
            tags.extend(r.header.keys().cloned());
        }
        tags
    }

    pub fn resolve<'a>(&'a self, members: &[String]) -> Result<Vec<&'a ImageRecord>, CatalogError> {
        members
            .iter()
            .map(|m| {
                self.get(m)
                    .ok_or_else(|| CatalogError::UnknownMember(m.clone()))
            })
            .collect()
    }
}

/// Ids of the records satisfying `predicate`, in image-id order.
pub fn evaluate_query(
    predicate: &str,
    catalog: &CatalogSnapshot,
) -> Result<Vec<String>, CatalogError> {
    let pred: Predicate = predicate.parse()?;
    let schema = catalog.schema();
    if let Some(tag) = pred.tags().into_iter().find(|t| !schema.contains(*t)) {
        return Err(PredicateError::UnknownTag(tag.to_string()).into());
    }
    Ok(catalog
        .iter()
        .filter(|r| pred.matches(r))
        .map(|r| r.image_id.clone())
        .collect())
}

struct CatalogState {
    snapshot: CatalogSnapshot,
    offset: u64,
    lines: usize,
}

/// A file-backed catalog handle.
pub struct Catalog {
    path: PathBuf,
    state: RwLock<CatalogState>,
    append: Mutex<()>,
}

impl Catalog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, CatalogError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        OpenOptions::new().create(true).append(true).open(&path)?;
        let cat = Catalog {
            path,
            state: RwLock::new(CatalogState {
                snapshot: CatalogSnapshot::default(),
                offset: 0,
                lines: 0,
            }),
            append: Mutex::new(()),
        };
        cat.refresh()?;
        Ok(cat)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Current view, including appends made through other handles.
    pub fn snapshot(&self) -> Result<CatalogSnapshot, CatalogError> {
        self.refresh()?;
        Ok(self.state.read().unwrap().snapshot.clone())
    }

    pub fn get(&self, image_id: &str) -> Result<Option<ImageRecord>, CatalogError> {
        Ok(self.snapshot()?.get(image_id).cloned())
    }

    fn refresh(&self) -> Result<(), CatalogError> {
        let mut file = File::open(&self.path)?;
        let len = file.metadata()?.len();
        let mut state = self.state.write().unwrap();
        if len == state.offset {
            return Ok(());
        }
        Self::catch_up(&mut file, &mut state)
    }

    fn catch_up(file: &mut File, state: &mut CatalogState) -> Result<(), CatalogError> {
        file.seek(SeekFrom::Start(state.offset))?;
        let mut reader = BufReader::new(file);
        let mut map = (*state.snapshot.records).clone();
        let (mut offset, mut lines) = (state.offset, state.lines);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            lines += 1;
            offset += n as u64;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ImageRecord =
                serde_json::from_str(&line).map_err(|e| CatalogError::Corrupt {
                    line: lines,
                    message: e.to_string(),
                })?;
            check_record(&rec)?;
            if map.contains_key(&rec.image_id) {
                return Err(CatalogError::DuplicateImage(rec.image_id));
            }
            map.insert(rec.image_id.clone(), rec);
        }
        state.snapshot = CatalogSnapshot {
            records: Arc::new(map),
        };
        state.offset = offset;
        state.lines = lines;
        Ok(())
    }

    /// Appends records atomically: either all are written or none.
    pub fn insert_all(&self, records: &[ImageRecord]) -> Result<(), CatalogError> {
        let _guard = self.append.lock().unwrap();
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(&self.path)?;
        file.lock()?;
        let result = (|| {
            let mut state = self.state.write().unwrap();
            Self::catch_up(&mut file, &mut state)?;
            let mut fresh = BTreeSet::new();
            for r in records {
                check_record(r)?;
                if state.snapshot.get(&r.image_id).is_some() || !fresh.insert(&r.image_id) {
                    return Err(CatalogError::DuplicateImage(r.image_id.clone()));
                }
            }
            let mut buf = Vec::new();
            for r in records {
                serde_json::to_writer(&mut buf, r).map_err(io::Error::other)?;
                buf.push(b'\n');
            }
            file.write_all(&buf)?;
            file.sync_data()?;
            Self::catch_up(&mut file, &mut state)
        })();
        file.unlock()?;
        result
    }

    pub fn insert(&self, record: ImageRecord) -> Result<(), CatalogError> {
        self.insert_all(std::slice::from_ref(&record))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::artifact::ArtifactId;

    pub(crate) fn rec(id: &str, tags: &[(&str, &str)]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            subject_id: format!("s-{id}"),
            header: tags
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            payload_ref: ArtifactLocator::Store(ArtifactId::of_bytes(id.as_bytes())),
        }
    }

    pub(crate) fn three() -> CatalogSnapshot {
        CatalogSnapshot::from_records([
            rec("i1", &[("Age", "70"), ("Modality", "MR")]),
            rec("i2", &[("Age", "60"), ("Modality", "MR")]),
            rec("i3", &[("Age", "80"), ("Modality", "CT")]),
        ])
        .unwrap()
    }

    #[test]
    fn conjunctive_query() {
        assert_eq!(
            evaluate_query("Age >= 65 AND Modality = MR", &three()).unwrap(),
            vec!["i1"]
        );
    }

    #[test]
    fn disjunctive_query() {
        assert_eq!(
            evaluate_query("Modality = MR OR Modality = CT", &three()).unwrap(),
            vec!["i1", "i2", "i3"]
        );
    }

    #[test]
    fn tautology_over_empty_catalog() {
        assert!(evaluate_query("Age >= 0", &CatalogSnapshot::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn unknown_tag_rejected() {
        assert!(matches!(
            evaluate_query("Weight >= 3", &three()),
            Err(CatalogError::Predicate(PredicateError::UnknownTag(t))) if t == "Weight"
        ));
    }

    #[test]
    fn bad_age_rejected() {
        assert!(matches!(
            CatalogSnapshot::from_records([rec("x", &[("Age", "-3")])]),
            Err(CatalogError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn two_handles_share_one_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.jsonl");
        let a = Catalog::open(&path).unwrap();
        let b = Catalog::open(&path).unwrap();
        a.insert(rec("i1", &[("Modality", "MR")])).unwrap();
        assert!(b.get("i1").unwrap().is_some());
        assert!(matches!(
            b.insert(rec("i1", &[])),
            Err(CatalogError::DuplicateImage(_))
        ));
        b.insert_all(&[rec("i2", &[]), rec("i3", &[])]).unwrap();
        assert_eq!(a.snapshot().unwrap().len(), 3);
        let reopened = Catalog::open(&path).unwrap();
        assert_eq!(reopened.snapshot().unwrap().len(), 3);
    }
}
