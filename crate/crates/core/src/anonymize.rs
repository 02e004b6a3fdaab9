//! Header anonymization policies.
//!
//! A policy is an ordered rule list plus a salt:
//!
//! ```json
//! {"rules": [{"tag": "PatientName", "action": "REMOVE"},
//!            {"tag": "StudyDate", "action": "REPLACE", "value": "19000101"},
//!            {"tag": "PatientID", "action": "PSEUDONYMIZE"}],
//!  "salt": "site-secret"}
//! ```
//!
//! Pseudonym tokens are the first 16 hex digits of
//! `SHA-256(salt 0x1F tag 0x1F value)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, Header, ImageRecord, StudySet};
use crate::provenance::{EventBody, NewEvent, ProvError, ProvenanceStore};

pub const TOKEN_LEN: usize = 16;
const SUBJECT_TAG: &str = "PatientID";

#[derive(Debug, Error)]
pub enum AnonymizeError {
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("unknown study set `{0}`")]
    UnknownStudySet(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Provenance(#[from] ProvError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Remove,
    Replace(String),
    Pseudonymize,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Remove => "REMOVE",
            Action::Replace(_) => "REPLACE",
            Action::Pseudonymize => "PSEUDONYMIZE",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub tag: String,
    #[serde(flatten)]
    pub action: Action,
}

impl Rule {
    pub fn new(tag: impl Into<String>, action: Action) -> Self {
        Rule {
            tag: tag.into(),
            action,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub rules: Vec<Rule>,
    #[serde(default)]
    pub salt: String,
}

impl Policy {
    pub fn parse(text: &str) -> Result<Self, AnonymizeError> {
        let p: Policy =
            serde_json::from_str(text).map_err(|e| AnonymizeError::InvalidPolicy(e.to_string()))?;
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), AnonymizeError> {
        let mut tags = BTreeSet::new();
        for r in &self.rules {
            if r.tag.is_empty() {
                return Err(AnonymizeError::InvalidPolicy("rule with empty tag".into()));
            }
            if !tags.insert(r.tag.as_str()) {
                return Err(AnonymizeError::InvalidPolicy(format!(
                    "more than one rule for `{}`",
                    r.tag
                )));
            }
            if r.action == Action::Pseudonymize && self.salt.is_empty() {
                return Err(AnonymizeError::InvalidPolicy(format!(
                    "`{}` is pseudonymized but the salt is empty",
                    r.tag
                )));
            }
        }
        Ok(())
    }

    pub fn rule(&self, tag: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.tag == tag)
    }

    /// `TAG:ACTION` per rule, for the provenance log.
    pub fn summary(&self) -> Vec<String> {
        self.rules
            .iter()
            .map(|r| format!("{}:{}", r.tag, r.action.name()))
            .collect()
    }
}

pub fn pseudonym_token(salt: &[u8], tag: &str, value: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt);
    h.update([0x1f]);
    h.update(tag.as_bytes());
    h.update([0x1f]);
    h.update(value.as_bytes());
    let mut hex = hex::encode(h.finalize());
    hex.truncate(TOKEN_LEN);
    hex
}

/// Original values to tokens, per tag. For re-identification escrow only.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PseudonymMap {
    pub entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl PseudonymMap {
    pub fn token(&self, tag: &str, original: &str) -> Option<&str> {
        self.entries.get(tag)?.get(original).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn merge(&mut self, other: PseudonymMap) {
        for (tag, m) in other.entries {
            self.entries.entry(tag).or_default().extend(m);
        }
    }
}

pub fn anonymize_header(
    h: &Header,
    policy: &Policy,
) -> Result<(Header, PseudonymMap), AnonymizeError> {
    policy.check()?;
    Ok(apply(h, policy))
}

fn apply(h: &Header, policy: &Policy) -> (Header, PseudonymMap) {
    let mut out = Header::new();
    let mut map = PseudonymMap::default();
    for (tag, value) in h {
        match policy.rule(tag).map(|r| &r.action) {
            None => {
                out.insert(tag.clone(), value.clone());
            }
            Some(Action::Remove) => {}
            Some(Action::Replace(lit)) => {
                out.insert(tag.clone(), lit.clone());
            }
            Some(Action::Pseudonymize) => {
                let token = pseudonym_token(policy.salt.as_bytes(), tag, value);
                map.entries
                    .entry(tag.clone())
                    .or_default()
                    .insert(value.clone(), token.clone());
                out.insert(tag.clone(), token);
            }
        }
    }
    (out, map)
}

/// The subject identifier follows whatever the policy does to `PatientID`.
fn anonymize_subject(subject: &str, policy: &Policy) -> String {
    match policy.rule(SUBJECT_TAG).map(|r| &r.action) {
        None => subject.to_string(),
        Some(Action::Remove) => "anonymous".to_string(),
        Some(Action::Replace(lit)) => lit.clone(),
        Some(Action::Pseudonymize) => pseudonym_token(policy.salt.as_bytes(), SUBJECT_TAG, subject),
    }
}

pub fn anonymized_image_id(set_id: &str, original: &str) -> String {
    format!("{set_id}-{original}")
}

/// Copies every member of `set` with anonymized headers into a fresh study
/// set. Originals are left untouched.
pub fn anonymize_study(
    set: &StudySet,
    policy: &Policy,
    catalog: &Catalog,
    prov: &ProvenanceStore,
) -> Result<(StudySet, PseudonymMap), AnonymizeError> {
    policy.check()?;
    let snapshot = catalog.snapshot()?;
    let originals: Vec<ImageRecord> = snapshot
        .resolve(&set.members)?
        .into_iter()
        .cloned()
        .collect();
    let mut pseudonyms = PseudonymMap::default();
    let created = prov.record_with(|seq, at| {
        let new_id = format!("ss-{seq:06}");
        let mut records = Vec::with_capacity(originals.len());
        for r in &originals {
            let (header, map) = apply(&r.header, policy);
            pseudonyms.merge(map);
            records.push(ImageRecord {
                image_id: anonymized_image_id(&new_id, &r.image_id),
                subject_id: anonymize_subject(&r.subject_id, policy),
                header,
                payload_ref: r.payload_ref.clone(),
            });
        }
        catalog.insert_all(&records)?;
        Ok::<_, AnonymizeError>(NewEvent::global(EventBody::StudysetCreated {
            set: StudySet {
                set_id: new_id,
                owner: set.owner.clone(),
                members: records.into_iter().map(|r| r.image_id).collect(),
                created_at: at,
                defining_query: None,
            },
        }))
    })?;
    let EventBody::StudysetCreated { set: new_set } = created.body else {
        unreachable!("recorded a STUDYSET_CREATED event");
    };
    let image_map = set
        .members
        .iter()
        .cloned()
        .zip(new_set.members.iter().cloned())
        .collect();
    prov.record(NewEvent::global(EventBody::Anonymized {
        source_set_id: set.set_id.clone(),
        target_set_id: new_set.set_id.clone(),
        image_map,
        rules: policy.summary(),
    }))?;
    Ok((new_set, pseudonyms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(pairs: &[(&str, &str)]) -> Header {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn pinned_token() {
        // first 16 hex of SHA-256("s" 0x1F "PatientID" 0x1F "P1"), computed outside this code base
        assert_eq!(pseudonym_token(b"s", "PatientID", "P1"), "47c12c7e754fe3b8");
        assert_eq!(
            pseudonym_token(b"s2", "PatientID", "P1"),
            "6953fb689170ba9c"
        );
    }

    #[test]
    fn rule_actions() {
        let h = header(&[
            ("PatientName", "Doe"),
            ("Modality", "MR"),
            ("StudyDate", "20210405"),
            ("PatientID", "P1"),
        ]);
        let policy = Policy {
            rules: vec![
                Rule::new("PatientName", Action::Remove),
                Rule::new("StudyDate", Action::Replace("19000101".into())),
                Rule::new("PatientID", Action::Pseudonymize),
            ],
            salt: "s".into(),
        };
        let (out, map) = anonymize_header(&h, &policy).unwrap();
        assert!(!out.contains_key("PatientName"));
        assert_eq!(out["Modality"], "MR");
        assert_eq!(out["StudyDate"], "19000101");
        assert_eq!(out["PatientID"], "47c12c7e754fe3b8");
        assert_eq!(map.token("PatientID", "P1"), Some("47c12c7e754fe3b8"));
        assert_eq!(map.len(), 1);
    }

    #[test]
    fn policy_validation() {
        let dup = Policy {
            rules: vec![
                Rule::new("A", Action::Remove),
                Rule::new("A", Action::Pseudonymize),
            ],
            salt: "x".into(),
        };
        assert!(matches!(dup.check(), Err(AnonymizeError::InvalidPolicy(_))));
        let unsalted = Policy {
            rules: vec![Rule::new("A", Action::Pseudonymize)],
            salt: String::new(),
        };
        assert!(matches!(
            unsalted.check(),
            Err(AnonymizeError::InvalidPolicy(_))
        ));
        assert!(Policy::default().check().is_ok());
    }

    #[test]
    fn policy_file_format() {
        let p = Policy::parse(
            r#"{"rules": [{"tag": "PatientName", "action": "REMOVE"},
                          {"tag": "StudyDate", "action": "REPLACE", "value": "19000101"},
                          {"tag": "PatientID", "action": "PSEUDONYMIZE"}],
                "salt": "s"}"#,
        )
        .unwrap();
        assert_eq!(p.rules[1].action, Action::Replace("19000101".into()));
        assert_eq!(
            p.summary(),
            [
                "PatientName:REMOVE",
                "StudyDate:REPLACE",
                "PatientID:PSEUDONYMIZE"
            ]
        );
        let back: Policy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(
            Policy::parse(r#"{"rules": [{"tag": "A", "action": "SHRED"}], "salt": ""}"#).is_err()
        );
        assert!(
            Policy::parse(r#"{"rules": [{"tag": "A", "action": "REPLACE"}], "salt": ""}"#).is_err()
        );
    }
}
