use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CatalogError, CatalogSnapshot, StudySet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offender {
    pub image_id: String,
    pub tag: String,
    /// `None` when the member lacks the tag.
    pub value: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomogeneityReport {
    pub homogeneous: bool,
    pub checked_fields: Vec<String>,
    pub offenders: Vec<Offender>,
}

/// Per field, every member whose value differs from the majority value is an
/// offender. A tie goes to the value carried by the lowest image id. A missing
/// tag counts as its own value.
pub fn check_homogeneity(
    set: &StudySet,
    fields: &[String],
    catalog: &CatalogSnapshot,
) -> Result<HomogeneityReport, CatalogError> {
    let mut members = catalog.resolve(&set.members)?;
    members.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut offenders = Vec::new();
    for field in fields {
        let values: Vec<Option<&String>> = members.iter().map(|r| r.header.get(field)).collect();
        // value -> (count, index of first occurrence in image-id order)
        let mut tally: BTreeMap<Option<&String>, (usize, usize)> = BTreeMap::new();
        for (i, v) in values.iter().enumerate() {
            tally.entry(*v).or_insert((0, i)).0 += 1;
        }
        let majority = tally
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .map(|(v, _)| *v);
        for (r, v) in members.iter().zip(&values) {
            if Some(*v) != majority {
                offenders.push(Offender {
                    image_id: r.image_id.clone(),
                    tag: field.clone(),
                    value: v.cloned(),
                });
            }
        }
    }
    Ok(HomogeneityReport {
        homogeneous: offenders.is_empty(),
        checked_fields: fields.to_vec(),
        offenders,
    })
}
