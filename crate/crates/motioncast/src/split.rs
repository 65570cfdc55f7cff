//! Experimental train/test splits over a dataset manifest.

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;

/// The four evaluation protocols: (i) a designated test subject, (ii) an
/// unseen subject, (iii)/(iv) an unseen category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetupKind {
    I,
    II,
    III,
    IV,
}

impl SetupKind {
    pub fn holds_out_subject(&self) -> bool {
        matches!(self, SetupKind::I | SetupKind::II)
    }
}

impl std::str::FromStr for SetupKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i" | "I" | "1" => Ok(SetupKind::I),
            "ii" | "II" | "2" => Ok(SetupKind::II),
            "iii" | "III" | "3" => Ok(SetupKind::III),
            "iv" | "IV" | "4" => Ok(SetupKind::IV),
            other => Err(Error::Config(format!(
                "unknown setup {other:?}, expected i|ii|iii|iv"
            ))),
        }
    }
}

impl std::fmt::Display for SetupKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SetupKind::I => "i",
            SetupKind::II => "ii",
            SetupKind::III => "iii",
            SetupKind::IV => "iv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupSpec {
    pub kind: SetupKind,
    pub held_out_id: String,
}

/// Splits the manifest into (train, test): the held-out subject or category
/// becomes the test side, everything else trains. Always a partition.
pub fn build_setup_split(
    manifest: &DatasetManifest,
    setup: &SetupSpec,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let (candidates, field): (Vec<String>, &str) = if setup.kind.holds_out_subject() {
        (manifest.subjects(), "subject")
    } else {
        (manifest.categories(), "category")
    };
    if !candidates.contains(&setup.held_out_id) {
        return Err(Error::Lookup(format!(
            "unknown {field} {:?}; known: {}",
            setup.held_out_id,
            candidates.join(", ")
        )));
    }
    let id = setup.held_out_id.clone();
    let (test, train) = if setup.kind.holds_out_subject() {
        (
            manifest.filtered(|e| e.subject_id == id),
            manifest.filtered(|e| e.subject_id != id),
        )
    } else {
        (
            manifest.filtered(|e| e.category_id == id),
            manifest.filtered(|e| e.category_id != id),
        )
    };
    Ok((train, test))
}
