//! Dataset manifests: a TSV listing of motion files with subject/category
//! labels, living next to the skeleton that all of them share.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::selfsup::SampleTask;
use crate::skeleton::SkeletonTopology;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SKELETON_FILE: &str = "skeleton.skel";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: String,
    pub category_id: String,
}

/// The entry list plus the path of the shared topology. Entry paths are kept
/// as written; [`DatasetManifest::entry_path`] resolves them against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub topology_path: PathBuf,
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, topology_path: PathBuf, base_dir: PathBuf) -> Result<Self> {
        for e in &entries {
            if e.subject_id.is_empty() || e.category_id.is_empty() {
                return Err(Error::Format(format!(
                    "manifest entry {:?} has an empty subject or category id",
                    e.path
                )));
            }
        }
        Ok(Self {
            entries,
            topology_path,
            base_dir,
        })
    }

    /// Reads `manifest.tsv`; the skeleton is expected as `skeleton.skel` in
    /// the same directory.
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let base_dir = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let path = parts
                .next()
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::Format(format!("manifest line {}: missing path", i + 1)))?;
            let subject = parts.next().ok_or_else(|| {
                Error::Format(format!("manifest line {}: missing subject", i + 1))
            })?;
            let category = parts.next().ok_or_else(|| {
                Error::Format(format!("manifest line {}: missing category", i + 1))
            })?;
            if parts.next().is_some() {
                return Err(Error::Format(format!(
                    "manifest line {}: too many fields",
                    i + 1
                )));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                subject_id: subject.to_string(),
                category_id: category.to_string(),
            });
        }
        let topology_path = base_dir.join(SKELETON_FILE);
        Self::new(entries, topology_path, base_dir)
    }

    /// Reads the manifest inside a dataset directory.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        Self::read(&dir.join(MANIFEST_FILE))
    }

    pub fn to_tsv_string(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                e.path.display(),
                e.subject_id,
                e.category_id
            ));
        }
        s
    }

    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        std::fs::write(manifest_path, self.to_tsv_string()).map_err(|e| Error::io(manifest_path, e))
    }

    pub fn entry_path(&self, index: usize) -> PathBuf {
        let p = &self.entries[index].path;
        if p.is_absolute() {
            p.clone()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn load_topology(&self) -> Result<SkeletonTopology> {
        SkeletonTopology::read_skel_file(&self.topology_path)
    }

    pub fn load_sequence(&self, index: usize) -> Result<MotionSequence> {
        MotionSequence::read_mseq_file(&self.entry_path(index))
    }

    /// Keeps only the entries passing `keep`, preserving order.
    pub fn filtered(&self, keep: impl Fn(&ManifestEntry) -> bool) -> Self {
        Self {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
            topology_path: self.topology_path.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.iter().map(|e| e.subject_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn categories(&self) -> Vec<String> {
        let mut v: Vec<String> = self.entries.iter().map(|e| e.category_id.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Loads every entry, splits it into observation/target windows and
    /// builds the self-supervised companions. `rng_for_entry` supplies an
    /// independent generator per entry so the set is order-insensitive.
    pub fn load_tasks<R: Rng>(
        &self,
        obs_len: usize,
        horizon: usize,
        corruption_ratio: f64,
        mut rng_for_entry: impl FnMut(usize) -> R,
    ) -> Result<Vec<SampleTask>> {
        let mut tasks = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let seq = self.load_sequence(i)?;
            let mut rng = rng_for_entry(i);
            tasks.push(SampleTask::from_sequence(
                &seq,
                obs_len,
                horizon,
                corruption_ratio,
                e.subject_id.clone(),
                e.category_id.clone(),
                &mut rng,
            )?);
        }
        Ok(tasks)
    }
}
