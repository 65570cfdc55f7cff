//! Skeleton topology: joints, bones, and the derived neighbor sets.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

/// A rooted bone tree over `n_joints` joints.
///
/// `bones` is a list of `(parent, child)` index pairs; the per-joint neighbor
/// sets are derived from it and kept symmetric: `j` neighbors `i` iff
/// `(i, j)` or `(j, i)` is a bone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    n_joints: usize,
    bones: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl SkeletonTopology {
    pub fn new(n_joints: usize, bones: Vec<(usize, usize)>) -> Result<Self> {
        if n_joints == 0 {
            return Err(Error::Value("topology needs at least one joint".into()));
        }
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_joints];
        for &(p, c) in &bones {
            if p >= n_joints || c >= n_joints {
                return Err(Error::Value(format!(
                    "bone ({p}, {c}) out of range for {n_joints} joints"
                )));
            }
            if p == c {
                return Err(Error::Value(format!("self-loop bone at joint {p}")));
            }
            sets[p].insert(c);
            sets[c].insert(p);
        }
        let neighbors = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self {
            n_joints,
            bones,
            neighbors,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    /// Joints adjacent to `joint`, in ascending order.
    pub fn neighbors(&self, joint: usize) -> &[usize] {
        &self.neighbors[joint]
    }

    /// Parses the SKEL text format.
    ///
    /// Line 1: `SKEL v1`; line 2: joint count; then one `parent child` pair
    /// per bone.
    pub fn parse_skel(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("SKEL v1") => {}
            other => {
                return Err(Error::Format(format!(
                    "expected 'SKEL v1' header, got {other:?}"
                )))
            }
        }
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::Format("missing joint count line".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("bad joint count: {e}")))?;
        let mut bones = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let p: usize = it
                .next()
                .ok_or_else(|| Error::Format("empty bone line".into()))?
                .parse()
                .map_err(|e| Error::Format(format!("bad parent index: {e}")))?;
            let c: usize = it
                .next()
                .ok_or_else(|| Error::Format(format!("bone line '{line}' missing child")))?
                .parse()
                .map_err(|e| Error::Format(format!("bad child index: {e}")))?;
            if it.next().is_some() {
                return Err(Error::Format(format!(
                    "bone line '{line}' has trailing tokens"
                )));
            }
            bones.push((p, c));
        }
        Self::new(n, bones)
    }

    pub fn to_skel_string(&self) -> String {
        let mut s = String::from("SKEL v1\n");
        s.push_str(&format!("{}\n", self.n_joints));
        for &(p, c) in &self.bones {
            s.push_str(&format!("{p} {c}\n"));
        }
        s
    }

    pub fn read_skel_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_skel(&text)
    }

    pub fn write_skel_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_skel_string()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbors_are_symmetric_and_sorted() {
        let topo = SkeletonTopology::new(4, vec![(0, 1), (1, 2), (1, 3)]).unwrap();
        assert_eq!(topo.neighbors(0), &[1]);
        assert_eq!(topo.neighbors(1), &[0, 2, 3]);
        assert_eq!(topo.neighbors(2), &[1]);
        assert_eq!(topo.neighbors(3), &[1]);
    }

    #[test]
    fn rejects_bad_bones() {
        assert!(SkeletonTopology::new(2, vec![(0, 2)]).is_err());
        assert!(SkeletonTopology::new(2, vec![(1, 1)]).is_err());
    }

    #[test]
    fn skel_round_trip() {
        let topo = SkeletonTopology::new(3, vec![(0, 1), (0, 2)]).unwrap();
        let text = topo.to_skel_string();
        let parsed = SkeletonTopology::parse_skel(&text).unwrap();
        assert_eq!(parsed, topo);
    }

    #[test]
    fn skel_rejects_bad_header() {
        assert!(matches!(
            SkeletonTopology::parse_skel("SKEL v2\n3\n"),
            Err(Error::Format(_))
        ));
    }
}
