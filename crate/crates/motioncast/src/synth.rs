//! Synthetic motion corpus: a kinematic tree driven by per-category joint
//! oscillators, so bone lengths are exactly constant and every category has
//! its own frequency signature.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestEntry, MANIFEST_FILE, SKELETON_FILE};
use crate::motion::MotionSequence;
use crate::seeds::rng_for;
use crate::skeleton::SkeletonTopology;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_categories: usize,
    pub n_subjects: usize,
    pub seqs_per_pair: usize,
    pub n_joints: usize,
    /// Observation frames per sequence.
    pub obs_len: usize,
    /// Future frames per sequence.
    pub horizon: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_categories: 4,
            n_subjects: 3,
            seqs_per_pair: 20,
            n_joints: 17,
            obs_len: 25,
            horizon: 25,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0
            || self.n_subjects == 0
            || self.seqs_per_pair == 0
            || self.n_joints == 0
            || self.obs_len == 0
            || self.horizon == 0
        {
            return Err(Error::Config("synthetic spec requires positive counts".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.obs_len + self.horizon
    }

    /// Dominant oscillation frequency of a category, before the subject's
    /// rhythm multiplier.
    pub fn category_frequency(&self, category: usize) -> f64 {
        1.0 + 0.5 * category as f64
    }
}

/// Heap-shaped kinematic tree: the parent of joint i is (i-1)/2.
pub fn tree_topology(n_joints: usize) -> Result<SkeletonTopology> {
    let bones = (1..n_joints).map(|i| ((i - 1) / 2, i)).collect();
    SkeletonTopology::new(n_joints, bones)
}

type Mat3 = [[f64; 3]; 3];

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                out[i][j] += a[i][k] * bk[j];
            }
        }
    }
    out
}

fn mat_apply(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Rotation by `angle` about the unit axis `k` (Rodrigues form).
fn rotation(k: [f64; 3], angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [
            c + k[0] * k[0] * t,
            k[0] * k[1] * t - k[2] * s,
            k[0] * k[2] * t + k[1] * s,
        ],
        [
            k[1] * k[0] * t + k[2] * s,
            c + k[1] * k[1] * t,
            k[1] * k[2] * t - k[0] * s,
        ],
        [
            k[2] * k[0] * t - k[1] * s,
            k[2] * k[1] * t + k[0] * s,
            c + k[2] * k[2] * t,
        ],
    ]
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Joint-angle oscillators of one category: per joint an axis, a phase and
/// an amplitude, all sharing the category's frequency.
struct CategoryMotion {
    axes: Vec<[f64; 3]>,
    phases: Vec<f64>,
    amps: Vec<f64>,
    root_amp: [f64; 3],
    root_phase: [f64; 3],
}

struct SubjectTraits {
    bone_scale: f64,
    rhythm: f64,
}

struct Rig {
    /// Bone rest directions (unit), indexed by child joint.
    rest_dir: Vec<[f64; 3]>,
    /// Bone rest lengths in mm, indexed by child joint.
    rest_len: Vec<f64>,
}

fn build_rig(spec: &SynthSpec) -> Rig {
    let mut rng = rng_for(spec.seed, &[0x9147]);
    let n = spec.n_joints;
    let mut rest_dir = vec![[0.0; 3]; n];
    let mut rest_len = vec![0.0; n];
    for j in 1..n {
        rest_dir[j] = unit_vector(&mut rng);
        rest_len[j] = rng.random_range(80.0..160.0);
    }
    Rig { rest_dir, rest_len }
}

fn category_motion(spec: &SynthSpec, category: usize) -> CategoryMotion {
    let mut rng = rng_for(spec.seed, &[0xca7e, category as u64]);
    let n = spec.n_joints;
    let mut axes = Vec::with_capacity(n);
    let mut phases = Vec::with_capacity(n);
    let mut amps = Vec::with_capacity(n);
    for _ in 0..n {
        axes.push(unit_vector(&mut rng));
        phases.push(rng.random_range(0.0..std::f64::consts::TAU));
        amps.push(rng.random_range(0.2..0.6));
    }
    let mut root_amp = [0.0; 3];
    let mut root_phase = [0.0; 3];
    for k in 0..3 {
        root_amp[k] = rng.random_range(20.0..50.0);
        root_phase[k] = rng.random_range(0.0..std::f64::consts::TAU);
    }
    CategoryMotion {
        axes,
        phases,
        amps,
        root_amp,
        root_phase,
    }
}

fn subject_traits(spec: &SynthSpec, subject: usize) -> SubjectTraits {
    let mut rng = rng_for(spec.seed, &[0x5b1e, subject as u64]);
    SubjectTraits {
        bone_scale: rng.random_range(0.85..1.15),
        rhythm: rng.random_range(0.9..1.1),
    }
}

/// One generated sequence of `obs_len + horizon` frames.
pub fn gen_sequence(
    spec: &SynthSpec,
    category: usize,
    subject: usize,
    repeat: usize,
) -> Result<MotionSequence> {
    spec.validate()?;
    if category >= spec.n_categories || subject >= spec.n_subjects || repeat >= spec.seqs_per_pair {
        return Err(Error::Precondition(format!(
            "sequence coordinates ({category},{subject},{repeat}) outside the corpus grid"
        )));
    }
    let rig = build_rig(spec);
    let motion = category_motion(spec, category);
    let traits = subject_traits(spec, subject);
    let mut rng = rng_for(
        spec.seed,
        &[0x5e9, category as u64, subject as u64, repeat as u64],
    );
    let seq_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let offset = [
        rng.random_range(-200.0..200.0),
        rng.random_range(-200.0..200.0),
        rng.random_range(-200.0..200.0),
    ];

    let n = spec.n_joints;
    let total = spec.total_frames();
    let omega = std::f64::consts::TAU * spec.category_frequency(category) * traits.rhythm;
    let mut frames = Array3::zeros((total, n, 3));
    for f in 0..total {
        let tau = f as f64 / spec.fps;
        let mut root = [0.0; 3];
        for k in 0..3 {
            root[k] = offset[k]
                + motion.root_amp[k] * (omega * tau + motion.root_phase[k] + seq_phase).sin();
        }
        let mut rot: Vec<Mat3> = vec![IDENTITY; n];
        let mut pos: Vec<[f64; 3]> = vec![[0.0; 3]; n];
        for j in 0..n {
            let angle = motion.amps[j] * (omega * tau + motion.phases[j] + seq_phase).sin();
            let local = rotation(motion.axes[j], angle);
            if j == 0 {
                rot[0] = local;
                pos[0] = root;
            } else {
                let parent = (j - 1) / 2;
                rot[j] = mat_mul(&rot[parent], &local);
                let bone = mat_apply(
                    &rot[j],
                    [
                        rig.rest_dir[j][0] * rig.rest_len[j] * traits.bone_scale,
                        rig.rest_dir[j][1] * rig.rest_len[j] * traits.bone_scale,
                        rig.rest_dir[j][2] * rig.rest_len[j] * traits.bone_scale,
                    ],
                );
                for k in 0..3 {
                    pos[j][k] = pos[parent][k] + bone[k];
                }
            }
        }
        for j in 0..n {
            for k in 0..3 {
                frames[[f, j, k]] = pos[j][k];
            }
        }
    }
    MotionSequence::new(frames, spec.fps)
}

/// Writes the skeleton, every sequence and the manifest into `out_dir`.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let topo = tree_topology(spec.n_joints)?;
    topo.write_skel_file(&out_dir.join(SKELETON_FILE))?;

    let mut entries = Vec::new();
    for c in 0..spec.n_categories {
        for s in 0..spec.n_subjects {
            for r in 0..spec.seqs_per_pair {
                let seq = gen_sequence(spec, c, s, r)?;
                let file = format!("c{c}_s{s}_r{r}.mseq");
                seq.write_mseq_file(&out_dir.join(&file))?;
                entries.push(ManifestEntry {
                    path: file.into(),
                    subject_id: format!("s{s}"),
                    category_id: format!("c{c}"),
                });
            }
        }
    }
    let manifest = DatasetManifest::new(
        entries,
        out_dir.join(SKELETON_FILE),
        out_dir.to_path_buf(),
    )?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
