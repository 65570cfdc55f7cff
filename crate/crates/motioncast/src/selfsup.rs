//! Self-supervised companions of an observed window: a maybe-scrambled copy
//! with its label, and a joint-dropout copy with its mask.

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::motion::MotionSequence;

/// One forecasting sample with its self-supervised derivatives. `observation`
/// holds the visible window, `target` the future to predict; `scrambled` and
/// `corrupted` are same-shape copies feeding the auxiliary branches.
#[derive(Debug, Clone)]
pub struct SampleTask {
    pub observation: MotionSequence,
    pub target: MotionSequence,
    pub scrambled: MotionSequence,
    pub scramble_label: u8,
    pub corrupted: MotionSequence,
    pub corruption_mask: Array2<bool>,
    pub subject_id: String,
    pub category_id: String,
}

fn apply_permutation(seq: &MotionSequence, perm: &[usize]) -> MotionSequence {
    let (t, n, _) = seq.frames_array().dim();
    debug_assert_eq!(perm.len(), t);
    let mut out = Array3::zeros((t, n, 3));
    for (dst, &src) in perm.iter().enumerate() {
        out.index_axis_mut(Axis(0), dst)
            .assign(&seq.frames().index_axis(Axis(0), src));
    }
    MotionSequence::new(out, seq.fps()).expect("permutation preserves validity")
}

/// Coin-flips between the intact window (label 0) and a uniformly random
/// non-identity frame permutation of it (label 1).
pub fn make_scrambled<R: Rng>(obs: &MotionSequence, rng: &mut R) -> Result<(MotionSequence, u8)> {
    let (seq, label, _) = make_scrambled_with_perm(obs, rng)?;
    Ok((seq, label))
}

/// Like [`make_scrambled`], additionally returning the applied permutation
/// (`perm[i]` = source frame of output frame `i`; identity when label 0).
pub fn make_scrambled_with_perm<R: Rng>(
    obs: &MotionSequence,
    rng: &mut R,
) -> Result<(MotionSequence, u8, Vec<usize>)> {
    let t = obs.n_frames();
    if t < 2 {
        return Err(Error::Precondition(
            "scrambling needs at least 2 frames".into(),
        ));
    }
    let identity: Vec<usize> = (0..t).collect();
    if rng.random_bool(0.5) {
        return Ok((obs.clone(), 0, identity));
    }
    let mut perm = identity.clone();
    loop {
        perm.shuffle(rng);
        if perm != identity {
            break;
        }
    }
    Ok((apply_permutation(obs, &perm), 1, perm))
}

/// Zeroes the coordinates of `round(ratio * T * N)` uniformly chosen
/// (frame, joint) cells and reports which cells were hit.
pub fn make_corrupted<R: Rng>(
    obs: &MotionSequence,
    ratio: f64,
    rng: &mut R,
) -> Result<(MotionSequence, Array2<bool>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Precondition(format!(
            "corruption ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let (t, n, _) = obs.frames_array().dim();
    let cells = t * n;
    let k = (ratio * cells as f64).round() as usize;
    let mut frames = obs.frames_array().clone();
    let mut mask = Array2::from_elem((t, n), false);
    for idx in rand::seq::index::sample(rng, cells, k) {
        let (f, j) = (idx / n, idx % n);
        mask[[f, j]] = true;
        for c in 0..3 {
            frames[[f, j, c]] = 0.0;
        }
    }
    Ok((MotionSequence::new(frames, obs.fps())?, mask))
}

impl SampleTask {
    /// Builds the task from an already-split (observation, target) pair.
    /// Draws the scramble first, then the corruption, from the same generator.
    pub fn build<R: Rng>(
        observation: MotionSequence,
        target: MotionSequence,
        corruption_ratio: f64,
        subject_id: String,
        category_id: String,
        rng: &mut R,
    ) -> Result<Self> {
        if observation.n_joints() != target.n_joints() {
            return Err(Error::Shape(format!(
                "observation has {} joints, target {}",
                observation.n_joints(),
                target.n_joints()
            )));
        }
        let (scrambled, scramble_label) = make_scrambled(&observation, rng)?;
        let (corrupted, corruption_mask) = make_corrupted(&observation, corruption_ratio, rng)?;
        Ok(Self {
            observation,
            target,
            scrambled,
            scramble_label,
            corrupted,
            corruption_mask,
            subject_id,
            category_id,
        })
    }

    /// Splits `seq` into a length-`obs_len` observation and length-`horizon`
    /// target starting at frame 0, then builds the companions.
    pub fn from_sequence<R: Rng>(
        seq: &MotionSequence,
        obs_len: usize,
        horizon: usize,
        corruption_ratio: f64,
        subject_id: String,
        category_id: String,
        rng: &mut R,
    ) -> Result<Self> {
        if seq.n_frames() < obs_len + horizon {
            return Err(Error::Shape(format!(
                "sequence has {} frames, need {} + {}",
                seq.n_frames(),
                obs_len,
                horizon
            )));
        }
        let observation = seq.slice_frames(0, obs_len)?;
        let target = seq.slice_frames(obs_len, obs_len + horizon)?;
        Self::build(
            observation,
            target,
            corruption_ratio,
            subject_id,
            category_id,
            rng,
        )
    }

    /// Redraws the scrambled/corrupted companions in place from a fresh
    /// generator, leaving observation and target untouched.
    pub fn resample_companions<R: Rng>(&mut self, corruption_ratio: f64, rng: &mut R) -> Result<()> {
        let (scrambled, label) = make_scrambled(&self.observation, rng)?;
        let (corrupted, mask) = make_corrupted(&self.observation, corruption_ratio, rng)?;
        self.scrambled = scrambled;
        self.scramble_label = label;
        self.corrupted = corrupted;
        self.corruption_mask = mask;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use ndarray::Array3;

    fn ramp_seq(t: usize, n: usize) -> MotionSequence {
        let mut frames = Array3::zeros((t, n, 3));
        for f in 0..t {
            for j in 0..n {
                for c in 0..3 {
                    frames[[f, j, c]] = (f * 100 + j * 10 + c) as f64;
                }
            }
        }
        MotionSequence::new(frames, 25.0).unwrap()
    }

    #[test]
    fn scramble_intact_branch_is_identity() {
        let obs = ramp_seq(5, 2);
        // hunt a seed whose first coin lands on the intact branch
        for seed in 0..64u64 {
            let mut rng = rng_for(seed, &[1]);
            let (out, label) = make_scrambled(&obs, &mut rng).unwrap();
            if label == 0 {
                assert_eq!(out, obs);
                return;
            }
        }
        panic!("no intact draw in 64 seeds");
    }

    #[test]
    fn scramble_inverse_recovers_observation() {
        let obs = ramp_seq(6, 2);
        for seed in 0..64u64 {
            let mut rng = rng_for(seed, &[2]);
            let (out, label, perm) = make_scrambled_with_perm(&obs, &mut rng).unwrap();
            if label == 1 {
                let mut restored = Array3::zeros(obs.frames_array().raw_dim());
                for (dst, &src) in perm.iter().enumerate() {
                    restored
                        .index_axis_mut(Axis(0), src)
                        .assign(&out.frames().index_axis(Axis(0), dst));
                }
                assert_eq!(restored, *obs.frames_array());
                assert_ne!(out, obs);
                return;
            }
        }
        panic!("no scrambled draw in 64 seeds");
    }

    #[test]
    fn scramble_label_rate_near_half() {
        let obs = ramp_seq(4, 1);
        let mut ones = 0usize;
        let total = 10_000usize;
        let mut rng = rng_for(99, &[3]);
        for _ in 0..total {
            let (_, label) = make_scrambled(&obs, &mut rng).unwrap();
            ones += label as usize;
        }
        let frac = ones as f64 / total as f64;
        assert!((0.47..=0.53).contains(&frac), "label-1 fraction {frac}");
    }

    #[test]
    fn scramble_needs_two_frames() {
        let obs = ramp_seq(1, 2);
        let mut rng = rng_for(0, &[]);
        assert!(matches!(
            make_scrambled(&obs, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn corruption_count_is_rounded_product() {
        let obs = ramp_seq(25, 17);
        let mut rng = rng_for(7, &[4]);
        let (_, mask) = make_corrupted(&obs, 0.2, &mut rng).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 85);
    }

    #[test]
    fn corruption_zero_ratio_is_identity() {
        let obs = ramp_seq(3, 4);
        let mut rng = rng_for(7, &[5]);
        let (out, mask) = make_corrupted(&obs, 0.0, &mut rng).unwrap();
        assert_eq!(out, obs);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn corruption_only_touches_masked_cells() {
        let obs = ramp_seq(6, 5);
        let mut rng = rng_for(11, &[6]);
        let (out, mask) = make_corrupted(&obs, 0.3, &mut rng).unwrap();
        for f in 0..6 {
            for j in 0..5 {
                for c in 0..3 {
                    let got = out.frames()[[f, j, c]];
                    if mask[[f, j]] {
                        assert_eq!(got, 0.0);
                    } else {
                        assert_eq!(got, obs.frames()[[f, j, c]]);
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_companions() {
        let seq = ramp_seq(12, 3);
        let build = || {
            let mut rng = rng_for(42, &[7]);
            SampleTask::from_sequence(&seq, 8, 4, 0.2, "s".into(), "c".into(), &mut rng).unwrap()
        };
        let a = build();
        let b = build();
        assert_eq!(a.scrambled, b.scrambled);
        assert_eq!(a.scramble_label, b.scramble_label);
        assert_eq!(a.corrupted, b.corrupted);
        assert_eq!(a.corruption_mask, b.corruption_mask);
    }

    #[test]
    fn from_sequence_splits_at_obs_len() {
        let seq = ramp_seq(10, 2);
        let mut rng = rng_for(1, &[8]);
        let task =
            SampleTask::from_sequence(&seq, 6, 4, 0.2, "s1".into(), "c0".into(), &mut rng).unwrap();
        assert_eq!(task.observation.n_frames(), 6);
        assert_eq!(task.target.n_frames(), 4);
        assert_eq!(
            task.target.frames()[[0, 0, 0]],
            seq.frames()[[6, 0, 0]]
        );
        assert!(matches!(
            SampleTask::from_sequence(&seq, 8, 4, 0.2, "s".into(), "c".into(), &mut rng),
            Err(Error::Shape(_))
        ));
    }
}
