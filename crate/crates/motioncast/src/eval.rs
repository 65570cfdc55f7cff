//! Test-set evaluation: per-sequence forecast error at millisecond horizons,
//! with per-category/subject aggregation.

use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::meta::{tta_predict, MetaConfig};
use crate::metrics::mpjpe;
use crate::model::forward::Model;
use crate::model::ParamSet;
use crate::seeds::derive_seed;
use ndarray::s;

/// Millisecond horizon → 1-based frame index, rounding half up.
pub fn ms_to_frame(ms: u32, fps: f64) -> Result<usize> {
    if !(fps > 0.0) {
        return Err(Error::Domain(format!("fps must be positive, got {fps}")));
    }
    let frame = (ms as f64 * fps / 1000.0 + 0.5).floor() as usize;
    if frame == 0 {
        return Err(Error::Domain(format!(
            "{ms} ms is below one frame at {fps} fps"
        )));
    }
    Ok(frame)
}

#[derive(Debug, Clone)]
pub struct SequenceEval {
    pub sequence: String,
    pub subject: String,
    pub category: String,
    /// (horizon ms, single-frame error in mm), in request order.
    pub horizon_mpjpe: Vec<(u32, f64)>,
    /// Error averaged over the whole predicted horizon.
    pub mean_mpjpe: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub sequences: Vec<SequenceEval>,
    pub horizons_ms: Vec<u32>,
    pub tta_steps: usize,
    pub alpha: f64,
    pub eval_seed: u64,
}

/// Per-group means: value at each horizon plus the full-horizon mean, all
/// arithmetic means over member sequences.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GroupStats {
    pub per_horizon: Vec<(u32, f64)>,
    pub mean: f64,
    pub n_sequences: usize,
}

fn group_stats(members: &[&SequenceEval], horizons: &[u32]) -> GroupStats {
    let n = members.len() as f64;
    let per_horizon = horizons
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let sum: f64 = members.iter().map(|m| m.horizon_mpjpe[i].1).sum();
            (h, sum / n)
        })
        .collect();
    let mean = members.iter().map(|m| m.mean_mpjpe).sum::<f64>() / n;
    GroupStats {
        per_horizon,
        mean,
        n_sequences: members.len(),
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalSummary {
    pub tta_steps: usize,
    pub alpha: f64,
    pub eval_seed: u64,
    pub horizons_ms: Vec<u32>,
    pub n_sequences: usize,
    pub overall: GroupStats,
    pub per_category: BTreeMap<String, GroupStats>,
    pub per_subject: BTreeMap<String, GroupStats>,
}

impl EvalReport {
    pub fn overall(&self) -> GroupStats {
        let all: Vec<&SequenceEval> = self.sequences.iter().collect();
        group_stats(&all, &self.horizons_ms)
    }

    pub fn per_category(&self) -> BTreeMap<String, GroupStats> {
        let mut groups: BTreeMap<String, Vec<&SequenceEval>> = BTreeMap::new();
        for s in &self.sequences {
            groups.entry(s.category.clone()).or_default().push(s);
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, group_stats(&v, &self.horizons_ms)))
            .collect()
    }

    pub fn per_subject(&self) -> BTreeMap<String, GroupStats> {
        let mut groups: BTreeMap<String, Vec<&SequenceEval>> = BTreeMap::new();
        for s in &self.sequences {
            groups.entry(s.subject.clone()).or_default().push(s);
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, group_stats(&v, &self.horizons_ms)))
            .collect()
    }

    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            tta_steps: self.tta_steps,
            alpha: self.alpha,
            eval_seed: self.eval_seed,
            horizons_ms: self.horizons_ms.clone(),
            n_sequences: self.sequences.len(),
            overall: self.overall(),
            per_category: self.per_category(),
            per_subject: self.per_subject(),
        }
    }

    /// Main section: one row per sequence × horizon. The aggregate section
    /// follows after a blank line: per-sequence means, then group means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,subject,category,horizon_ms,mpjpe_mm\n");
        for s in &self.sequences {
            for &(h, v) in &s.horizon_mpjpe {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    s.sequence, s.subject, s.category, h, v
                ));
            }
        }
        out.push('\n');
        out.push_str("scope,id,horizon_ms,mpjpe_mm\n");
        for s in &self.sequences {
            out.push_str(&format!(
                "sequence_mean,{},all,{}\n",
                s.sequence, s.mean_mpjpe
            ));
        }
        let mut push_group = |scope: &str, id: &str, stats: &GroupStats| {
            for &(h, v) in &stats.per_horizon {
                out.push_str(&format!("{scope},{id},{h},{v}\n"));
            }
            out.push_str(&format!("{scope},{id},all,{}\n", stats.mean));
        };
        for (id, stats) in self.per_category() {
            push_group("category", &id, &stats);
        }
        for (id, stats) in self.per_subject() {
            push_group("subject", &id, &stats);
        }
        push_group("overall", "all", &self.overall());
        out
    }
}

/// Forecasts every test sequence (with or without adaptation) and scores it
/// at the requested horizons. Each sequence adapts an independent copy,
/// seeded from `eval_seed` and its manifest position.
pub fn evaluate(
    model: &Model,
    params: &ParamSet,
    test: &DatasetManifest,
    meta_cfg: &MetaConfig,
    horizons_ms: &[u32],
    tta: bool,
    eval_seed: u64,
    mu: f64,
) -> Result<EvalReport> {
    if test.entries.is_empty() {
        return Err(Error::Precondition("empty test manifest".into()));
    }
    if horizons_ms.is_empty() {
        return Err(Error::Precondition("no horizons requested".into()));
    }
    let cfg = model.config();
    let (t_obs, horizon) = (cfg.obs_len, cfg.horizon);
    let steps = if tta { meta_cfg.tta_steps } else { 0 };

    let sequences: Vec<SequenceEval> = (0..test.entries.len())
        .into_par_iter()
        .map(|idx| -> Result<SequenceEval> {
            let entry = &test.entries[idx];
            let seq = test.load_sequence(idx)?;
            if seq.n_frames() < t_obs + horizon {
                return Err(Error::Shape(format!(
                    "{} has {} frames, evaluation needs {}",
                    entry.path.display(),
                    seq.n_frames(),
                    t_obs + horizon
                )));
            }
            let frame_of: Vec<usize> = horizons_ms
                .iter()
                .map(|&ms| {
                    let f = ms_to_frame(ms, seq.fps())?;
                    if f > horizon {
                        return Err(Error::Domain(format!(
                            "{ms} ms is frame {f} at {} fps, beyond the {horizon}-frame horizon",
                            seq.fps()
                        )));
                    }
                    Ok(f)
                })
                .collect::<Result<_>>()?;

            let obs = seq.slice_frames(0, t_obs)?;
            let gt = seq.slice_frames(t_obs, t_obs + horizon)?;
            let seq_seed = derive_seed(eval_seed, &[idx as u64]);
            let pred = if steps == 0 {
                model.predict_primary(params, &obs, seq_seed)?
            } else {
                let mut cfg_seq = meta_cfg.clone();
                cfg_seq.tta_steps = steps;
                let (pred, _) = tta_predict(model, params, &obs, &cfg_seq, seq_seed, mu)?;
                pred
            };

            let horizon_mpjpe = horizons_ms
                .iter()
                .zip(&frame_of)
                .map(|(&ms, &f)| {
                    // 1-based horizon frame f is array row f-1
                    let pf = pred.frames_array().slice(s![f - 1..f, .., ..]);
                    let gf = gt.frames_array().slice(s![f - 1..f, .., ..]);
                    Ok((ms, mpjpe(pf, gf)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mean_mpjpe = mpjpe(pred.frames(), gt.frames())?;
            Ok(SequenceEval {
                sequence: entry.path.display().to_string(),
                subject: entry.subject_id.clone(),
                category: entry.category_id.clone(),
                horizon_mpjpe,
                mean_mpjpe,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        sequences,
        horizons_ms: horizons_ms.to_vec(),
        tta_steps: steps,
        alpha: meta_cfg.alpha,
        eval_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{gen_synthetic, tree_topology, SynthSpec};
    use tempfile::tempdir;

    #[test]
    fn paper_horizons_map_to_expected_frames() {
        for (ms, frame) in [(80u32, 2usize), (160, 4), (320, 8), (400, 10), (1000, 25)] {
            assert_eq!(ms_to_frame(ms, 25.0).unwrap(), frame, "{ms} ms");
        }
        // half-up rounding: 60 ms at 25 fps = 1.5 frames → 2
        assert_eq!(ms_to_frame(60, 25.0).unwrap(), 2);
        assert_eq!(ms_to_frame(50, 50.0).unwrap(), 3); // 2.5 → 3
        assert!(ms_to_frame(10, 25.0).is_err());
    }

    fn tiny_corpus() -> (tempfile::TempDir, DatasetManifest, Model) {
        let spec = SynthSpec {
            n_categories: 2,
            n_subjects: 2,
            seqs_per_pair: 2,
            n_joints: 5,
            obs_len: 6,
            horizon: 4,
            fps: 25.0,
            seed: 5,
        };
        let dir = tempdir().unwrap();
        let manifest = gen_synthetic(&spec, dir.path()).unwrap();
        let cfg = ModelConfig {
            n_joints: 5,
            obs_len: 6,
            horizon: 4,
            channels: 8,
            n_shared_blocks: 1,
            heads: 2,
            head_dim: 4,
            ..ModelConfig::miniature()
        };
        let model = Model::new(cfg, tree_topology(5).unwrap()).unwrap();
        (dir, manifest, model)
    }

    #[test]
    fn zero_network_errors_match_frozen_pose_oracle() {
        let (_dir, manifest, model) = tiny_corpus();
        let params = ParamSet::zeros(model.config());
        let report = evaluate(
            &model,
            &params,
            &manifest,
            &MetaConfig::default(),
            &[80, 160],
            false,
            0,
            0.04,
        )
        .unwrap();
        assert_eq!(report.sequences.len(), manifest.entries.len());
        // frozen-pose prediction: error at each horizon equals the distance
        // between the seed pose and the future frame
        for (idx, s) in report.sequences.iter().enumerate() {
            let seq = manifest.load_sequence(idx).unwrap();
            let seed_pose = seq.slice_frames(5, 6).unwrap();
            for &(ms, v) in &s.horizon_mpjpe {
                let f = ms_to_frame(ms, 25.0).unwrap();
                let gt = seq.slice_frames(5 + f, 6 + f).unwrap();
                let oracle = mpjpe(seed_pose.frames(), gt.frames()).unwrap();
                assert!((v - oracle).abs() < 1e-9, "{ms} ms: {v} vs {oracle}");
            }
        }
    }

    #[test]
    fn aggregates_are_arithmetic_means() {
        let (_dir, manifest, model) = tiny_corpus();
        let params = ParamSet::init(model.config(), 3);
        let report = evaluate(
            &model,
            &params,
            &manifest,
            &MetaConfig::default(),
            &[80, 160],
            false,
            1,
            0.04,
        )
        .unwrap();
        let cats = report.per_category();
        for (id, stats) in &cats {
            let members: Vec<&SequenceEval> = report
                .sequences
                .iter()
                .filter(|s| &s.category == id)
                .collect();
            let hand: f64 =
                members.iter().map(|m| m.mean_mpjpe).sum::<f64>() / members.len() as f64;
            assert!((stats.mean - hand).abs() < 1e-12);
            for (i, &(_, v)) in stats.per_horizon.iter().enumerate() {
                let hand: f64 = members.iter().map(|m| m.horizon_mpjpe[i].1).sum::<f64>()
                    / members.len() as f64;
                assert!((v - hand).abs() < 1e-12);
            }
        }
        let overall = report.overall();
        assert_eq!(overall.n_sequences, report.sequences.len());
    }

    #[test]
    fn csv_layout_and_row_count() {
        let (_dir, manifest, model) = tiny_corpus();
        let params = ParamSet::zeros(model.config());
        let report = evaluate(
            &model,
            &params,
            &manifest,
            &MetaConfig::default(),
            &[80, 160, 160],
            false,
            0,
            0.04,
        )
        .unwrap();
        let csv = report.to_csv();
        let main: Vec<&str> = csv.split("\n\n").next().unwrap().lines().collect();
        assert_eq!(main[0], "sequence,subject,category,horizon_ms,mpjpe_mm");
        assert_eq!(main.len() - 1, manifest.entries.len() * 3);
        assert!(csv.contains("scope,id,horizon_ms,mpjpe_mm"));
        assert!(csv.contains("overall,all,all,"));
        assert!(csv.contains("sequence_mean,"));
    }

    #[test]
    fn tta_flag_false_equals_zero_steps() {
        let (_dir, manifest, model) = tiny_corpus();
        let params = ParamSet::init(model.config(), 9);
        let cfg_zero = MetaConfig {
            tta_steps: 0,
            ..Default::default()
        };
        let a = evaluate(&model, &params, &manifest, &cfg_zero, &[80], true, 4, 0.04).unwrap();
        let b = evaluate(
            &model,
            &params,
            &manifest,
            &MetaConfig::default(),
            &[80],
            false,
            4,
            0.04,
        )
        .unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn horizon_beyond_prediction_range_rejected() {
        let (_dir, manifest, model) = tiny_corpus();
        let params = ParamSet::zeros(model.config());
        let err = evaluate(
            &model,
            &params,
            &manifest,
            &MetaConfig::default(),
            &[1000],
            false,
            0,
            0.04,
        );
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (_dir, manifest, model) = tiny_corpus();
        let params = ParamSet::init(model.config(), 2);
        let cfg = MetaConfig {
            alpha: 1e-5,
            tta_steps: 2,
            ..Default::default()
        };
        let a = evaluate(&model, &params, &manifest, &cfg, &[80, 160], true, 3, 0.04).unwrap();
        let b = evaluate(&model, &params, &manifest, &cfg, &[80, 160], true, 3, 0.04).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        // a different seed changes the companions, hence the adapted output
        let c = evaluate(&model, &params, &manifest, &cfg, &[80, 160], true, 4, 0.04).unwrap();
        assert_ne!(a.to_csv(), c.to_csv());
    }
}
