//! End-to-end finite-difference validation of the analytic gradients: every
//! parameter group, all four objectives, central differences in f64.

use ndarray::Array3;
use rand::Rng;

use crate::error::Result;
use crate::losses::{
    joint_losses, loss_aux1_grad, loss_aux2_grad, loss_pri_grad, LossParts,
};
use crate::model::forward::{Model, WhichOutputs};
use crate::model::{OutputGrads, ModelConfig, ParamSet};
use crate::motion::MotionSequence;
use crate::seeds::rng_for;
use crate::selfsup::SampleTask;

pub const LOSS_NAMES: [&str; 4] = ["pri", "aux1", "aux2", "joint"];

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub fd_step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Entries probed per parameter group (all of them when the group is
    /// smaller). Probes are drawn deterministically from `seed`.
    pub entries_per_group: usize,
    pub seed: u64,
    /// Bone-length weight in the forecast loss.
    pub eta: f64,
    /// Bone-length weight in the repair loss.
    pub mu: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            tolerance: 1e-4,
            entries_per_group: 5,
            seed: 0,
            eta: 0.04,
            mu: 0.04,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: String,
    pub checked_entries: usize,
    /// Worst relative error per objective, ordered as [`LOSS_NAMES`].
    pub max_rel: [f64; 4],
}

impl GroupCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
    pub fd_step: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(GroupCheck::worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tolerance
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups
            .iter()
            .filter(|g| g.worst() > self.tolerance)
            .map(|g| g.group.as_str())
            .collect()
    }

    /// One line per parameter group, worst error across objectives.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let status = if g.worst() <= self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{:<40} entries {:>3}  max_rel {:+.3e}  {}\n",
                g.group, g.checked_entries, g.worst(), status
            ));
        }
        s.push_str(&format!(
            "worst {:.3e} (tolerance {:.1e}, fd step {:.1e})\n",
            self.worst(),
            self.tolerance,
            self.fd_step
        ));
        s
    }
}

/// A deterministic sample for the check: smooth multi-frequency joint
/// trajectories with a little jitter, away from the loss kinks.
pub fn fixture_task(cfg: &ModelConfig, seed: u64) -> Result<SampleTask> {
    let (t, n) = (cfg.obs_len, cfg.n_joints);
    let total = t + cfg.horizon;
    let mut rng = rng_for(seed, &[0x6f1d]);
    let mut frames = Array3::zeros((total, n, 3));
    for f in 0..total {
        for j in 0..n {
            for k in 0..3 {
                frames[[f, j, k]] = 90.0 * j as f64
                    + 20.0 * ((f as f64) * (0.4 + 0.1 * k as f64) + j as f64).sin()
                    + rng.random_range(-1.5..1.5);
            }
        }
    }
    let seq = MotionSequence::new(frames, 25.0)?;
    let mut rng = rng_for(seed, &[0x6f1e]);
    SampleTask::from_sequence(
        &seq,
        t,
        cfg.horizon,
        cfg.corruption_ratio,
        "fixture".into(),
        "fixture".into(),
        &mut rng,
    )
}

fn losses_of(model: &Model, params: &ParamSet, task: &SampleTask, eta: f64, mu: f64) -> Result<[f64; 4]> {
    let (out, _) = model.forward(params, task, WhichOutputs::all())?;
    let parts: LossParts = joint_losses(&out, task, model.topology(), eta, mu)?;
    Ok([parts.pri, parts.aux1, parts.aux2, parts.joint()])
}

/// Runs the suite; `corrupt_group`, when set, perturbs that group's analytic
/// gradient before comparison — a negative control that must fail.
pub fn run_gradcheck_with_corruption(
    model: &Model,
    check: &GradCheckConfig,
    corrupt_group: Option<&str>,
) -> Result<GradCheckReport> {
    let cfg = model.config();
    let params = ParamSet::init(cfg, check.seed);
    let task = fixture_task(cfg, check.seed)?;
    let topo = model.topology();

    let (out, cache) = model.forward(&params, &task, WhichOutputs::all())?;
    let g_pred = loss_pri_grad(out.prediction()?, &task.target, topo, check.eta)?;
    let g_prob = loss_aux1_grad(out.scramble_prob()?, task.scramble_label)?;
    let g_rep = loss_aux2_grad(out.repaired()?, &task.observation, topo, check.mu)?;

    let mut analytic = vec![
        model.backward(
            &params,
            &cache,
            &OutputGrads {
                prediction: Some(g_pred.clone()),
                ..Default::default()
            },
        )?,
        model.backward(
            &params,
            &cache,
            &OutputGrads {
                scramble_prob: Some(g_prob),
                ..Default::default()
            },
        )?,
        model.backward(
            &params,
            &cache,
            &OutputGrads {
                repaired: Some(g_rep.clone()),
                ..Default::default()
            },
        )?,
        model.backward(
            &params,
            &cache,
            &OutputGrads {
                prediction: Some(g_pred),
                scramble_prob: Some(g_prob),
                repaired: Some(g_rep),
            },
        )?,
    ];

    if let Some(target) = corrupt_group {
        for set in analytic.iter_mut() {
            for (name, mut view) in set.groups_mut() {
                if name == target {
                    view += 1.0;
                }
            }
        }
    }

    let names: Vec<String> = params.groups().into_iter().map(|(n, _)| n).collect();
    let h = check.fd_step;
    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let len = params.groups()[gi].1.len();
        let picks: Vec<usize> = if len <= check.entries_per_group {
            (0..len).collect()
        } else {
            let mut rng = rng_for(check.seed, &[0x9c4e, gi as u64]);
            let mut v = rand::seq::index::sample(&mut rng, len, check.entries_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_rel = [0.0f64; 4];
        for &flat in &picks {
            let probe = |delta: f64| -> Result<[f64; 4]> {
                let mut p = params.clone();
                {
                    let mut gs = p.groups_mut();
                    let (_, view) = &mut gs[gi];
                    *view.iter_mut().nth(flat).expect("index in range") += delta;
                }
                losses_of(model, &p, &task, check.eta, check.mu)
            };
            let mut rels = [f64::INFINITY; 4];
            // The losses are only piecewise smooth (|·| in the bone terms,
            // LeakyReLU in the scramble head). A secant that straddles a kink
            // misreports an otherwise correct gradient, so shrink the step
            // and keep the best agreement; a wrong gradient stays wrong at
            // every step.
            for step in [h, h / 10.0, h / 100.0] {
                let up = probe(step)?;
                let dn = probe(-step)?;
                for k in 0..4 {
                    let fd = (up[k] - dn[k]) / (2.0 * step);
                    let an = *analytic[k].groups()[gi].1.iter().nth(flat).expect("index");
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    if rel < rels[k] {
                        rels[k] = rel;
                    }
                }
                if rels.iter().all(|&r| r <= check.tolerance) {
                    break;
                }
            }
            for k in 0..4 {
                if rels[k] > max_rel[k] {
                    max_rel[k] = rels[k];
                }
            }
        }
        groups.push(GroupCheck {
            group: name.clone(),
            checked_entries: picks.len(),
            max_rel,
        });
    }

    Ok(GradCheckReport {
        groups,
        tolerance: check.tolerance,
        fd_step: check.fd_step,
    })
}

pub fn run_gradcheck(model: &Model, check: &GradCheckConfig) -> Result<GradCheckReport> {
    run_gradcheck_with_corruption(model, check, None)
}
