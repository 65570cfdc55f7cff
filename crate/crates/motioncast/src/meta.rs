//! Meta-auxiliary training and test-time adaptation.
//!
//! The inner loop descends the two self-supervised losses on one sample; the
//! outer loop descends the forecast loss evaluated at the adapted weights, so
//! that a few inner steps at test time specialize the forecaster.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{aux_loss_grads, loss_aux1, loss_aux2, loss_pri, loss_pri_grad};
use crate::model::forward::{Model, WhichOutputs};
use crate::model::{OutputGrads, ParamSet};
use crate::motion::MotionSequence;
use crate::pretrain::TrainLogRow;
use crate::seeds::rng_for;
use crate::selfsup::SampleTask;

/// Displacement used by the finite-difference Hessian-vector product in
/// `exact` mode, divided by the direction's largest entry.
const HVP_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaOrder {
    /// Outer gradient taken at the adapted weights, inner step held constant.
    First,
    /// Outer gradient differentiated through one inner step.
    Exact,
}

impl std::str::FromStr for MetaOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Self::First),
            "exact" => Ok(Self::Exact),
            other => Err(Error::Config(format!(
                "unknown order {other:?}, expected first|exact"
            ))),
        }
    }
}

impl std::fmt::Display for MetaOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetaConfig {
    /// Inner (adaptation) rate.
    pub alpha: f64,
    /// Outer (meta) rate.
    pub beta: f64,
    /// Inner steps per task during meta-training.
    pub inner_steps_train: usize,
    /// Adaptation steps at test time.
    pub tta_steps: usize,
    /// Tasks per meta-batch.
    pub meta_batch: usize,
    pub order: MetaOrder,
    /// Redraw scramble/corruption companions before every adaptation step
    /// instead of fixing them once per sequence.
    pub tta_resample: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 2e-5,
            beta: 2e-5,
            inner_steps_train: 1,
            tta_steps: 6,
            meta_batch: 16,
            order: MetaOrder::First,
            tta_resample: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite and ≥ 0".into()));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite and ≥ 0".into()));
        }
        if self.meta_batch == 0 {
            return Err(Error::Config("meta_batch must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Auxiliary-loss trajectory over adaptation: row i is the state after i
/// steps (row 0 is pre-adaptation), so `steps + 1` rows in total.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub rows: Vec<AdaptRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptRow {
    pub step: usize,
    pub loss_aux1: f64,
    pub loss_aux2: f64,
}

impl AdaptReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_aux1,loss_aux2\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.step, r.loss_aux1, r.loss_aux2));
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.loss_aux1.is_finite() && r.loss_aux2.is_finite())
    }
}

fn aux_losses_of(model: &Model, params: &ParamSet, task: &SampleTask, mu: f64) -> Result<(f64, f64)> {
    let (out, _) = model.forward(params, task, WhichOutputs::aux_only())?;
    // a disabled branch contributes no loss
    let a1 = if out.has_scramble_prob() {
        loss_aux1(out.scramble_prob()?, task.scramble_label)?
    } else {
        0.0
    };
    let a2 = if out.has_repaired() {
        loss_aux2(out.repaired()?, &task.observation, model.topology(), mu)?
    } else {
        0.0
    };
    Ok((a1, a2))
}

/// One gradient of ℒ_Aux1 + ℒ_Aux2 at `params`, with the branch losses.
fn aux_gradient(
    model: &Model,
    params: &ParamSet,
    task: &SampleTask,
    mu: f64,
) -> Result<(f64, f64, ParamSet)> {
    let (out, cache) = model.forward(params, task, WhichOutputs::aux_only())?;
    let a1 = if out.has_scramble_prob() {
        loss_aux1(out.scramble_prob()?, task.scramble_label)?
    } else {
        0.0
    };
    let a2 = if out.has_repaired() {
        loss_aux2(out.repaired()?, &task.observation, model.topology(), mu)?
    } else {
        0.0
    };
    let grads_out = aux_loss_grads(&out, task, model.topology(), mu)?;
    let grad = model.backward(params, &cache, &grads_out)?;
    Ok((a1, a2, grad))
}

type RefreshHook<'a> = &'a mut dyn FnMut(&mut SampleTask, usize) -> Result<()>;

/// The adaptation engine. `refresh`, when present, redraws the task's
/// companions after each update so the next step sees fresh ones.
fn adapt_loop(
    model: &Model,
    params: &ParamSet,
    task: &SampleTask,
    alpha: f64,
    steps: usize,
    mu: f64,
    mut refresh: Option<RefreshHook<'_>>,
) -> Result<(ParamSet, AdaptReport)> {
    let mut adapted = params.clone();
    let mut rows = Vec::with_capacity(steps + 1);
    let mut task_now = task.clone();
    for step in 0..steps {
        let (a1, a2, grad) = aux_gradient(model, &adapted, &task_now, mu)?;
        rows.push(AdaptRow {
            step,
            loss_aux1: a1,
            loss_aux2: a2,
        });
        if !grad.all_finite() {
            return Err(Error::Diverged(format!(
                "non-finite adaptation gradient at step {step}"
            )));
        }
        if alpha != 0.0 {
            adapted.axpy(-alpha, &grad);
        }
        if let Some(hook) = refresh.as_mut() {
            hook(&mut task_now, step)?;
        }
    }
    let (a1, a2) = aux_losses_of(model, &adapted, &task_now, mu)?;
    rows.push(AdaptRow {
        step: steps,
        loss_aux1: a1,
        loss_aux2: a2,
    });
    Ok((adapted, AdaptReport { rows }))
}

/// Plain gradient descent on the sample's self-supervised losses. The input
/// is never mutated; with `alpha == 0` or `steps == 0` the returned copy is
/// bit-identical.
pub fn inner_adapt(
    model: &Model,
    params: &ParamSet,
    task: &SampleTask,
    alpha: f64,
    steps: usize,
    mu: f64,
) -> Result<ParamSet> {
    let (adapted, _) = inner_adapt_report(model, params, task, alpha, steps, mu)?;
    Ok(adapted)
}

/// [`inner_adapt`] plus the loss trajectory.
pub fn inner_adapt_report(
    model: &Model,
    params: &ParamSet,
    task: &SampleTask,
    alpha: f64,
    steps: usize,
    mu: f64,
) -> Result<(ParamSet, AdaptReport)> {
    adapt_loop(model, params, task, alpha, steps, mu, None)
}

/// Deterministic task order for a meta-training epoch.
pub fn meta_batch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, &[0x8e7a, epoch as u64]);
    order.shuffle(&mut rng);
    order
}

/// Forecast loss and its parameter gradient at `params` for one task.
fn pri_gradient(
    model: &Model,
    params: &ParamSet,
    task: &SampleTask,
    eta: f64,
) -> Result<(f64, ParamSet)> {
    let (out, cache) = model.forward(params, task, WhichOutputs::pri_only())?;
    let loss = loss_pri(out.prediction()?, &task.target, model.topology(), eta)?;
    let grads_out = OutputGrads {
        prediction: Some(loss_pri_grad(
            out.prediction()?,
            &task.target,
            model.topology(),
            eta,
        )?),
        ..Default::default()
    };
    let grad = model.backward(params, &cache, &grads_out)?;
    Ok((loss, grad))
}

/// Dot-free meta-gradient for one task. In `first` mode this is the forecast
/// gradient at the adapted weights. In `exact` mode (one inner step) the
/// inner update is differentiated through, using a central finite-difference
/// Hessian-vector product of the auxiliary objective:
///   g = g_t − α · H_aux(ψ) · g_t,  g_t = ∇ℒ_Pri(ψ̃).
fn task_meta_gradient(
    model: &Model,
    params: &ParamSet,
    task: &SampleTask,
    cfg: &MetaConfig,
    eta: f64,
    mu: f64,
) -> Result<(f64, f64, f64, ParamSet)> {
    let (pre_a1, pre_a2) = aux_losses_of(model, params, task, mu)?;
    let adapted = inner_adapt(model, params, task, cfg.alpha, cfg.inner_steps_train, mu)?;
    let (loss, g_t) = pri_gradient(model, &adapted, task, eta)?;
    let grad = match cfg.order {
        MetaOrder::First => g_t,
        MetaOrder::Exact => {
            if cfg.inner_steps_train > 1 {
                return Err(Error::Precondition(
                    "exact meta-gradients support a single inner step".into(),
                ));
            }
            if cfg.inner_steps_train == 0 || cfg.alpha == 0.0 {
                g_t
            } else {
                let vmax = g_t
                    .groups()
                    .iter()
                    .flat_map(|(_, v)| v.iter().cloned())
                    .fold(0.0f64, |a, b| a.max(b.abs()));
                if vmax == 0.0 {
                    g_t
                } else {
                    let r = HVP_STEP / vmax;
                    let mut plus = params.clone();
                    plus.axpy(r, &g_t);
                    let mut minus = params.clone();
                    minus.axpy(-r, &g_t);
                    let (_, _, g_plus) = aux_gradient(model, &plus, task, mu)?;
                    let (_, _, g_minus) = aux_gradient(model, &minus, task, mu)?;
                    // hvp = (∇aux(ψ+r·v) − ∇aux(ψ−r·v)) / 2r
                    let mut g = g_t;
                    let scale = -cfg.alpha / (2.0 * r);
                    g.axpy(scale, &g_plus);
                    g.axpy(-scale, &g_minus);
                    g
                }
            }
        }
    };
    Ok((loss, pre_a1, pre_a2, grad))
}

/// Meta-training: inner-adapt each task of a batch, take the forecast
/// gradient at the adapted weights, and apply the summed gradient to the
/// shared starting point. Log lines reuse the training format; `loss_pri` is
/// the batch-mean forecast loss at the adapted weights, the aux columns are
/// pre-adaptation means, and the rate column is β.
pub fn meta_train(
    model: &Model,
    init: &ParamSet,
    tasks: &[SampleTask],
    cfg: &MetaConfig,
    epochs: usize,
    eta: f64,
    mu: f64,
    seed: u64,
    log: &mut dyn Write,
) -> Result<ParamSet> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Precondition("empty task list".into()));
    }
    let mut params = init.clone();
    let mut step = 0usize;
    for epoch in 0..epochs {
        let order = meta_batch_order(seed, epoch, tasks.len());
        for chunk in order.chunks(cfg.meta_batch) {
            let per_task: Vec<(f64, f64, f64, ParamSet)> = chunk
                .par_iter()
                .map(|&i| task_meta_gradient(model, &params, &tasks[i], cfg, eta, mu))
                .collect::<Result<Vec<_>>>()?;
            let mut total = ParamSet::zeros(model.config());
            let mut mean_pri = 0.0;
            let mut mean_a1 = 0.0;
            let mut mean_a2 = 0.0;
            for (loss, a1, a2, g) in &per_task {
                mean_pri += loss;
                mean_a1 += a1;
                mean_a2 += a2;
                total.axpy(1.0, g);
            }
            let k = per_task.len() as f64;
            mean_pri /= k;
            mean_a1 /= k;
            mean_a2 /= k;
            if !mean_pri.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite meta-loss at epoch {epoch} step {step}: {mean_pri}"
                )));
            }
            if cfg.beta != 0.0 {
                params.axpy(-cfg.beta, &total);
                if !params.all_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite parameters after epoch {epoch} step {step}"
                    )));
                }
            }
            step += 1;
            let row = TrainLogRow {
                epoch,
                step,
                loss_pri: mean_pri,
                loss_aux1: mean_a1,
                loss_aux2: mean_a2,
                lr: cfg.beta,
            };
            writeln!(log, "{}", row.to_line()).map_err(|e| Error::io("meta log", e))?;
        }
    }
    Ok(params)
}

/// Adapts a fresh copy of the weights on the observation's self-supervised
/// companions, then forecasts. The input weights are untouched, so distinct
/// test sequences are independent.
pub fn tta_predict(
    model: &Model,
    params: &ParamSet,
    observation: &MotionSequence,
    cfg: &MetaConfig,
    eval_seed: u64,
    mu: f64,
) -> Result<(MotionSequence, AdaptReport)> {
    cfg.validate()?;
    let task = model.companion_task(observation, eval_seed)?;
    let ratio = model.config().corruption_ratio;
    let (adapted, report) = if cfg.tta_resample {
        let mut hook = |t: &mut SampleTask, step: usize| -> Result<()> {
            let mut rng = rng_for(eval_seed, &[0xada7, step as u64 + 1]);
            t.resample_companions(ratio, &mut rng)
        };
        adapt_loop(model, params, &task, cfg.alpha, cfg.tta_steps, mu, Some(&mut hook))?
    } else {
        inner_adapt_report(model, params, &task, cfg.alpha, cfg.tta_steps, mu)?
    };
    let (out, _) = model.forward(&adapted, &task, WhichOutputs::pri_only())?;
    Ok((out.prediction()?.clone(), report))
}
