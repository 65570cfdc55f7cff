//! Joint pre-training of the three branches over mini-batches.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{joint_loss_grads, joint_losses, LossParts};
use crate::model::forward::{Model, WhichOutputs};
use crate::model::ParamSet;
use crate::seeds::rng_for;
use crate::selfsup::SampleTask;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs between successive rate decays.
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Bone-length weight in the forecast loss.
    pub eta: f64,
    /// Bone-length weight in the repair loss.
    pub mu: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            decay_factor: 0.98,
            decay_every: 2,
            batch_size: 16,
            epochs: 10,
            eta: 0.04,
            mu: 0.04,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and ≥ 0".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_every and batch_size must be ≥ 1".into()));
        }
        if self.eta < 0.0 || self.mu < 0.0 {
            return Err(Error::Config("eta and mu must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Step-decayed rate for a 0-based epoch index.
    pub fn rate_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// One logged line: batch-mean branch losses at a global optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_pri: f64,
    pub loss_aux1: f64,
    pub loss_aux2: f64,
    pub lr: f64,
}

impl TrainLogRow {
    pub fn joint(&self) -> f64 {
        self.loss_pri + self.loss_aux1 + self.loss_aux2
    }

    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.step, self.loss_pri, self.loss_aux1, self.loss_aux2, self.lr
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!(
                "training log line needs 6 fields, got {}",
                fields.len()
            )));
        }
        let num =
            |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
        Ok(Self {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad epoch {:?}", fields[0])))?,
            step: fields[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad step {:?}", fields[1])))?,
            loss_pri: num(fields[2])?,
            loss_aux1: num(fields[3])?,
            loss_aux2: num(fields[4])?,
            lr: num(fields[5])?,
        })
    }
}

pub fn parse_train_log(text: &str) -> Result<Vec<TrainLogRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(TrainLogRow::parse)
        .collect()
}

/// Batch-mean losses and the batch-mean parameter gradient of the joint
/// objective. Tasks are evaluated independently (parallel-safe) and reduced
/// in index order, so results do not depend on thread count.
pub fn batch_gradient(
    model: &Model,
    params: &ParamSet,
    batch: &[&SampleTask],
    eta: f64,
    mu: f64,
) -> Result<(LossParts, ParamSet)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let per_task: Vec<(LossParts, ParamSet)> = batch
        .par_iter()
        .map(|task| -> Result<(LossParts, ParamSet)> {
            let (out, cache) = model.forward(params, task, WhichOutputs::all())?;
            let parts = joint_losses(&out, task, model.topology(), eta, mu)?;
            let grads_out = joint_loss_grads(&out, task, model.topology(), eta, mu)?;
            let grad = model.backward(params, &cache, &grads_out)?;
            Ok((parts, grad))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut parts = LossParts {
        pri: 0.0,
        aux1: 0.0,
        aux2: 0.0,
    };
    let mut grad = ParamSet::zeros(model.config());
    for (p, g) in &per_task {
        parts.pri += p.pri;
        parts.aux1 += p.aux1;
        parts.aux2 += p.aux2;
        grad.axpy(1.0, g);
    }
    parts.pri *= scale;
    parts.aux1 *= scale;
    parts.aux2 *= scale;
    grad.scale(scale);
    Ok((parts, grad))
}

/// Mean branch losses over a whole dataset with the current parameters.
pub fn dataset_losses(
    model: &Model,
    params: &ParamSet,
    tasks: &[SampleTask],
    eta: f64,
    mu: f64,
) -> Result<LossParts> {
    if tasks.is_empty() {
        return Err(Error::Precondition("empty dataset".into()));
    }
    let per_task: Vec<LossParts> = tasks
        .par_iter()
        .map(|task| -> Result<LossParts> {
            let (out, _) = model.forward(params, task, WhichOutputs::all())?;
            joint_losses(&out, task, model.topology(), eta, mu)
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / tasks.len() as f64;
    let mut parts = LossParts {
        pri: 0.0,
        aux1: 0.0,
        aux2: 0.0,
    };
    for p in &per_task {
        parts.pri += p.pri;
        parts.aux1 += p.aux1;
        parts.aux2 += p.aux2;
    }
    parts.pri *= scale;
    parts.aux1 *= scale;
    parts.aux2 *= scale;
    Ok(parts)
}

/// Runs Adam over shuffled mini-batches of the joint objective. The first
/// logged line (step 0) is the dataset mean at initialization; each later
/// line is one optimizer step's batch mean. Log lines stream to `log`.
pub fn pretrain(
    model: &Model,
    tasks: &[SampleTask],
    init: &ParamSet,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<ParamSet> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Precondition("empty task list".into()));
    }
    let mut params = init.clone();
    let mut opt = crate::optim::AdamState::new(model.config());

    let initial = dataset_losses(model, &params, tasks, cfg.eta, cfg.mu)?;
    let row = TrainLogRow {
        epoch: 0,
        step: 0,
        loss_pri: initial.pri,
        loss_aux1: initial.aux1,
        loss_aux2: initial.aux2,
        lr: cfg.rate_at_epoch(0),
    };
    writeln!(log, "{}", row.to_line()).map_err(|e| Error::io("training log", e))?;

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.rate_at_epoch(epoch);
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        let mut rng = rng_for(cfg.seed, &[0x3a1b, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SampleTask> = chunk.iter().map(|&i| &tasks[i]).collect();
            let (parts, grad) = batch_gradient(model, &params, &batch, cfg.eta, cfg.mu)?;
            if !parts.joint().is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch} step {step}: pri {} aux1 {} aux2 {}",
                    parts.pri, parts.aux1, parts.aux2
                )));
            }
            opt.step(&mut params, &grad, lr);
            if !params.all_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite parameters after epoch {epoch} step {step}"
                )));
            }
            step += 1;
            let row = TrainLogRow {
                epoch,
                step,
                loss_pri: parts.pri,
                loss_aux1: parts.aux1,
                loss_aux2: parts.aux2,
                lr,
            };
            writeln!(log, "{}", row.to_line()).map_err(|e| Error::io("training log", e))?;
        }
    }
    Ok(params)
}
