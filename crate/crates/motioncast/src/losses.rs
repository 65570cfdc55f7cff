//! Training objectives for the three branches, with closed-form gradients on
//! the head outputs (fed to [`Model::backward`]).

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::metrics::{bone_length_loss, bone_length_loss_grad, mpjpe, mpjpe_grad};
use crate::model::forward::ForwardOutput;
use crate::model::OutputGrads;
use crate::motion::MotionSequence;
use crate::selfsup::SampleTask;
use crate::skeleton::SkeletonTopology;

/// Probability floor for the scramble cross-entropy; keeps log() finite.
pub const BCE_CLAMP: f64 = 1e-12;

/// Forecast objective: joint-position error plus a bone-length penalty
/// weighted by `eta`.
pub fn loss_pri(
    prediction: &MotionSequence,
    target: &MotionSequence,
    topo: &SkeletonTopology,
    eta: f64,
) -> Result<f64> {
    Ok(mpjpe(prediction.frames(), target.frames())?
        + eta * bone_length_loss(target.frames(), prediction.frames(), topo)?)
}

/// Scramble-detection objective: binary cross-entropy against the 0/1 label.
pub fn loss_aux1(prob: f64, label: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Value(format!(
            "probability outside the unit interval: {prob}"
        )));
    }
    let p = prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    Ok(match label {
        1 => -p.ln(),
        0 => -(1.0 - p).ln(),
        other => {
            return Err(Error::Value(format!(
                "scramble label must be 0 or 1, got {other}"
            )))
        }
    })
}

/// Repair objective: position error of the reconstruction against the clean
/// observation, plus a bone-length penalty weighted by `mu`.
pub fn loss_aux2(
    repaired: &MotionSequence,
    observation: &MotionSequence,
    topo: &SkeletonTopology,
    mu: f64,
) -> Result<f64> {
    Ok(mpjpe(repaired.frames(), observation.frames())?
        + mu * bone_length_loss(observation.frames(), repaired.frames(), topo)?)
}

/// Branch losses of one sample, and their unweighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub pri: f64,
    pub aux1: f64,
    pub aux2: f64,
}

impl LossParts {
    pub fn joint(&self) -> f64 {
        self.pri + self.aux1 + self.aux2
    }
}

/// Evaluates all three branch losses on one forward output.
pub fn joint_losses(
    output: &ForwardOutput,
    task: &SampleTask,
    topo: &SkeletonTopology,
    eta: f64,
    mu: f64,
) -> Result<LossParts> {
    // a branch that is disabled (or simply not requested) contributes zero
    Ok(LossParts {
        pri: if output.has_prediction() {
            loss_pri(output.prediction()?, &task.target, topo, eta)?
        } else {
            0.0
        },
        aux1: if output.has_scramble_prob() {
            loss_aux1(output.scramble_prob()?, task.scramble_label)?
        } else {
            0.0
        },
        aux2: if output.has_repaired() {
            loss_aux2(output.repaired()?, &task.observation, topo, mu)?
        } else {
            0.0
        },
    })
}

fn grad_position_loss(
    output: &MotionSequence,
    reference: &MotionSequence,
    topo: &SkeletonTopology,
    weight: f64,
) -> Result<Array3<f64>> {
    let mut g = mpjpe_grad(output.frames(), reference.frames())?;
    if weight != 0.0 {
        g.scaled_add(
            weight,
            &bone_length_loss_grad(reference.frames(), output.frames(), topo)?,
        );
    }
    Ok(g)
}

/// d L_Pri / d prediction.
pub fn loss_pri_grad(
    prediction: &MotionSequence,
    target: &MotionSequence,
    topo: &SkeletonTopology,
    eta: f64,
) -> Result<Array3<f64>> {
    grad_position_loss(prediction, target, topo, eta)
}

/// d BCE / d p̃, with the same clamping as the loss. Inside the clamp band
/// the loss is constant, so the gradient there is zero.
pub fn loss_aux1_grad(prob: f64, label: u8) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::Value(format!(
            "probability outside the unit interval: {prob}"
        )));
    }
    if prob < BCE_CLAMP || prob > 1.0 - BCE_CLAMP {
        return Ok(0.0);
    }
    Ok(match label {
        1 => -1.0 / prob,
        0 => 1.0 / (1.0 - prob),
        other => {
            return Err(Error::Value(format!(
                "scramble label must be 0 or 1, got {other}"
            )))
        }
    })
}

/// d L_Aux2 / d repaired.
pub fn loss_aux2_grad(
    repaired: &MotionSequence,
    observation: &MotionSequence,
    topo: &SkeletonTopology,
    mu: f64,
) -> Result<Array3<f64>> {
    grad_position_loss(repaired, observation, topo, mu)
}

/// Output gradients of the joint (sum) objective for one sample. Slots for
/// outputs the forward pass did not materialize stay `None`.
pub fn joint_loss_grads(
    output: &ForwardOutput,
    task: &SampleTask,
    topo: &SkeletonTopology,
    eta: f64,
    mu: f64,
) -> Result<OutputGrads> {
    let mut grads = OutputGrads::default();
    if output.has_prediction() {
        grads.prediction = Some(loss_pri_grad(output.prediction()?, &task.target, topo, eta)?);
    }
    if output.has_scramble_prob() {
        grads.scramble_prob = Some(loss_aux1_grad(output.scramble_prob()?, task.scramble_label)?);
    }
    if output.has_repaired() {
        grads.repaired = Some(loss_aux2_grad(
            output.repaired()?,
            &task.observation,
            topo,
            mu,
        )?);
    }
    Ok(grads)
}

/// Output gradients of the self-supervised sum L_Aux1 + L_Aux2 only; the
/// forecast output gets no gradient. This is the inner-loop objective.
pub fn aux_loss_grads(
    output: &ForwardOutput,
    task: &SampleTask,
    topo: &SkeletonTopology,
    mu: f64,
) -> Result<OutputGrads> {
    let mut grads = OutputGrads::default();
    if output.has_scramble_prob() {
        grads.scramble_prob = Some(loss_aux1_grad(output.scramble_prob()?, task.scramble_label)?);
    }
    if output.has_repaired() {
        grads.repaired = Some(loss_aux2_grad(
            output.repaired()?,
            &task.observation,
            topo,
            mu,
        )?);
    }
    Ok(grads)
}
