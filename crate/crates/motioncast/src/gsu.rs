//! Gated sharing units: the cross-branch message channel. A unit reads a
//! source-branch feature `c`, gates a transformed copy of it, and adds the
//! result onto the destination feature:
//!
//! `out = sigmoid(W c + b) ⊗ leaky_relu(U c + e) + h_prev`
//!
//! One parameter set serves every joint-frame position of its (layer,
//! direction) slot.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_deriv, sigmoid, sigmoid_deriv_from_output};

#[derive(Debug, Clone, PartialEq)]
pub struct GsuParams {
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
    pub msg_u: Array2<f64>,
    pub msg_e: Array1<f64>,
}

impl GsuParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            gate_w: Array2::zeros((channels, channels)),
            gate_b: Array1::zeros(channels),
            msg_u: Array2::zeros((channels, channels)),
            msg_e: Array1::zeros(channels),
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        let ok = self.gate_w.dim() == (channels, channels)
            && self.gate_b.len() == channels
            && self.msg_u.dim() == (channels, channels)
            && self.msg_e.len() == channels;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "gsu params inconsistent with C={channels}"
            )))
        }
    }
}

/// Single-position application on C-vectors.
pub fn gsu_forward(
    src: ArrayView1<'_, f64>,
    dst_prev: ArrayView1<'_, f64>,
    params: &GsuParams,
) -> Result<Array1<f64>> {
    let c = src.len();
    params.check(c)?;
    if dst_prev.len() != c {
        return Err(Error::Shape(format!(
            "src has {c} channels, dst {}",
            dst_prev.len()
        )));
    }
    let gate_pre = src.dot(&params.gate_w) + &params.gate_b;
    let msg_pre = src.dot(&params.msg_u) + &params.msg_e;
    let mut out = dst_prev.to_owned();
    for i in 0..c {
        out[i] += sigmoid(gate_pre[i]) * leaky_relu(msg_pre[i]);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GsuCache {
    src: Array2<f64>,
    gate_pre: Array2<f64>,
    msg_pre: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GsuGrads {
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
    pub msg_u: Array2<f64>,
    pub msg_e: Array1<f64>,
}

/// Batched application over position-major rows (`P×C`); each row is one
/// joint-frame position.
pub fn gsu_forward_batch(
    src: ArrayView2<'_, f64>,
    dst_prev: ArrayView2<'_, f64>,
    params: &GsuParams,
) -> Result<(Array2<f64>, GsuCache)> {
    let c = src.shape()[1];
    params.check(c)?;
    if dst_prev.shape() != src.shape() {
        return Err(Error::Shape(format!(
            "src {:?} vs dst {:?}",
            src.shape(),
            dst_prev.shape()
        )));
    }
    let gate_pre = src.dot(&params.gate_w) + &params.gate_b;
    let msg_pre = src.dot(&params.msg_u) + &params.msg_e;
    let mut out = dst_prev.to_owned();
    for ((p, i), o) in out.indexed_iter_mut() {
        *o += sigmoid(gate_pre[[p, i]]) * leaky_relu(msg_pre[[p, i]]);
    }
    let cache = GsuCache {
        src: src.to_owned(),
        gate_pre,
        msg_pre,
    };
    Ok((out, cache))
}

/// Backward of [`gsu_forward_batch`]: returns parameter gradients plus the
/// gradients on the source and destination features.
pub fn gsu_backward_batch(
    params: &GsuParams,
    cache: &GsuCache,
    grad_out: ArrayView2<'_, f64>,
) -> (GsuGrads, Array2<f64>, Array2<f64>) {
    let grad_dst = grad_out.to_owned();
    let mut grad_gate_pre = Array2::zeros(cache.gate_pre.raw_dim());
    let mut grad_msg_pre = Array2::zeros(cache.msg_pre.raw_dim());
    for ((p, i), &g) in grad_out.indexed_iter() {
        let gate = sigmoid(cache.gate_pre[[p, i]]);
        let msg = leaky_relu(cache.msg_pre[[p, i]]);
        grad_gate_pre[[p, i]] = g * msg * sigmoid_deriv_from_output(gate);
        grad_msg_pre[[p, i]] = g * gate * leaky_relu_deriv(cache.msg_pre[[p, i]]);
    }
    let grads = GsuGrads {
        gate_w: cache.src.t().dot(&grad_gate_pre),
        gate_b: grad_gate_pre.sum_axis(Axis(0)),
        msg_u: cache.src.t().dot(&grad_msg_pre),
        msg_e: grad_msg_pre.sum_axis(Axis(0)),
    };
    let grad_src = grad_gate_pre.dot(&params.gate_w.t()) + grad_msg_pre.dot(&params.msg_u.t());
    (grads, grad_src, grad_dst)
}
