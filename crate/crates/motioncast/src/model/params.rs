//! The learnable parameter set ψ and its canonical group layout.
//!
//! Every array of weights has a stable dotted name ("shared.pri.block0.sst.w_q",
//! "aux1.fc2_b", ...). The optimizer, the meta loops, the checkpoint format
//! and the gradient checker all speak in these groups, and gradients reuse
//! [`ParamSet`] itself since they share its exact shape.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Zip};
use rand::Rng;

use crate::blocks::BlockParams;
use crate::error::{Error, Result};
use crate::gsu::GsuParams;
use crate::model::config::{ModelConfig, AUX1_FC_WIDTHS};
use crate::seeds::rng_for;

/// Per-branch shared-stack weights: input embedding plus the residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchShared {
    pub embed_w: Array2<f64>,
    pub embed_b: Array1<f64>,
    pub blocks: Vec<BlockParams>,
}

impl BranchShared {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            embed_w: Array2::zeros((3, cfg.channels)),
            embed_b: Array1::zeros(cfg.channels),
            blocks: (0..cfg.n_shared_blocks)
                .map(|_| BlockParams::zeros(cfg.channels, cfg.heads, cfg.head_dim))
                .collect(),
        }
    }
}

/// One shared layer's message units, one per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GsuLayer {
    pub a1_to_pri: GsuParams,
    pub a2_to_pri: GsuParams,
    pub pri_to_a1: GsuParams,
    pub pri_to_a2: GsuParams,
}

impl GsuLayer {
    fn zeros(channels: usize) -> Self {
        Self {
            a1_to_pri: GsuParams::zeros(channels),
            a2_to_pri: GsuParams::zeros(channels),
            pri_to_a1: GsuParams::zeros(channels),
            pri_to_a2: GsuParams::zeros(channels),
        }
    }
}

/// Head used by the forecaster and the repair branch: one task-specific
/// block followed by a per-position linear map down to 3 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub block: BlockParams,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl TaskHead {
    fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            block: BlockParams::zeros(cfg.channels, cfg.heads, cfg.head_dim),
            out_w: Array2::zeros((cfg.channels, 3)),
            out_b: Array1::zeros(3),
        }
    }
}

/// The scramble detector's FC stack down to a single logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Aux1Head {
    pub fc: Vec<(Array2<f64>, Array1<f64>)>,
}

impl Aux1Head {
    fn zeros(cfg: &ModelConfig) -> Self {
        let mut dims = vec![cfg.aux1_flat_len()];
        dims.extend_from_slice(&AUX1_FC_WIDTHS);
        dims.push(1);
        let fc = dims
            .windows(2)
            .map(|w| (Array2::zeros((w[0], w[1])), Array1::zeros(w[1])))
            .collect();
        Self { fc }
    }
}

/// Which partition a parameter group belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Shared,
    PriHead,
    Aux1Head,
    Aux2Head,
}

pub fn partition_of(group_name: &str) -> Partition {
    if group_name.starts_with("shared.") {
        Partition::Shared
    } else if group_name.starts_with("pri.") {
        Partition::PriHead
    } else if group_name.starts_with("aux1.") {
        Partition::Aux1Head
    } else {
        Partition::Aux2Head
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub pos_joint: Array2<f64>,
    pub pos_frame: Array2<f64>,
    pub pri: BranchShared,
    pub aux1: BranchShared,
    pub aux2: BranchShared,
    pub gsu: Vec<GsuLayer>,
    pub pri_head: TaskHead,
    pub aux1_head: Aux1Head,
    pub aux2_head: TaskHead,
}

macro_rules! push_attn {
    ($out:ident, $prefix:expr, $p:expr, $view:ident) => {
        $out.push((format!("{}.w_q", $prefix), $p.w_q.$view().into_dyn()));
        $out.push((format!("{}.w_k", $prefix), $p.w_k.$view().into_dyn()));
        $out.push((format!("{}.w_v", $prefix), $p.w_v.$view().into_dyn()));
        $out.push((format!("{}.w_o", $prefix), $p.w_o.$view().into_dyn()));
        $out.push((format!("{}.b_o", $prefix), $p.b_o.$view().into_dyn()));
    };
}

macro_rules! push_block {
    ($out:ident, $prefix:expr, $b:expr, $view:ident) => {
        push_attn!($out, format!("{}.sst", $prefix), $b.sst, $view);
        push_attn!($out, format!("{}.srt", $prefix), $b.srt, $view);
        push_attn!($out, format!("{}.tst", $prefix), $b.tst, $view);
        push_attn!($out, format!("{}.trt", $prefix), $b.trt, $view);
        $out.push((format!("{}.combine_w", $prefix), $b.combine_w.$view().into_dyn()));
        $out.push((format!("{}.combine_b", $prefix), $b.combine_b.$view().into_dyn()));
    };
}

macro_rules! push_gsu {
    ($out:ident, $prefix:expr, $g:expr, $view:ident) => {
        $out.push((format!("{}.gate_w", $prefix), $g.gate_w.$view().into_dyn()));
        $out.push((format!("{}.gate_b", $prefix), $g.gate_b.$view().into_dyn()));
        $out.push((format!("{}.msg_u", $prefix), $g.msg_u.$view().into_dyn()));
        $out.push((format!("{}.msg_e", $prefix), $g.msg_e.$view().into_dyn()));
    };
}

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            pos_joint: Array2::zeros((cfg.n_joints, cfg.channels)),
            pos_frame: Array2::zeros((cfg.seq_len(), cfg.channels)),
            pri: BranchShared::zeros(cfg),
            aux1: BranchShared::zeros(cfg),
            aux2: BranchShared::zeros(cfg),
            gsu: (0..cfg.n_shared_blocks)
                .map(|_| GsuLayer::zeros(cfg.channels))
                .collect(),
            pri_head: TaskHead::zeros(cfg),
            aux1_head: Aux1Head::zeros(cfg),
            aux2_head: TaskHead::zeros(cfg),
        }
    }

    /// Seeded random initialization: weight matrices get uniform values
    /// scaled by 1/sqrt(fan-in), biases start at zero, positional tables at
    /// 1/sqrt(C) spread.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut ps = Self::zeros(cfg);
        let mut rng = rng_for(seed, &[0x1a17]);
        let c = cfg.channels as f64;
        for (name, mut g) in ps.groups_mut() {
            if g.ndim() == 1 {
                continue;
            }
            let spread = if name.ends_with("pos_joint") || name.ends_with("pos_frame") {
                1.0 / c.sqrt()
            } else {
                1.0 / (g.shape()[0] as f64).sqrt()
            };
            for v in g.iter_mut() {
                *v = rng.random_range(-spread..spread);
            }
        }
        ps
    }

    pub fn groups(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewD<'_, f64>)> = Vec::new();
        out.push(("shared.pos_joint".into(), self.pos_joint.view().into_dyn()));
        out.push(("shared.pos_frame".into(), self.pos_frame.view().into_dyn()));
        for (branch, name) in [(&self.pri, "pri"), (&self.aux1, "aux1"), (&self.aux2, "aux2")] {
            out.push((format!("shared.{name}.embed_w"), branch.embed_w.view().into_dyn()));
            out.push((format!("shared.{name}.embed_b"), branch.embed_b.view().into_dyn()));
            for (l, b) in branch.blocks.iter().enumerate() {
                push_block!(out, format!("shared.{name}.block{l}"), b, view);
            }
        }
        for (l, g) in self.gsu.iter().enumerate() {
            push_gsu!(out, format!("shared.gsu{l}.a1_to_pri"), g.a1_to_pri, view);
            push_gsu!(out, format!("shared.gsu{l}.a2_to_pri"), g.a2_to_pri, view);
            push_gsu!(out, format!("shared.gsu{l}.pri_to_a1"), g.pri_to_a1, view);
            push_gsu!(out, format!("shared.gsu{l}.pri_to_a2"), g.pri_to_a2, view);
        }
        push_block!(out, "pri.block", self.pri_head.block, view);
        out.push(("pri.out_w".into(), self.pri_head.out_w.view().into_dyn()));
        out.push(("pri.out_b".into(), self.pri_head.out_b.view().into_dyn()));
        for (i, (w, b)) in self.aux1_head.fc.iter().enumerate() {
            out.push((format!("aux1.fc{}_w", i + 1), w.view().into_dyn()));
            out.push((format!("aux1.fc{}_b", i + 1), b.view().into_dyn()));
        }
        push_block!(out, "aux2.block", self.aux2_head.block, view);
        out.push(("aux2.out_w".into(), self.aux2_head.out_w.view().into_dyn()));
        out.push(("aux2.out_b".into(), self.aux2_head.out_b.view().into_dyn()));
        out
    }

    pub fn groups_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out: Vec<(String, ArrayViewMutD<'_, f64>)> = Vec::new();
        out.push(("shared.pos_joint".into(), self.pos_joint.view_mut().into_dyn()));
        out.push(("shared.pos_frame".into(), self.pos_frame.view_mut().into_dyn()));
        for (branch, name) in [
            (&mut self.pri, "pri"),
            (&mut self.aux1, "aux1"),
            (&mut self.aux2, "aux2"),
        ] {
            out.push((format!("shared.{name}.embed_w"), branch.embed_w.view_mut().into_dyn()));
            out.push((format!("shared.{name}.embed_b"), branch.embed_b.view_mut().into_dyn()));
            for (l, b) in branch.blocks.iter_mut().enumerate() {
                push_block!(out, format!("shared.{name}.block{l}"), b, view_mut);
            }
        }
        for (l, g) in self.gsu.iter_mut().enumerate() {
            push_gsu!(out, format!("shared.gsu{l}.a1_to_pri"), g.a1_to_pri, view_mut);
            push_gsu!(out, format!("shared.gsu{l}.a2_to_pri"), g.a2_to_pri, view_mut);
            push_gsu!(out, format!("shared.gsu{l}.pri_to_a1"), g.pri_to_a1, view_mut);
            push_gsu!(out, format!("shared.gsu{l}.pri_to_a2"), g.pri_to_a2, view_mut);
        }
        push_block!(out, "pri.block", self.pri_head.block, view_mut);
        out.push(("pri.out_w".into(), self.pri_head.out_w.view_mut().into_dyn()));
        out.push(("pri.out_b".into(), self.pri_head.out_b.view_mut().into_dyn()));
        for (i, (w, b)) in self.aux1_head.fc.iter_mut().enumerate() {
            out.push((format!("aux1.fc{}_w", i + 1), w.view_mut().into_dyn()));
            out.push((format!("aux1.fc{}_b", i + 1), b.view_mut().into_dyn()));
        }
        push_block!(out, "aux2.block", self.aux2_head.block, view_mut);
        out.push(("aux2.out_w".into(), self.aux2_head.out_w.view_mut().into_dyn()));
        out.push(("aux2.out_b".into(), self.aux2_head.out_b.view_mut().into_dyn()));
        out
    }

    pub fn n_params(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// self += alpha * other, group by group.
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for ((_, mut a), (_, b)) in self.groups_mut().into_iter().zip(other.groups()) {
            Zip::from(&mut a).and(&b).for_each(|x, &y| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut g) in self.groups_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn fill(&mut self, value: f64) {
        for (_, mut g) in self.groups_mut() {
            g.fill(value);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut max = 0.0f64;
        for ((_, a), (_, b)) in self.groups().into_iter().zip(other.groups()) {
            Zip::from(&a).and(&b).for_each(|&x, &y| {
                max = max.max((x - y).abs());
            });
        }
        max
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (_, g) in self.groups() {
            out.extend(g.iter());
        }
        out
    }

    pub fn from_flat(cfg: &ModelConfig, data: &[f64]) -> Result<Self> {
        let mut ps = Self::zeros(cfg);
        let mut offset = 0usize;
        for (name, mut g) in ps.groups_mut() {
            let len = g.len();
            if offset + len > data.len() {
                return Err(Error::Shape(format!(
                    "flat data too short at group {name}: need {} more, have {}",
                    len,
                    data.len() - offset
                )));
            }
            for (dst, src) in g.iter_mut().zip(&data[offset..offset + len]) {
                *dst = *src;
            }
            offset += len;
        }
        if offset != data.len() {
            return Err(Error::Shape(format!(
                "flat data has {} values, layout expects {offset}",
                data.len()
            )));
        }
        Ok(ps)
    }
}
