//! Residual spatio-temporal blocks. One block runs a spatial stage (joints
//! attend within each frame, plus a per-frame relay) and a temporal stage
//! (frames attend along each joint trajectory, plus a per-joint relay) on the
//! same input, sums the two branch outputs, pushes the sum through a shared
//! pointwise linear + LeakyReLU, and adds the result back onto the input.

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::attention::{
    build_spatial_masks, build_temporal_masks, mha_backward, mha_forward, AttnGrads, AttnParams,
    MhaCache, ScaleMode, SparsityMask,
};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, leaky_relu_deriv};
use crate::skeleton::SkeletonTopology;

/// Features carried between blocks: per-(frame, joint) vectors plus the two
/// relay tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    /// L×N×C
    pub joint_features: Array3<f64>,
    /// L×C, one relay per frame
    pub spatial_relay: Array2<f64>,
    /// N×C, one relay per joint trajectory
    pub temporal_relay: Array2<f64>,
}

impl BlockState {
    pub fn new(
        joint_features: Array3<f64>,
        spatial_relay: Array2<f64>,
        temporal_relay: Array2<f64>,
    ) -> Result<Self> {
        let (l, n, c) = joint_features.dim();
        if spatial_relay.dim() != (l, c) || temporal_relay.dim() != (n, c) {
            return Err(Error::Shape(format!(
                "relay shapes {:?}/{:?} inconsistent with features {:?}",
                spatial_relay.dim(),
                temporal_relay.dim(),
                joint_features.dim()
            )));
        }
        Ok(Self {
            joint_features,
            spatial_relay,
            temporal_relay,
        })
    }

    pub fn zeros(len: usize, n_joints: usize, channels: usize) -> Self {
        Self {
            joint_features: Array3::zeros((len, n_joints, channels)),
            spatial_relay: Array2::zeros((len, channels)),
            temporal_relay: Array2::zeros((n_joints, channels)),
        }
    }

    /// Initializes the relay tracks from the joint features: the spatial
    /// relay of a frame is the mean of that frame's joints, the temporal
    /// relay of a joint the mean of its trajectory.
    pub fn with_mean_relays(joint_features: Array3<f64>) -> Self {
        let spatial_relay = joint_features.mean_axis(Axis(1)).expect("N >= 1");
        let temporal_relay = joint_features.mean_axis(Axis(0)).expect("L >= 1");
        Self {
            joint_features,
            spatial_relay,
            temporal_relay,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.joint_features.dim()
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            joint_features: &self.joint_features + &other.joint_features,
            spatial_relay: &self.spatial_relay + &other.spatial_relay,
            temporal_relay: &self.temporal_relay + &other.temporal_relay,
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.joint_features += &other.joint_features;
        self.spatial_relay += &other.spatial_relay;
        self.temporal_relay += &other.temporal_relay;
    }

    pub fn is_finite(&self) -> bool {
        self.joint_features.iter().all(|v| v.is_finite())
            && self.spatial_relay.iter().all(|v| v.is_finite())
            && self.temporal_relay.iter().all(|v| v.is_finite())
    }
}

/// Masks and attention geometry shared by every block of one model instance.
#[derive(Debug, Clone)]
pub struct BlockCtx {
    pub spatial_joint: SparsityMask,
    pub spatial_relay: SparsityMask,
    pub temporal_frame: SparsityMask,
    pub temporal_relay: SparsityMask,
    pub heads: usize,
    pub head_dim: usize,
    pub scale: f64,
}

impl BlockCtx {
    pub fn new(
        topo: &SkeletonTopology,
        len: usize,
        heads: usize,
        head_dim: usize,
        scale_mode: ScaleMode,
    ) -> Self {
        let (spatial_joint, spatial_relay) = build_spatial_masks(topo);
        let (temporal_frame, temporal_relay) = build_temporal_masks(len);
        Self {
            spatial_joint,
            spatial_relay,
            temporal_frame,
            temporal_relay,
            heads,
            head_dim,
            scale: scale_mode.scale(head_dim),
        }
    }
}

/// One block's weights: four attention stages plus the pointwise combine.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub sst: AttnParams,
    pub srt: AttnParams,
    pub tst: AttnParams,
    pub trt: AttnParams,
    pub combine_w: Array2<f64>,
    pub combine_b: Array1<f64>,
}

impl BlockParams {
    pub fn zeros(channels: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            sst: AttnParams::zeros(channels, heads, head_dim),
            srt: AttnParams::zeros(channels, heads, head_dim),
            tst: AttnParams::zeros(channels, heads, head_dim),
            trt: AttnParams::zeros(channels, heads, head_dim),
            combine_w: Array2::zeros((channels, channels)),
            combine_b: Array1::zeros(channels),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub sst: AttnGrads,
    pub srt: AttnGrads,
    pub tst: AttnGrads,
    pub trt: AttnGrads,
    pub combine_w: Array2<f64>,
    pub combine_b: Array1<f64>,
}

impl BlockGrads {
    pub fn zeros(channels: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            sst: AttnGrads::zeros(channels, heads, head_dim),
            srt: AttnGrads::zeros(channels, heads, head_dim),
            tst: AttnGrads::zeros(channels, heads, head_dim),
            trt: AttnGrads::zeros(channels, heads, head_dim),
            combine_w: Array2::zeros((channels, channels)),
            combine_b: Array1::zeros(channels),
        }
    }

    pub fn accumulate(&mut self, other: &BlockGrads) {
        self.sst.accumulate(&other.sst);
        self.srt.accumulate(&other.srt);
        self.tst.accumulate(&other.tst);
        self.trt.accumulate(&other.trt);
        self.combine_w += &other.combine_w;
        self.combine_b += &other.combine_b;
    }
}

#[derive(Debug, Clone)]
pub struct SsrtCache {
    frames: Vec<(MhaCache, MhaCache)>,
}

#[derive(Debug, Clone)]
pub struct TsrtCache {
    joints: Vec<(MhaCache, MhaCache)>,
}

/// Spatial stage: per frame, joints attend over {self, skeletal neighbors,
/// relay} and the frame's relay attends over everything; the temporal relay
/// track passes through unchanged.
pub fn ssrt_forward(
    state: &BlockState,
    sst: &AttnParams,
    srt: &AttnParams,
    ctx: &BlockCtx,
) -> Result<(BlockState, SsrtCache)> {
    let (l, n, c) = state.dims();
    let mut out = state.clone();
    let mut frames = Vec::with_capacity(l);
    for f in 0..l {
        let joints = state.joint_features.index_axis(Axis(0), f);
        let mut keys = Array2::zeros((n + 1, c));
        keys.slice_mut(s![..n, ..]).assign(&joints);
        keys.row_mut(n).assign(&state.spatial_relay.row(f));
        let (out_j, cache_j) = mha_forward(
            joints,
            keys.view(),
            sst,
            &ctx.spatial_joint,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
        )?;
        let (out_r, cache_r) = mha_forward(
            state.spatial_relay.slice(s![f..f + 1, ..]),
            keys.view(),
            srt,
            &ctx.spatial_relay,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
        )?;
        out.joint_features.index_axis_mut(Axis(0), f).assign(&out_j);
        out.spatial_relay.row_mut(f).assign(&out_r.row(0));
        frames.push((cache_j, cache_r));
    }
    Ok((out, SsrtCache { frames }))
}

pub fn ssrt_backward(
    sst: &AttnParams,
    srt: &AttnParams,
    cache: &SsrtCache,
    ctx: &BlockCtx,
    grad: &BlockState,
) -> (AttnGrads, AttnGrads, BlockState) {
    let (l, n, c) = grad.dims();
    let mut g_sst = AttnGrads::zeros(c, ctx.heads, ctx.head_dim);
    let mut g_srt = AttnGrads::zeros(c, ctx.heads, ctx.head_dim);
    let mut grad_in = BlockState::zeros(l, n, c);
    grad_in.temporal_relay.assign(&grad.temporal_relay);
    for f in 0..l {
        let (cache_j, cache_r) = &cache.frames[f];
        let (gj, gq_j, gk_j) = mha_backward(
            sst,
            cache_j,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
            grad.joint_features.index_axis(Axis(0), f),
        );
        g_sst.accumulate(&gj);
        let (gr, gq_r, gk_r) = mha_backward(
            srt,
            cache_r,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
            grad.spatial_relay.slice(s![f..f + 1, ..]),
        );
        g_srt.accumulate(&gr);
        {
            let mut jf = grad_in.joint_features.index_axis_mut(Axis(0), f);
            jf += &gq_j;
            jf += &gk_j.slice(s![..n, ..]);
            jf += &gk_r.slice(s![..n, ..]);
        }
        {
            let mut sr = grad_in.spatial_relay.row_mut(f);
            sr += &gk_j.row(n);
            sr += &gk_r.row(n);
            sr += &gq_r.row(0);
        }
    }
    (g_sst, g_srt, grad_in)
}

/// Temporal stage: per joint, frames attend over {previous, self, next,
/// relay} and the joint's relay attends over everything; the spatial relay
/// track passes through unchanged.
pub fn tsrt_forward(
    state: &BlockState,
    tst: &AttnParams,
    trt: &AttnParams,
    ctx: &BlockCtx,
) -> Result<(BlockState, TsrtCache)> {
    let (l, n, c) = state.dims();
    let mut out = state.clone();
    let mut joints = Vec::with_capacity(n);
    for j in 0..n {
        let frames = state.joint_features.index_axis(Axis(1), j);
        let mut keys = Array2::zeros((l + 1, c));
        keys.slice_mut(s![..l, ..]).assign(&frames);
        keys.row_mut(l).assign(&state.temporal_relay.row(j));
        let (out_f, cache_f) = mha_forward(
            frames,
            keys.view(),
            tst,
            &ctx.temporal_frame,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
        )?;
        let (out_r, cache_r) = mha_forward(
            state.temporal_relay.slice(s![j..j + 1, ..]),
            keys.view(),
            trt,
            &ctx.temporal_relay,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
        )?;
        out.joint_features.index_axis_mut(Axis(1), j).assign(&out_f);
        out.temporal_relay.row_mut(j).assign(&out_r.row(0));
        joints.push((cache_f, cache_r));
    }
    Ok((out, TsrtCache { joints }))
}

pub fn tsrt_backward(
    tst: &AttnParams,
    trt: &AttnParams,
    cache: &TsrtCache,
    ctx: &BlockCtx,
    grad: &BlockState,
) -> (AttnGrads, AttnGrads, BlockState) {
    let (l, n, c) = grad.dims();
    let mut g_tst = AttnGrads::zeros(c, ctx.heads, ctx.head_dim);
    let mut g_trt = AttnGrads::zeros(c, ctx.heads, ctx.head_dim);
    let mut grad_in = BlockState::zeros(l, n, c);
    grad_in.spatial_relay.assign(&grad.spatial_relay);
    for j in 0..n {
        let (cache_f, cache_r) = &cache.joints[j];
        let (gf, gq_f, gk_f) = mha_backward(
            tst,
            cache_f,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
            grad.joint_features.index_axis(Axis(1), j),
        );
        g_tst.accumulate(&gf);
        let (gr, gq_r, gk_r) = mha_backward(
            trt,
            cache_r,
            ctx.heads,
            ctx.head_dim,
            ctx.scale,
            grad.temporal_relay.slice(s![j..j + 1, ..]),
        );
        g_trt.accumulate(&gr);
        {
            let mut jf = grad_in.joint_features.index_axis_mut(Axis(1), j);
            jf += &gq_f;
            jf += &gk_f.slice(s![..l, ..]);
            jf += &gk_r.slice(s![..l, ..]);
        }
        {
            let mut tr = grad_in.temporal_relay.row_mut(j);
            tr += &gk_f.row(l);
            tr += &gk_r.row(l);
            tr += &gq_r.row(0);
        }
    }
    (g_tst, g_trt, grad_in)
}

pub(crate) fn rows_of(a: &Array3<f64>) -> Array2<f64> {
    let (l, n, c) = a.dim();
    a.to_shape((l * n, c)).expect("standard layout").to_owned()
}

pub(crate) fn unrows(a: Array2<f64>, l: usize, n: usize, c: usize) -> Array3<f64> {
    a.into_shape_with_order((l, n, c)).expect("row count matches")
}

fn apply_combine(sum: &BlockState, w: &Array2<f64>, b: &Array1<f64>) -> BlockState {
    let (l, n, c) = sum.dims();
    BlockState {
        joint_features: unrows(rows_of(&sum.joint_features).dot(w) + b, l, n, c),
        spatial_relay: sum.spatial_relay.dot(w) + b,
        temporal_relay: sum.temporal_relay.dot(w) + b,
    }
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ssrt: SsrtCache,
    tsrt: TsrtCache,
    sum: BlockState,
    pre: BlockState,
}

/// Full residual block: `out = state + leaky(combine_w · (ssrt + tsrt) + b)`.
/// All-zero parameters make it the identity.
pub fn block_forward(
    state: &BlockState,
    params: &BlockParams,
    ctx: &BlockCtx,
) -> Result<(BlockState, BlockCache)> {
    let (ss_out, ss_cache) = ssrt_forward(state, &params.sst, &params.srt, ctx)?;
    let (ts_out, ts_cache) = tsrt_forward(state, &params.tst, &params.trt, ctx)?;
    let sum = ss_out.add(&ts_out);
    let pre = apply_combine(&sum, &params.combine_w, &params.combine_b);
    let mut out = state.clone();
    out.joint_features
        .zip_mut_with(&pre.joint_features, |o, &p| *o += leaky_relu(p));
    out.spatial_relay
        .zip_mut_with(&pre.spatial_relay, |o, &p| *o += leaky_relu(p));
    out.temporal_relay
        .zip_mut_with(&pre.temporal_relay, |o, &p| *o += leaky_relu(p));
    let cache = BlockCache {
        ssrt: ss_cache,
        tsrt: ts_cache,
        sum,
        pre,
    };
    Ok((out, cache))
}

pub fn block_backward(
    params: &BlockParams,
    cache: &BlockCache,
    ctx: &BlockCtx,
    grad_out: &BlockState,
) -> (BlockGrads, BlockState) {
    let (l, n, c) = grad_out.dims();
    // through the activation
    let mut grad_pre = grad_out.clone();
    grad_pre
        .joint_features
        .zip_mut_with(&cache.pre.joint_features, |g, &p| *g *= leaky_relu_deriv(p));
    grad_pre
        .spatial_relay
        .zip_mut_with(&cache.pre.spatial_relay, |g, &p| *g *= leaky_relu_deriv(p));
    grad_pre
        .temporal_relay
        .zip_mut_with(&cache.pre.temporal_relay, |g, &p| *g *= leaky_relu_deriv(p));

    // through the pointwise linear, rows pooled over every position
    let gp_j = rows_of(&grad_pre.joint_features);
    let sum_j = rows_of(&cache.sum.joint_features);
    let mut combine_w = sum_j.t().dot(&gp_j);
    combine_w += &cache.sum.spatial_relay.t().dot(&grad_pre.spatial_relay);
    combine_w += &cache.sum.temporal_relay.t().dot(&grad_pre.temporal_relay);
    let mut combine_b = gp_j.sum_axis(Axis(0));
    combine_b += &grad_pre.spatial_relay.sum_axis(Axis(0));
    combine_b += &grad_pre.temporal_relay.sum_axis(Axis(0));

    let grad_sum = BlockState {
        joint_features: unrows(gp_j.dot(&params.combine_w.t()), l, n, c),
        spatial_relay: grad_pre.spatial_relay.dot(&params.combine_w.t()),
        temporal_relay: grad_pre.temporal_relay.dot(&params.combine_w.t()),
    };

    let (g_sst, g_srt, grad_in_ss) =
        ssrt_backward(&params.sst, &params.srt, &cache.ssrt, ctx, &grad_sum);
    let (g_tst, g_trt, grad_in_ts) =
        tsrt_backward(&params.tst, &params.trt, &cache.tsrt, ctx, &grad_sum);

    let mut grad_state = grad_out.clone();
    grad_state.add_assign(&grad_in_ss);
    grad_state.add_assign(&grad_in_ts);

    let grads = BlockGrads {
        sst: g_sst,
        srt: g_srt,
        tst: g_tst,
        trt: g_trt,
        combine_w,
        combine_b,
    };
    (grads, grad_state)
}
