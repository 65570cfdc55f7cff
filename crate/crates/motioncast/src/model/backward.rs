//! Reverse-mode differentiation through the three-branch forward pass. The
//! caller supplies gradients on whichever outputs its loss touched; the
//! result is a full [`ParamSet`]-shaped gradient.

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::attention::AttnGrads;
use crate::blocks::{block_backward, rows_of, unrows, BlockGrads, BlockParams, BlockState};
use crate::error::{Error, Result};
use crate::gsu::{gsu_backward_batch, GsuGrads, GsuParams};
use crate::model::forward::{ForwardCache, Model, StreamCache, OUTPUT_SCALE};
use crate::model::params::{BranchShared, ParamSet};
use crate::nn::{leaky_relu_deriv, sigmoid_deriv_from_output};

/// Gradients of a scalar loss with respect to the forward outputs. Leave a
/// slot `None` when the loss does not touch that output.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    /// d loss / d prediction, ΔT×N×3 (millimeter units)
    pub prediction: Option<Array3<f64>>,
    /// d loss / d scramble probability
    pub scramble_prob: Option<f64>,
    /// d loss / d repaired sequence, T×N×3
    pub repaired: Option<Array3<f64>>,
}

fn add_attn(dst: &mut crate::attention::AttnParams, g: &AttnGrads) {
    dst.w_q += &g.w_q;
    dst.w_k += &g.w_k;
    dst.w_v += &g.w_v;
    dst.w_o += &g.w_o;
    dst.b_o += &g.b_o;
}

fn add_block(dst: &mut BlockParams, g: &BlockGrads) {
    add_attn(&mut dst.sst, &g.sst);
    add_attn(&mut dst.srt, &g.srt);
    add_attn(&mut dst.tst, &g.tst);
    add_attn(&mut dst.trt, &g.trt);
    dst.combine_w += &g.combine_w;
    dst.combine_b += &g.combine_b;
}

fn add_gsu(dst: &mut GsuParams, g: &GsuGrads) {
    dst.gate_w += &g.gate_w;
    dst.gate_b += &g.gate_b;
    dst.msg_u += &g.msg_u;
    dst.msg_e += &g.msg_e;
}

/// Backward through the mean-relay initialization and the embedding, into the
/// branch's parameter slots and the shared positional tables.
fn embed_backward(
    grad_state: &BlockState,
    stream: &StreamCache,
    branch_grad: &mut BranchShared,
    pos_joint: &mut Array2<f64>,
    pos_frame: &mut Array2<f64>,
) {
    let (l, n, _c) = grad_state.dims();
    let mut g_jf = grad_state.joint_features.clone();
    for f in 0..l {
        for j in 0..n {
            let mut row = g_jf.slice_mut(s![f, j, ..]);
            row.scaled_add(1.0 / n as f64, &grad_state.spatial_relay.row(f));
            row.scaled_add(1.0 / l as f64, &grad_state.temporal_relay.row(j));
        }
    }
    for f in 0..l {
        let frame = g_jf.index_axis(Axis(0), f);
        *pos_joint += &frame;
        for j in 0..n {
            let mut row = pos_frame.row_mut(f);
            row += &frame.row(j);
        }
    }
    let g_rows = rows_of(&g_jf);
    branch_grad.embed_w += &stream.x_rows.t().dot(&g_rows);
    branch_grad.embed_b += &g_rows.sum_axis(Axis(0));
}

impl Model {
    /// Pulls output gradients back to every parameter. Output slots without a
    /// gradient contribute nothing; asking for a gradient whose head was not
    /// materialized in `cache` is a contract violation.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ForwardCache,
        grads_out: &OutputGrads,
    ) -> Result<ParamSet> {
        let cfg = self.config();
        let (l, n, c) = (cfg.seq_len(), cfg.n_joints, cfg.channels);
        let t_obs = cfg.obs_len;
        let mut grad = ParamSet::zeros(cfg);

        let mut g_pri = BlockState::zeros(l, n, c);
        let mut g_a1 = cfg.aux1_enabled.then(|| BlockState::zeros(l, n, c));
        let mut g_a2 = cfg.aux2_enabled.then(|| BlockState::zeros(l, n, c));

        if let Some(g_pred) = &grads_out.prediction {
            let head = cache
                .head_pri
                .as_ref()
                .ok_or_else(|| Error::Contract("prediction gradient without its head".into()))?;
            if g_pred.dim() != (cfg.horizon, n, 3) {
                return Err(Error::Shape(format!(
                    "prediction gradient is {:?}, expected {:?}",
                    g_pred.dim(),
                    (cfg.horizon, n, 3)
                )));
            }
            let g_rows = rows_of(g_pred) * OUTPUT_SCALE;
            let tail = head.block_out_jf.slice(s![t_obs.., .., ..]).to_owned();
            let tail_rows = rows_of(&tail);
            grad.pri_head.out_w += &tail_rows.t().dot(&g_rows);
            grad.pri_head.out_b += &g_rows.sum_axis(Axis(0));
            let mut g_jf = Array3::zeros((l, n, c));
            g_jf.slice_mut(s![t_obs.., .., ..])
                .assign(&unrows(g_rows.dot(&params.pri_head.out_w.t()), cfg.horizon, n, c));
            let g_head_out = BlockState {
                joint_features: g_jf,
                spatial_relay: Array2::zeros((l, c)),
                temporal_relay: Array2::zeros((n, c)),
            };
            let (bg, g_in) =
                block_backward(&params.pri_head.block, &head.block_cache, self.ctx(), &g_head_out);
            add_block(&mut grad.pri_head.block, &bg);
            g_pri.add_assign(&g_in);
        }

        if let Some(gp) = grads_out.scramble_prob {
            let head = cache
                .head_aux1
                .as_ref()
                .ok_or_else(|| Error::Contract("probability gradient without its head".into()))?;
            let n_fc = params.aux1_head.fc.len();
            let mut g_z = Array1::from_elem(1, gp * sigmoid_deriv_from_output(head.p));
            for i in (0..n_fc).rev() {
                let (w, _) = &params.aux1_head.fc[i];
                let input = if i == 0 { &head.flat } else { &head.hs[i - 1] };
                let (gw, gb) = &mut grad.aux1_head.fc[i];
                *gw += &(&input.view().insert_axis(Axis(1)) * &g_z.view().insert_axis(Axis(0)));
                *gb += &g_z;
                let mut g_prev = w.dot(&g_z);
                if i > 0 {
                    for (gv, zv) in g_prev.iter_mut().zip(head.zs[i - 1].iter()) {
                        *gv *= leaky_relu_deriv(*zv);
                    }
                }
                g_z = g_prev;
            }
            let g_feats = unrows(
                g_z.into_shape_with_order((l * n, c)).expect("flat layout"),
                l,
                n,
                c,
            );
            g_pri.joint_features += &g_feats;
            g_a1.as_mut().expect("aux1 enabled").joint_features += &g_feats;
        }

        if let Some(g_rep) = &grads_out.repaired {
            let head = cache
                .head_aux2
                .as_ref()
                .ok_or_else(|| Error::Contract("repair gradient without its head".into()))?;
            if g_rep.dim() != (t_obs, n, 3) {
                return Err(Error::Shape(format!(
                    "repair gradient is {:?}, expected {:?}",
                    g_rep.dim(),
                    (t_obs, n, 3)
                )));
            }
            let g_rows = rows_of(g_rep) * OUTPUT_SCALE;
            let headf = head.block_out_jf.slice(s![..t_obs, .., ..]).to_owned();
            let head_rows = rows_of(&headf);
            grad.aux2_head.out_w += &head_rows.t().dot(&g_rows);
            grad.aux2_head.out_b += &g_rows.sum_axis(Axis(0));
            let mut g_jf = Array3::zeros((l, n, c));
            g_jf.slice_mut(s![..t_obs, .., ..])
                .assign(&unrows(g_rows.dot(&params.aux2_head.out_w.t()), t_obs, n, c));
            let g_head_out = BlockState {
                joint_features: g_jf,
                spatial_relay: Array2::zeros((l, c)),
                temporal_relay: Array2::zeros((n, c)),
            };
            let (bg, g_in) =
                block_backward(&params.aux2_head.block, &head.block_cache, self.ctx(), &g_head_out);
            add_block(&mut grad.aux2_head.block, &bg);
            // the repair head reads the elementwise sum of both final states
            g_a2.as_mut().expect("aux2 enabled").add_assign(&g_in);
            g_pri.add_assign(&g_in);
        }

        for layer in (0..cfg.n_shared_blocks).rev() {
            let (bg, g_in) = block_backward(
                &params.pri.blocks[layer],
                &cache.pri.layer_caches[layer],
                self.ctx(),
                &g_pri,
            );
            add_block(&mut grad.pri.blocks[layer], &bg);
            g_pri = g_in;
            if let (Some(g), Some(stream)) = (g_a1.as_mut(), cache.aux1.as_ref()) {
                let (bg, g_in) = block_backward(
                    &params.aux1.blocks[layer],
                    &stream.layer_caches[layer],
                    self.ctx(),
                    g,
                );
                add_block(&mut grad.aux1.blocks[layer], &bg);
                *g = g_in;
            }
            if let (Some(g), Some(stream)) = (g_a2.as_mut(), cache.aux2.as_ref()) {
                let (bg, g_in) = block_backward(
                    &params.aux2.blocks[layer],
                    &stream.layer_caches[layer],
                    self.ctx(),
                    g,
                );
                add_block(&mut grad.aux2.blocks[layer], &bg);
                *g = g_in;
            }

            let gcache = &cache.gsu_layers[layer];
            if gcache.a1_to_pri.is_some()
                || gcache.a2_to_pri.is_some()
                || gcache.pri_to_a1.is_some()
                || gcache.pri_to_a2.is_some()
            {
                let lp = &params.gsu[layer];
                let lg = &mut grad.gsu[layer];
                let mut g_pri_rows = Array2::zeros((l * n, c));
                // messages out of the forecaster
                if let (Some(gc), Some(g)) = (&gcache.pri_to_a1, g_a1.as_mut()) {
                    let g_aug = rows_of(&g.joint_features);
                    let (pg, g_src, g_dst) = gsu_backward_batch(&lp.pri_to_a1, gc, g_aug.view());
                    add_gsu(&mut lg.pri_to_a1, &pg);
                    g_pri_rows += &g_src;
                    g.joint_features = unrows(g_dst, l, n, c);
                }
                if let (Some(gc), Some(g)) = (&gcache.pri_to_a2, g_a2.as_mut()) {
                    let g_aug = rows_of(&g.joint_features);
                    let (pg, g_src, g_dst) = gsu_backward_batch(&lp.pri_to_a2, gc, g_aug.view());
                    add_gsu(&mut lg.pri_to_a2, &pg);
                    g_pri_rows += &g_src;
                    g.joint_features = unrows(g_dst, l, n, c);
                }
                // messages into the forecaster, unwound in reverse order
                let mut g_chain = rows_of(&g_pri.joint_features);
                if let Some(gc) = &gcache.a2_to_pri {
                    let (pg, g_src, g_dst) = gsu_backward_batch(&lp.a2_to_pri, gc, g_chain.view());
                    add_gsu(&mut lg.a2_to_pri, &pg);
                    g_a2.as_mut().expect("aux2 enabled").joint_features +=
                        &unrows(g_src, l, n, c);
                    g_chain = g_dst;
                }
                if let Some(gc) = &gcache.a1_to_pri {
                    let (pg, g_src, g_dst) = gsu_backward_batch(&lp.a1_to_pri, gc, g_chain.view());
                    add_gsu(&mut lg.a1_to_pri, &pg);
                    g_a1.as_mut().expect("aux1 enabled").joint_features +=
                        &unrows(g_src, l, n, c);
                    g_chain = g_dst;
                }
                g_pri_rows += &g_chain;
                g_pri.joint_features = unrows(g_pri_rows, l, n, c);
            }
        }

        embed_backward(
            &g_pri,
            &cache.pri,
            &mut grad.pri,
            &mut grad.pos_joint,
            &mut grad.pos_frame,
        );
        if let (Some(g), Some(stream)) = (g_a1.as_ref(), cache.aux1.as_ref()) {
            embed_backward(g, stream, &mut grad.aux1, &mut grad.pos_joint, &mut grad.pos_frame);
        }
        if let (Some(g), Some(stream)) = (g_a2.as_ref(), cache.aux2.as_ref()) {
            embed_backward(g, stream, &mut grad.aux2, &mut grad.pos_joint, &mut grad.pos_frame);
        }

        Ok(grad)
    }
}
