//! The three-branch forward pass.
//!
//! Every stream is centered on the observation's seed pose and scaled into
//! network units before embedding; the forecaster and the repair head add the
//! seed pose back, so an all-zero network predicts a frozen pose.

use ndarray::{s, Array1, Array2, Array3, Axis};

use crate::blocks::{block_forward, rows_of, unrows, BlockCache, BlockCtx, BlockState};
use crate::error::{Error, Result};
use crate::gsu::{gsu_forward_batch, GsuCache};
use crate::model::config::ModelConfig;
use crate::model::params::{BranchShared, ParamSet};
use crate::motion::MotionSequence;
use crate::nn::{leaky_relu, sigmoid};
use crate::selfsup::SampleTask;
use crate::skeleton::SkeletonTopology;

/// Millimeters → network units at the input embedding.
pub const INPUT_SCALE: f64 = 0.01;
/// Network units → millimeters at the output heads.
pub const OUTPUT_SCALE: f64 = 100.0;

/// Which head outputs a forward pass should materialize. Enabled branch
/// backbones always run (they feed cross-branch messages); this only controls
/// the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WhichOutputs {
    pub pri: bool,
    pub aux: bool,
}

impl WhichOutputs {
    pub fn all() -> Self {
        Self { pri: true, aux: true }
    }

    pub fn pri_only() -> Self {
        Self { pri: true, aux: false }
    }

    pub fn aux_only() -> Self {
        Self { pri: false, aux: true }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    prediction: Option<MotionSequence>,
    scramble_prob: Option<f64>,
    repaired: Option<MotionSequence>,
}

impl ForwardOutput {
    pub fn prediction(&self) -> Result<&MotionSequence> {
        self.prediction
            .as_ref()
            .ok_or_else(|| Error::Contract("prediction was not computed".into()))
    }

    pub fn scramble_prob(&self) -> Result<f64> {
        self.scramble_prob
            .ok_or_else(|| Error::Contract("scramble probability was not computed".into()))
    }

    pub fn repaired(&self) -> Result<&MotionSequence> {
        self.repaired
            .as_ref()
            .ok_or_else(|| Error::Contract("repaired sequence was not computed".into()))
    }

    pub fn has_prediction(&self) -> bool {
        self.prediction.is_some()
    }

    pub fn has_scramble_prob(&self) -> bool {
        self.scramble_prob.is_some()
    }

    pub fn has_repaired(&self) -> bool {
        self.repaired.is_some()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StreamCache {
    /// (L·N)×3 centered, scaled embedding inputs
    pub x_rows: Array2<f64>,
    pub layer_caches: Vec<BlockCache>,
    pub final_state: BlockState,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct GsuLayerCache {
    pub a1_to_pri: Option<GsuCache>,
    pub a2_to_pri: Option<GsuCache>,
    pub pri_to_a1: Option<GsuCache>,
    pub pri_to_a2: Option<GsuCache>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadTaskCache {
    pub block_cache: BlockCache,
    pub block_out_jf: Array3<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct HeadAux1Cache {
    pub flat: Array1<f64>,
    pub zs: Vec<Array1<f64>>,
    pub hs: Vec<Array1<f64>>,
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) pri: StreamCache,
    pub(crate) aux1: Option<StreamCache>,
    pub(crate) aux2: Option<StreamCache>,
    pub(crate) gsu_layers: Vec<GsuLayerCache>,
    pub(crate) head_pri: Option<HeadTaskCache>,
    pub(crate) head_aux1: Option<HeadAux1Cache>,
    pub(crate) head_aux2: Option<HeadTaskCache>,
}

/// A model instance: configuration plus the skeleton it operates on. The
/// attention masks are built once here.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    topo: SkeletonTopology,
    ctx: BlockCtx,
}

impl Model {
    pub fn new(config: ModelConfig, topo: SkeletonTopology) -> Result<Self> {
        config.validate()?;
        if topo.n_joints() != config.n_joints {
            return Err(Error::Shape(format!(
                "topology has {} joints, config expects {}",
                topo.n_joints(),
                config.n_joints
            )));
        }
        let ctx = BlockCtx::new(
            &topo,
            config.seq_len(),
            config.heads,
            config.head_dim,
            config.scale_mode,
        );
        Ok(Self { config, topo, ctx })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &SkeletonTopology {
        &self.topo
    }

    pub(crate) fn ctx(&self) -> &BlockCtx {
        &self.ctx
    }

    fn check_task(&self, task: &SampleTask) -> Result<()> {
        if task.observation.n_frames() != self.config.obs_len
            || task.observation.n_joints() != self.config.n_joints
        {
            return Err(Error::Shape(format!(
                "observation is {}x{}, config expects {}x{}",
                task.observation.n_frames(),
                task.observation.n_joints(),
                self.config.obs_len,
                self.config.n_joints
            )));
        }
        if task.target.n_frames() != self.config.horizon {
            return Err(Error::Shape(format!(
                "target has {} frames, config expects {}",
                task.target.n_frames(),
                self.config.horizon
            )));
        }
        Ok(())
    }

    fn embed_stream(
        &self,
        frames: &MotionSequence,
        seed_pose: &Array2<f64>,
        branch: &BranchShared,
        params: &ParamSet,
    ) -> (BlockState, Array2<f64>) {
        let (l, n) = (frames.n_frames(), frames.n_joints());
        let c = self.config.channels;
        let mut x = Array3::zeros((l, n, 3));
        for f in 0..l {
            for j in 0..n {
                for k in 0..3 {
                    x[[f, j, k]] =
                        (frames.frames()[[f, j, k]] - seed_pose[[j, k]]) * INPUT_SCALE;
                }
            }
        }
        let x_rows = rows_of(&x);
        let feat_rows = x_rows.dot(&branch.embed_w) + &branch.embed_b;
        let mut feats = unrows(feat_rows, l, n, c);
        for f in 0..l {
            let mut frame = feats.index_axis_mut(Axis(0), f);
            frame += &params.pos_joint;
            for j in 0..n {
                let mut row = frame.row_mut(j);
                row += &params.pos_frame.row(f);
            }
        }
        (BlockState::with_mean_relays(feats), x_rows)
    }

    /// Runs the enabled backbones (with per-layer cross-branch messages when
    /// configured) and the requested heads.
    pub fn forward(
        &self,
        params: &ParamSet,
        task: &SampleTask,
        which: WhichOutputs,
    ) -> Result<(ForwardOutput, ForwardCache)> {
        self.check_task(task)?;
        let cfg = &self.config;
        let (l, n, c) = (cfg.seq_len(), cfg.n_joints, cfg.channels);
        let t_obs = cfg.obs_len;
        let seed_pose = task
            .observation
            .frames()
            .index_axis(Axis(0), t_obs - 1)
            .to_owned();

        let pri_padded = task.observation.pad_with_seed(cfg.horizon)?;
        let (mut state_pri, x_pri) =
            self.embed_stream(&pri_padded, &seed_pose, &params.pri, params);
        let mut pri_cache = StreamCache {
            x_rows: x_pri,
            layer_caches: Vec::with_capacity(cfg.n_shared_blocks),
            final_state: BlockState::zeros(1, 1, 1),
        };

        let mut state_a1 = None;
        let mut a1_cache = None;
        if cfg.aux1_enabled {
            let padded = task.scrambled.pad_with_seed(cfg.horizon)?;
            let (st, x) = self.embed_stream(&padded, &seed_pose, &params.aux1, params);
            state_a1 = Some(st);
            a1_cache = Some(StreamCache {
                x_rows: x,
                layer_caches: Vec::with_capacity(cfg.n_shared_blocks),
                final_state: BlockState::zeros(1, 1, 1),
            });
        }
        let mut state_a2 = None;
        let mut a2_cache = None;
        if cfg.aux2_enabled {
            let padded = task.corrupted.pad_with_seed(cfg.horizon)?;
            let (st, x) = self.embed_stream(&padded, &seed_pose, &params.aux2, params);
            state_a2 = Some(st);
            a2_cache = Some(StreamCache {
                x_rows: x,
                layer_caches: Vec::with_capacity(cfg.n_shared_blocks),
                final_state: BlockState::zeros(1, 1, 1),
            });
        }

        let mut gsu_layers = Vec::new();
        for layer in 0..cfg.n_shared_blocks {
            let mut gcache = GsuLayerCache::default();
            if cfg.gsu_enabled && (cfg.aux1_enabled || cfg.aux2_enabled) {
                let lp = &params.gsu[layer];
                let pri_rows = rows_of(&state_pri.joint_features);
                let a1_rows = state_a1.as_ref().map(|s| rows_of(&s.joint_features));
                let a2_rows = state_a2.as_ref().map(|s| rows_of(&s.joint_features));

                // messages into the forecaster, applied in a fixed order
                let mut pri_aug = pri_rows.clone();
                if let Some(a1) = &a1_rows {
                    let (out, cache) = gsu_forward_batch(a1.view(), pri_aug.view(), &lp.a1_to_pri)?;
                    pri_aug = out;
                    gcache.a1_to_pri = Some(cache);
                }
                if let Some(a2) = &a2_rows {
                    let (out, cache) = gsu_forward_batch(a2.view(), pri_aug.view(), &lp.a2_to_pri)?;
                    pri_aug = out;
                    gcache.a2_to_pri = Some(cache);
                }
                // messages from the forecaster use its pre-message features
                if let (Some(st), Some(a1)) = (state_a1.as_mut(), a1_rows.as_ref()) {
                    let (out, cache) = gsu_forward_batch(pri_rows.view(), a1.view(), &lp.pri_to_a1)?;
                    st.joint_features = unrows(out, l, n, c);
                    gcache.pri_to_a1 = Some(cache);
                }
                if let (Some(st), Some(a2)) = (state_a2.as_mut(), a2_rows.as_ref()) {
                    let (out, cache) = gsu_forward_batch(pri_rows.view(), a2.view(), &lp.pri_to_a2)?;
                    st.joint_features = unrows(out, l, n, c);
                    gcache.pri_to_a2 = Some(cache);
                }
                state_pri.joint_features = unrows(pri_aug, l, n, c);
            }
            gsu_layers.push(gcache);

            let (next, bc) = block_forward(&state_pri, &params.pri.blocks[layer], &self.ctx)?;
            state_pri = next;
            pri_cache.layer_caches.push(bc);
            if let (Some(st), Some(cache)) = (state_a1.as_mut(), a1_cache.as_mut()) {
                let (next, bc) = block_forward(st, &params.aux1.blocks[layer], &self.ctx)?;
                *st = next;
                cache.layer_caches.push(bc);
            }
            if let (Some(st), Some(cache)) = (state_a2.as_mut(), a2_cache.as_mut()) {
                let (next, bc) = block_forward(st, &params.aux2.blocks[layer], &self.ctx)?;
                *st = next;
                cache.layer_caches.push(bc);
            }
        }

        pri_cache.final_state = state_pri.clone();
        if let (Some(st), Some(cache)) = (state_a1.as_ref(), a1_cache.as_mut()) {
            cache.final_state = st.clone();
        }
        if let (Some(st), Some(cache)) = (state_a2.as_ref(), a2_cache.as_mut()) {
            cache.final_state = st.clone();
        }

        let mut output = ForwardOutput {
            prediction: None,
            scramble_prob: None,
            repaired: None,
        };
        let mut head_pri = None;
        let mut head_aux1 = None;
        let mut head_aux2 = None;

        if which.pri {
            let (out_state, block_cache) =
                block_forward(&state_pri, &params.pri_head.block, &self.ctx)?;
            let jf = out_state.joint_features;
            let tail = jf.slice(s![t_obs.., .., ..]).to_owned();
            let tail_rows = rows_of(&tail);
            let coord_rows = tail_rows.dot(&params.pri_head.out_w) + &params.pri_head.out_b;
            let coords = unrows(coord_rows, cfg.horizon, n, 3);
            let mut pred = Array3::zeros((cfg.horizon, n, 3));
            for f in 0..cfg.horizon {
                for j in 0..n {
                    for k in 0..3 {
                        pred[[f, j, k]] = seed_pose[[j, k]] + OUTPUT_SCALE * coords[[f, j, k]];
                    }
                }
            }
            output.prediction = Some(MotionSequence::new(pred, task.observation.fps())?);
            head_pri = Some(HeadTaskCache {
                block_cache,
                block_out_jf: jf,
            });
        }

        if which.aux && cfg.aux1_enabled {
            let a1_state = state_a1.as_ref().expect("aux1 stream ran");
            let feats = &a1_state.joint_features + &state_pri.joint_features;
            let flat = rows_of(&feats)
                .into_shape_with_order(l * n * c)
                .expect("contiguous");
            let mut zs = Vec::new();
            let mut hs = Vec::new();
            let mut h = flat.clone();
            let n_fc = params.aux1_head.fc.len();
            for (i, (w, b)) in params.aux1_head.fc.iter().enumerate() {
                let z = h.dot(w) + b;
                if i + 1 < n_fc {
                    let act = z.mapv(leaky_relu);
                    zs.push(z);
                    hs.push(act.clone());
                    h = act;
                } else {
                    zs.push(z.clone());
                    h = z;
                }
            }
            let p = sigmoid(h[0]);
            output.scramble_prob = Some(p);
            head_aux1 = Some(HeadAux1Cache { flat, zs, hs, p });
        }

        if which.aux && cfg.aux2_enabled {
            let a2_state = state_a2.as_ref().expect("aux2 stream ran");
            let sum_state = a2_state.add(&state_pri);
            let (out_state, block_cache) =
                block_forward(&sum_state, &params.aux2_head.block, &self.ctx)?;
            let jf = out_state.joint_features;
            let head = jf.slice(s![..t_obs, .., ..]).to_owned();
            let head_rows = rows_of(&head);
            let coord_rows = head_rows.dot(&params.aux2_head.out_w) + &params.aux2_head.out_b;
            let coords = unrows(coord_rows, t_obs, n, 3);
            let mut rep = Array3::zeros((t_obs, n, 3));
            for f in 0..t_obs {
                for j in 0..n {
                    for k in 0..3 {
                        rep[[f, j, k]] = seed_pose[[j, k]] + OUTPUT_SCALE * coords[[f, j, k]];
                    }
                }
            }
            output.repaired = Some(MotionSequence::new(rep, task.observation.fps())?);
            head_aux2 = Some(HeadTaskCache {
                block_cache,
                block_out_jf: jf,
            });
        }

        let cache = ForwardCache {
            pri: pri_cache,
            aux1: a1_cache,
            aux2: a2_cache,
            gsu_layers,
            head_pri,
            head_aux1,
            head_aux2,
        };
        Ok((output, cache))
    }

    /// Builds self-supervised companions deterministically from `eval_seed`
    /// and returns the forecast for `observation`.
    pub fn predict_primary(
        &self,
        params: &ParamSet,
        observation: &MotionSequence,
        eval_seed: u64,
    ) -> Result<MotionSequence> {
        let task = self.companion_task(observation, eval_seed)?;
        let (out, _) = self.forward(params, &task, WhichOutputs::pri_only())?;
        Ok(out.prediction()?.clone())
    }

    /// Wraps a bare observation into a [`SampleTask`] with seeded companions.
    /// The target slot is filled with a frozen-pose placeholder; prediction
    /// and adaptation never read it.
    pub fn companion_task(&self, observation: &MotionSequence, eval_seed: u64) -> Result<SampleTask> {
        if observation.n_frames() != self.config.obs_len
            || observation.n_joints() != self.config.n_joints
        {
            return Err(Error::Shape(format!(
                "observation is {}x{}, config expects {}x{}",
                observation.n_frames(),
                observation.n_joints(),
                self.config.obs_len,
                self.config.n_joints
            )));
        }
        let padded = observation.pad_with_seed(self.config.horizon)?;
        let placeholder = padded.slice_frames(self.config.obs_len, self.config.seq_len())?;
        let mut rng = crate::seeds::rng_for(eval_seed, &[0xc0]);
        SampleTask::build(
            observation.clone(),
            placeholder,
            self.config.corruption_ratio,
            String::new(),
            String::new(),
            &mut rng,
        )
    }
}
