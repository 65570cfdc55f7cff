//! Line-oriented `key=value` run configuration covering the model, training
//! and meta/adaptation settings. Unknown keys are rejected so typos fail
//! loudly; the resolved state renders back to the same format for logging.

use std::path::Path;

use crate::attention::ScaleMode;
use crate::error::{Error, Result};
use crate::meta::{MetaConfig, MetaOrder};
use crate::model::ModelConfig;
use crate::pretrain::TrainConfig;

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub meta: MetaConfig,
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Applies one assignment; the key namespace is the union of the three
    /// config structs' fields (they do not overlap).
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_joints" => self.model.n_joints = parse_as(key, value)?,
            "obs_len" => self.model.obs_len = parse_as(key, value)?,
            "horizon" => self.model.horizon = parse_as(key, value)?,
            "channels" => self.model.channels = parse_as(key, value)?,
            "n_shared_blocks" => self.model.n_shared_blocks = parse_as(key, value)?,
            "heads" => self.model.heads = parse_as(key, value)?,
            "head_dim" => self.model.head_dim = parse_as(key, value)?,
            "corruption_ratio" => self.model.corruption_ratio = parse_as(key, value)?,
            "gsu_enabled" => self.model.gsu_enabled = parse_as(key, value)?,
            "aux1_enabled" => self.model.aux1_enabled = parse_as(key, value)?,
            "aux2_enabled" => self.model.aux2_enabled = parse_as(key, value)?,
            "scale_mode" => self.model.scale_mode = parse_as::<ScaleMode>(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_as(key, value)?,
            "decay_factor" => self.train.decay_factor = parse_as(key, value)?,
            "decay_every" => self.train.decay_every = parse_as(key, value)?,
            "batch_size" => self.train.batch_size = parse_as(key, value)?,
            "epochs" => self.train.epochs = parse_as(key, value)?,
            "eta" => self.train.eta = parse_as(key, value)?,
            "mu" => self.train.mu = parse_as(key, value)?,
            "seed" => self.train.seed = parse_as(key, value)?,
            "alpha" => self.meta.alpha = parse_as(key, value)?,
            "beta" => self.meta.beta = parse_as(key, value)?,
            "inner_steps_train" => self.meta.inner_steps_train = parse_as(key, value)?,
            "tta_steps" => self.meta.tta_steps = parse_as(key, value)?,
            "meta_batch" => self.meta.meta_batch = parse_as(key, value)?,
            "order" => self.meta.order = parse_as::<MetaOrder>(key, value)?,
            "tta_resample" => self.meta.tta_resample = parse_as(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a whole file body: `key=value` lines, `#` comments (whole-line
    /// or trailing), blank lines ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got {raw:?}",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Defaults overlaid with the file's assignments.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.meta.validate()
    }

    /// The fully resolved state in the same `key=value` format, one key per
    /// line, fixed order. `render` output parses back to an equal config.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let x = &self.meta;
        format!(
            "n_joints={}\nobs_len={}\nhorizon={}\nchannels={}\nn_shared_blocks={}\nheads={}\n\
             head_dim={}\ncorruption_ratio={}\ngsu_enabled={}\naux1_enabled={}\naux2_enabled={}\n\
             scale_mode={}\nlearning_rate={}\ndecay_factor={}\ndecay_every={}\nbatch_size={}\n\
             epochs={}\neta={}\nmu={}\nseed={}\nalpha={}\nbeta={}\ninner_steps_train={}\n\
             tta_steps={}\nmeta_batch={}\norder={}\ntta_resample={}\n",
            m.n_joints,
            m.obs_len,
            m.horizon,
            m.channels,
            m.n_shared_blocks,
            m.heads,
            m.head_dim,
            m.corruption_ratio,
            m.gsu_enabled,
            m.aux1_enabled,
            m.aux2_enabled,
            m.scale_mode,
            t.learning_rate,
            t.decay_factor,
            t.decay_every,
            t.batch_size,
            t.epochs,
            t.eta,
            t.mu,
            t.seed,
            x.alpha,
            x.beta,
            x.inner_steps_train,
            x.tta_steps,
            x.meta_batch,
            x.order,
            x.tta_resample,
        )
    }
}
