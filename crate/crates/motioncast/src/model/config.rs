//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::attention::ScaleMode;
use crate::error::{Error, Result};

/// Widths of the scramble-detector FC stack between the flattened features
/// and the logit.
pub const AUX1_FC_WIDTHS: [usize; 3] = [256, 128, 64];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// joints per pose (N)
    pub n_joints: usize,
    /// observed frames (T)
    pub obs_len: usize,
    /// predicted frames (ΔT)
    pub horizon: usize,
    /// feature channels per joint (C)
    pub channels: usize,
    /// residual blocks in each branch's shared stack
    pub n_shared_blocks: usize,
    /// attention heads (H)
    pub heads: usize,
    /// per-head width (d)
    pub head_dim: usize,
    /// fraction of (frame, joint) cells zeroed for the repair branch
    pub corruption_ratio: f64,
    /// cross-branch gated messages at every shared layer
    pub gsu_enabled: bool,
    pub aux1_enabled: bool,
    pub aux2_enabled: bool,
    pub scale_mode: ScaleMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl ModelConfig {
    /// Tiny config used by the finite-difference suites.
    pub fn miniature() -> Self {
        Self {
            n_joints: 3,
            obs_len: 4,
            horizon: 2,
            channels: 8,
            n_shared_blocks: 1,
            heads: 2,
            head_dim: 4,
            corruption_ratio: 0.2,
            gsu_enabled: true,
            aux1_enabled: true,
            aux2_enabled: true,
            scale_mode: ScaleMode::SqrtD,
        }
    }

    /// Trainable-on-a-desktop default.
    pub fn desk_default() -> Self {
        Self {
            n_joints: 17,
            obs_len: 25,
            horizon: 25,
            channels: 64,
            n_shared_blocks: 2,
            heads: 8,
            head_dim: 64,
            corruption_ratio: 0.2,
            gsu_enabled: true,
            aux1_enabled: true,
            aux2_enabled: true,
            scale_mode: ScaleMode::SqrtD,
        }
    }

    /// Full-size configuration from the original architecture.
    pub fn paper_scale() -> Self {
        Self {
            channels: 512,
            n_shared_blocks: 9,
            ..Self::desk_default()
        }
    }

    /// Padded sequence length L = T + ΔT.
    pub fn seq_len(&self) -> usize {
        self.obs_len + self.horizon
    }

    /// Input width of the scramble detector's first FC layer (the flattened
    /// L×N×C feature block).
    pub fn aux1_flat_len(&self) -> usize {
        self.seq_len() * self.n_joints * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0
            || self.channels == 0
            || self.n_shared_blocks == 0
            || self.heads == 0
            || self.head_dim == 0
            || self.horizon == 0
        {
            return Err(Error::Config(
                "model dimensions must all be positive".into(),
            ));
        }
        if self.obs_len < 2 {
            return Err(Error::Config(
                "observation window needs at least 2 frames".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.corruption_ratio) {
            return Err(Error::Config(format!(
                "corruption ratio must lie in [0, 1), got {}",
                self.corruption_ratio
            )));
        }
        Ok(())
    }
}
