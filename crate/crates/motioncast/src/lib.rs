//! Skeleton motion forecasting with self-supervised test-time adaptation.
//!
//! The model is a three-branch sparse-relay transformer: a primary
//! forecasting branch, a frame-scramble detector and a missing-joint repair
//! branch share a stack of residual spatio-temporal blocks coupled by gated
//! sharing units. After joint pre-training, a meta-auxiliary phase tunes the
//! weights so that a handful of gradient steps on the self-supervised losses
//! specializes the forecaster to each test sequence.

pub mod attention;
pub mod blocks;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gsu;
pub mod losses;
pub mod manifest;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod runconfig;
pub mod seeds;
pub mod selfsup;
pub mod skeleton;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ParamSet};
pub use motion::MotionSequence;
pub use selfsup::SampleTask;
pub use skeleton::SkeletonTopology;
