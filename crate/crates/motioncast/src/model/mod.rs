//! The forecaster network: configuration, parameter layout, and the forward
//! and backward passes.

pub mod backward;
pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use backward::OutputGrads;
pub use checkpoint::{config_diff, read_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use forward::{ForwardCache, ForwardOutput, Model, WhichOutputs, INPUT_SCALE, OUTPUT_SCALE};
pub use params::{partition_of, ParamSet, Partition};
