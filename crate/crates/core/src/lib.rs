//! Inference engine for a diagonal state-space model of an optical
//! leveling compressor, with the objective metrics and real-time benchmark
//! used to evaluate it.

pub mod ssm;
pub mod model;
pub mod weights;
pub mod stream;
pub mod metrics;
pub mod drc;
pub mod wav;
pub mod bench;
