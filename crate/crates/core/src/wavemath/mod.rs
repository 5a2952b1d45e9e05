//! Numerical core: complex matrices, random streams, reverse-mode
//! differentiation and optimizers.

pub mod graph;
pub mod init;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod rng;

pub use graph::{bce_value, sigmoid, BatchStats, CompGraph, NodeId, Value};
pub use init::xavier_init;
pub use matrix::{block_matmul, cmatmul, CMat, RMat, J};
pub use optim::{wrap_phase, OptimizerKind, OptimizerSettings, OptimizerState};
pub use params::{Gradients, Param, ParamId, ParamKind, ParamStore};
pub use rng::{RngStreams, StreamRng};
