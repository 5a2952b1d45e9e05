//! End-to-end simulation of metasurface-assisted OFDM links whose
//! metasurface phases and transceiver networks are trained jointly.

pub mod channel;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod deploy;
pub mod emnn;
pub mod error;
pub mod evaluator;
pub mod metasurface;
pub mod plot;
pub mod trainer;
pub mod wavemath;

pub use error::{Error, Result};
