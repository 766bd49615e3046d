//! Massive-MIMO CSI positioning: phase calibration, SAGE multipath
//! extraction, ε-SVR fingerprinting, geometric baselines and effective SNR.

pub mod array;
pub mod calib;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fingerprint;
pub mod geo;
pub mod link;
pub mod pipeline;
pub mod sage;
pub mod svr;

pub use error::{Error, Result};
