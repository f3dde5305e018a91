//! Spatial-context aware dynamic fusion with soft mixture-of-experts for
//! multimodal wireless fingerprint localization.

pub mod channel;
pub mod diff;
pub mod encoders;
pub mod error;
pub mod mmd;
pub mod nn;
pub mod pipeline;
pub mod soft_moe;
pub mod spatial;
pub mod task_moe;

pub use error::{Error, Result};
