//! Meta-learned multi-head estimation of gait phase, locomotion mode and
//! terrain incline from four-channel soft-sensor windows.

pub mod autodiff;
pub mod baselines;
pub mod dataset;
pub mod domain;
pub mod error;
pub mod eval;
pub mod meta;
pub mod network;
pub mod objective;
pub mod params;
pub mod synth;

pub use error::{Error, Result};
