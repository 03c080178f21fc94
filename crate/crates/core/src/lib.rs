//! Multimodal (speech + text) emotion recognition with cross-modal
//! attention fusion, an acoustic gate and a four-part training objective.

pub mod augment;
pub mod autograd;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod mmi;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
