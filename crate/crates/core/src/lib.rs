//! Modular recurrent networks for per-stage quality prediction over
//! multi-stage manufacturing sequences.

pub mod baseline;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod init;
pub mod layers;
pub mod losses;
pub mod network;
pub mod params;
pub mod prototypes;
pub mod stage_modules;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{ModelKind, Network};
pub use tensor::Tensor;
