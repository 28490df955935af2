//! Dual-generative empathetic dialogue: coupled context-to-response and
//! response-to-context transformers sharing a discrete emotion latent.

pub mod config;
pub mod data;
mod error;
pub mod inference;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod sweep;
pub mod training;

pub use config::{ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use model::{Direction, DualEmp};
