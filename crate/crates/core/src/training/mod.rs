//! Optimizer, schedules, checkpoints and the training loop.

mod checkpoint;
mod optim;
mod trainer;

pub use checkpoint::*;
pub use optim::*;
pub use trainer::*;
