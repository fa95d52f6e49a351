//! Probe training: depth and normal losses, AdamW with a warmup-cosine
//! schedule, and the training/evaluation loops.

mod losses;
mod optim;
mod train;

pub use losses::*;
pub use optim::*;
pub use train::*;
