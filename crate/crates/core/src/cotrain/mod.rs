//! Asymmetric co-training of the pixel and graph branches.
//!
//! The CNN minimises label-smoothed cross-entropy, the GCN plain
//! cross-entropy, and each adds a KL pull towards the other's prediction
//! once the two disagree by at least `d_kl`.

mod losses;
mod metrics;
mod train;

pub use losses::*;
pub use metrics::*;
pub use train::*;
