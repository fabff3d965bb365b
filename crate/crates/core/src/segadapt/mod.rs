//! Segmentation losses for adversarial domain adaptation and a toy
//! source-to-target adaptation run.

mod losses;
mod toy;

pub use losses::*;
pub use toy::*;
