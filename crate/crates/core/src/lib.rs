pub mod autograd;
pub mod checkpoint;
pub mod cnn;
pub mod cotrain;
pub mod error;
pub mod features;
pub mod gcn;
pub mod graph;
pub mod gradcheck;
pub mod image;
pub mod nn;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod segadapt;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/cell-graphs.md")]
    mod cell_graphs {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/cotraining.md")]
    mod cotraining {}
    #[doc = include_str!("../../../book/src/explain.md")]
    mod explain {}
    #[doc = include_str!("../../../book/src/segadapt.md")]
    mod segadapt {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/config-reference.md")]
    mod config_reference {}
}
