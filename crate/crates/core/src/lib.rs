pub mod dataio;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/interpretation.md")]
    mod interpretation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
