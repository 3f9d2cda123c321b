pub mod error;
pub mod factorize;
pub mod ingest;
pub mod rng;

pub use error::{Error, Result};
pub mod policy;
pub mod state;
pub mod estimators;
pub mod stats;
pub mod simulator;
pub mod report;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/states.md")]
    mod states {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/significance.md")]
    mod significance {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
