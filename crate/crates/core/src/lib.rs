pub mod dataset;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod proposals;
pub mod trainer;
pub mod ssl;

pub use error::{Error, Result};

/// Code listings from the guide in `book/`, run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/soft_labels.md")]
    mod soft_labels {}
    #[doc = include_str!("../../../book/src/head.md")]
    mod head {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/proposals.md")]
    mod proposals {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
