pub mod bits;
pub mod entropy;
pub mod error;
mod gf2poly;
pub mod gowf;
pub mod protocol;
pub mod reconcile;
pub mod stats;
pub mod toeplitz;
pub mod transport;

pub use bits::BitString;
pub use entropy::EntropySource;
pub use error::{PkdError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gowf.md")]
    mod gowf {}
    #[doc = include_str!("../../../book/src/toeplitz.md")]
    mod toeplitz {}
    #[doc = include_str!("../../../book/src/reconciliation.md")]
    mod reconciliation {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
    #[doc = include_str!("../../../book/src/statistics.md")]
    mod statistics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
