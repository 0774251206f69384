//! Routed low-rank editing of a frozen transformer, with an energy gate that
//! leaves inputs outside the adapters' domain untouched.
//!
//! The guide in `book/` walks through the pieces; [`harness::Run`] drives the
//! whole pipeline.

pub mod adapters;
pub mod backbone;
pub mod diagnostics;
pub mod error;
pub mod gate;
pub mod harness;
pub mod numerics;
pub mod router;
pub mod trainer;

pub use error::{MariError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/adapters.md")]
    mod adapters {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/gate.md")]
    mod gate {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
