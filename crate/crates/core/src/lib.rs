//! CTC blank-triggered dynamic layer skipping for conformer-style CTC encoders.

pub mod bench;
pub mod cli;
pub mod ctc;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/ctc.md")]
    mod ctc {}
    #[doc = include_str!("../../../book/src/skipping.md")]
    mod skipping {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/bench.md")]
    mod bench {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
