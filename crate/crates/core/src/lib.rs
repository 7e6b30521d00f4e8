#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod backbone;
pub mod binary;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod exif;
pub mod filterbank;
pub mod gmm;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod pretext;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/filter-bank.md")]
    pub mod filter_bank {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    pub mod backbone {}
    #[doc = include_str!("../../../book/src/pretext.md")]
    pub mod pretext {}
    #[doc = include_str!("../../../book/src/one-class.md")]
    pub mod one_class {}
    #[doc = include_str!("../../../book/src/binary.md")]
    pub mod binary {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
