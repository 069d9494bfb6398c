//! Residual refinement of digital surface models.

pub mod acquisition;
pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod nn;
pub mod normalization;
pub mod ortho;
pub mod raster;
pub mod refine;
pub mod sampling;
pub mod synthcity;
pub mod training;

pub use error::{Error, Result};
pub use raster::{GridHeader, Mask, Raster2D};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rasters.md")]
    mod rasters {}
    #[doc = include_str!("../../../book/src/pairs.md")]
    mod pairs {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/ortho.md")]
    mod ortho {}
    #[doc = include_str!("../../../book/src/normalization.md")]
    mod normalization {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthcity.md")]
    mod synthcity {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
