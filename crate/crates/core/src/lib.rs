//! Multi-frame super-resolution from bursts of raw frames.
//!
//! A burst of low-resolution Bayer mosaics is modelled as
//! `y_k = D B W_{p_k} x + noise`: an affine warp, block averaging and
//! color subsampling of one high-resolution image `x`. The solver
//! ([`solver::hqs_run`]) alternates a gradient step on the data term, a
//! Gauss-Newton step on every frame's motion and a total-variation
//! proximal step.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod forward;
pub mod image;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod registration;
pub mod solver;
pub mod synth;
pub mod tv;

pub use error::{Error, Result};
pub use forward::{DegradeConfig, Observation};
pub use image::{BayerFrame, PlanarImage};
pub use motion::AffineMotion;
pub use solver::{HqsConfig, HqsOutput};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/forward-model.md")]
    mod forward_model {}
    #[doc = include_str!("../../../book/src/registration.md")]
    mod registration {}
    #[doc = include_str!("../../../book/src/solver.md")]
    mod solver {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
