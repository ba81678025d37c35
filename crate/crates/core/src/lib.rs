//! Promptable point-cloud segmentation: a hierarchical point encoder with
//! per-domain normalization, a click/text prompted mask decoder, training,
//! automatic mask generation and evaluation metrics.

// `!(x > 0.0)` is the NaN-rejecting form used in config validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod autoprompt;
pub mod backbone;
pub mod clicksim;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod maskdec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pcdata;
pub mod promptenc;
pub mod textsem;
pub mod train;

pub use error::{Error, Result};
