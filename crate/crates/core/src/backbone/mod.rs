//! Per-point feature extractor with per-domain normalization at every norm site.

mod encoder;
mod norm;

pub use encoder::{EncoderConfig, PointEncoder};
pub use norm::{DomainNorm, NormBranch, NormContext, NormMode, StatUpdate, SHARED_KEY};
