//! Parameter storage, basic layers and the optimizer.

mod layers;
mod optim;
mod params;

pub use layers::{LayerNorm, Linear, Mlp};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamId, ParamStore};
