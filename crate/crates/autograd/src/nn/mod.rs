//! Named parameters, basic layers and the AdamW optimizer.

mod layers;
mod optim;
mod params;

pub use layers::{Conv2d, LayerNorm, Linear};
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use params::{Param, ParamStore, Tracking, Vars};
