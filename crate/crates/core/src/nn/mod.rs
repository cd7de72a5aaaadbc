//! Decoder network and optimization utilities.

mod mlp;
mod optim;

pub use mlp::{Mlp, MlpCache};
pub use optim::{lr_at, Adam, Ema, Schedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
