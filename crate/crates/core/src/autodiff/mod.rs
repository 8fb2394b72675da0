//! Reverse-mode differentiation over dense tensors, plus the optimizer and
//! learning-rate schedule used by every trainable module.

pub mod gradcheck;
pub mod kernels;
mod ops;
mod optim;
mod params;
mod tape;

pub use ops::{conv2d_plain, scaled_dot_attention};
pub use optim::{onecycle_lr, AdamW, AdamWConfig};
pub use params::{Init, ParamEntry, ParamId, ParamStore, Session};
pub use tape::{Gradients, Tape, Var};
