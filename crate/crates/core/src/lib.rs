//! Masked cost-volume autoencoding (MCVA) for optical flow at desk scale.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff engine,
//! frozen convolutional feature encoders, all-pairs cost volumes, block-sharing
//! cost-map masking, the masked cost tokenizer with latent aggregation, the
//! cross-attention cost decoder with its reconstruction and flow heads,
//! synthetic data with ground-truth flow, and the training/evaluation loops.

pub mod autodiff;
pub mod cost_encoder;
pub mod costvol;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod masking;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ParamId, ParamStore, Session, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
