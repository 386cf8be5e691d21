//! Vision-transformer foundation-model toolkit for crop imagery.
//!
//! The crate is built bottom-up on a small f64 reverse-mode autodiff engine
//! ([`autograd`]) and provides the Pre-LN ViT backbone, self-supervised
//! pretraining with a momentum teacher, frozen-teacher distillation, a
//! feature-pyramid adapter, frozen-backbone task heads, evaluation metrics,
//! a synthetic "blob-world" data generator, and checkpoint / config I/O.

pub mod adapter;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod distill;
pub mod error;
pub mod heads;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod pca;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use par::Exec;
pub use rng::CounterRng;
pub use tensor::{ParamId, ParamStore, Parameterized, Tensor};
