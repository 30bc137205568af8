//! A miniature vision-transformer toolkit: a small reverse-mode autodiff
//! tensor core, ViT models with sequential or parallel block layouts,
//! interchangeable patch stems, patch masking, scoped fine-tuning, an
//! analytic complexity analyzer and a desk-scale training harness.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod analyzer;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod kernels;
pub mod masking;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod stems;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autograd::{Grads, Mode, Tape, Var};
pub use config::{Layout, StemKind, StemNorm, StemSpec, ViTConfig};
pub use error::{Error, Result};
pub use finetune::{Scope, TuneScope};
pub use params::{Ctx, ParamId, ParamStore};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use vit::{build_model, Forward, Model};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
