//! Desk-scale numerical laboratory for adaptive spatial weighting.
//!
//! Two mechanisms are implemented end to end on synthetic data:
//! a learnable per-pixel loss weighter for mask-conditioned denoising
//! ([`law`]) and a lightweight segmentation U-Net with selective
//! bidirectional skip attention ([`order`]). Both sit on a small f64
//! reverse-mode autodiff engine ([`tape`]) and are accompanied by a
//! parameter/FLOP profiler ([`profiler`]) and synthetic data tooling
//! ([`data`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod law;
pub mod nn;
pub mod ops;
pub mod order;
pub mod pnm;
pub mod profiler;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
