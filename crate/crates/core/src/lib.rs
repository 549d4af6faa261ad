//! Core of the self-supervised pretraining laboratory.
//!
//! Builds without `std` (only `alloc` is required). File IO, the CLI and
//! report emission live in the companion `sslab` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod augment;
pub mod codec;
pub mod contrastive;
pub mod data;
pub mod ebm;
pub mod energy_supervised;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod nn;
pub mod ood;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vqa;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
