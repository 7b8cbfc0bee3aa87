//! Desk-scale laboratory for modality-targeted debiasing of miniature
//! vision-language models.
//!
//! The crate is organized around a small dense-tensor core with hand-derived
//! gradients ([`tensor`], [`nn`], [`loss`]), a synthetic gender-annotated
//! dataset generator ([`forge`]), two toy model archetypes ([`models`]),
//! the debiasing methods themselves ([`debias`]), and a probe-based
//! evaluation harness ([`eval`]).
//!
//! Everything here is pure computation over value types: no file IO, no
//! global state, no threads. All randomness flows from explicit [`rng::Rng`]
//! seeds and every operation is bitwise deterministic across platforms.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod checkpoint;
pub mod dataset_fmt;
pub mod debias;
pub mod error;
pub mod eval;
pub mod forge;
pub mod loss;
pub mod math;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{FreezeMask, ParamSet, Tag, Tensor};
