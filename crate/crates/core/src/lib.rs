//! Differentiable toolkit for soft semantic region-adaptive normalization
//! and a desk-scale coarse-to-fine room-emptying generator.
//!
//! The crate builds up from a dense tensor type and a tape-based
//! reverse-mode autodiff engine to the full pipeline: semantic-map
//! sharpening, region-wise style pooling, soft style broadcast, a linear
//! dense-layout head over decoder features, coarse and refine generator
//! networks with a patch discriminator, synthetic paired scene data, and a
//! deterministic training loop. Every differentiable operation is verified
//! against central finite differences.

pub mod autodiff;
pub mod cli;
pub mod data_synth;
pub mod error;
pub mod io;
pub mod layout;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod softsean;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Dtype, LabelMap, Scalar, Tensor};
