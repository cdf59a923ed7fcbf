//! Core algorithms for retrieval-information-augmented generation.
//!
//! Everything here is `no_std` + `alloc`: a small reverse-mode autograd
//! substrate, the list-wise retrieval features, the bridge encoder with its
//! query-document matching head, a toy decoder language model with an
//! embedding-level input interface, retrieval-aware prompt assembly and the
//! joint training step. File formats, timing and the CLI live in the `r2ag`
//! companion crate.

#![no_std]

extern crate alloc;

pub mod embedding;
pub mod error;
pub mod features;
pub mod graph;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod prompting;
pub mod r2former;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
