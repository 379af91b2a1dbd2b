//! Core algorithms for discrete native multimodal modeling at desk scale.
//!
//! Everything here is pure computation over in-memory values: residual vector
//! quantization with EMA codebooks, multimodal sequence layout and packing, a
//! depth-axis transformer head, a toy autoregressive backbone with its own
//! reverse-mode gradient tape, filtered GRPO objectives, a residual-encoder
//! reconstruction probe and a pipeline schedule simulator.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled.
//! File formats, configuration and the command line live in the `dina` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autograd;
pub mod depth_head;
pub mod error;
pub mod grpo;
pub mod math;
pub mod nn;
pub mod params;
pub mod pipeline_sim;
pub mod recon_probe;
pub mod rvq;
pub mod seqcodec;
pub mod tensor;
pub mod toy_model;

pub use error::{Error, Result};
pub use tensor::Tensor;
