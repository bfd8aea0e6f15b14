//! Desk-scale vision-and-language models built from a minimal f64 autodiff
//! engine, with MLP, tiny-attention, and transformer fusion layers, the
//! three standard pre-training objectives, an analytical parameter/FLOP
//! accountant, and a deterministic training harness.

pub mod accounting;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
