//! Deterministic federated-learning simulator with interleaved authentic and
//! synthetic rounds, selective additively homomorphic encryption, a
//! gradient-inversion attack and the cost/privacy measurement harness.

pub mod analysis;
pub mod attack;
pub mod crypto;
pub mod data;
pub mod error;
pub mod nn;
pub mod protocol;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
