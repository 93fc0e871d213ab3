//! Fault injection campaigns for small convolutional networks.
//!
//! Models are trained and evaluated with a small tape-based autodiff engine
//! ([`graph`]). Attribution scores ([`attribution`]) and bit-level weights
//! ([`bitfloat`]) drive an importance sampler over single bit-flip faults
//! ([`fault_model`]), which [`campaign`] evaluates in parallel.

pub mod attribution;
pub mod bitfloat;
pub mod campaign;
pub mod data;
pub mod error;
pub mod fat;
pub mod fault_model;
pub mod graph;
pub mod injector;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
