//! Multi-stage knowledge integration for continual learning of a dual
//! encoder, at desk scale.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure
//! computation: the gradient tape, the toy dual encoder, prototypes, the
//! distillation losses, weight-space averaging, the synthetic task streams,
//! the training loop and the accuracy-matrix metrics. File formats and the
//! command line live in the `mulki` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod protostore;
pub mod rng;
pub mod runner;
pub mod taskgen;
pub mod tensor;
pub mod weightspace;

pub use encoder::{DualEncoder, EncoderDims, ModelSnapshot, TEMPLATE_TOKEN};
pub use error::{Error, Result};
pub use metrics::AccuracyMatrix;
pub use protostore::{GammaSchedule, PrototypeStore};
pub use runner::{HyperParams, RunRecord};
pub use taskgen::{StreamConfig, StreamMode, StreamSpec};
pub use tensor::{Graph, Tensor, Var};
pub use weightspace::{WeMode, WeState};
