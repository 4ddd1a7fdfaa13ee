//! Real-time Siamese tracking with a meta-learned, target-aware feature
//! space.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`optim`], [`rng`]: numeric substrate.
//! - [`matcher`]: the fully-convolutional Siamese matching network.
//! - [`meta`]: the meta-learner that turns last-layer loss gradients into
//!   extra kernels and channel attention.
//! - [`tracker`]: the online tracking loop.
//! - [`world`]: deterministic synthetic videos and sequence I/O.
//! - [`eval`]: one-pass-evaluation metrics and reports.
//! - [`oracle`], [`selftest`]: brute-force references and numerical
//!   self-checks.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geom;
pub mod image;
pub mod manifest;
pub mod matcher;
pub mod meta;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod tracker;
pub mod world;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use optim::Adam;
pub use rng::Rng;
pub use tensor::Tensor;
