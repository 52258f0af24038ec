//! Token Turing Machines: a recurrent cell whose state is a small set of
//! memory tokens, read and written by token summarisation around a token
//! processing unit.
//!
//! Layers, from the bottom up:
//!
//! * [`tensor`], [`autograd`], [`params`], [`gradcheck`]: dense rank-≤3
//!   tensors, a reverse-mode tape with a FLOP counter, and a
//!   finite-difference checker.
//! * [`summarizer`], [`memory`], [`processor`]: `S_k`, read/write and their
//!   ablations, and the processing unit with its output head.
//! * [`model`], [`loss`], [`optim`], [`train`]: the recurrent cell and
//!   baselines, training with truncated BPTT.
//! * [`tasks`], [`flops`], [`checkpoint`], [`config`]: synthetic tasks,
//!   static cost model, file formats and run configuration.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod loss;
pub mod memory;
pub mod model;
pub mod optim;
pub mod params;
pub mod processor;
pub mod summarizer;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use config::{RunConfig, TtmConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use params::ParamStore;
pub use tensor::{Real, Tensor};
