//! Gradient-based meta-learning with a learned, label-free critic loss.
//!
//! The crate is layered bottom-up:
//!
//! * [`autodiff`] — reverse-mode differentiation whose backward passes can
//!   themselves be differentiated.
//! * [`networks`] — functional classifiers and the dilated-convolution
//!   critic, all taking their parameters explicitly.
//! * [`metalearn`] — MAML++ inner/outer loops and the critic-driven target
//!   adaptation step.
//! * [`tasks`] — synthetic few-shot task families and the episode corpus
//!   file format.
//! * [`harness`] — experiment configuration, multi-seed runs, statistics
//!   and report rendering.

pub mod autodiff;
pub mod harness;
pub mod metalearn;
pub mod networks;
pub mod params;
pub mod rng;
pub mod tasks;

// Meta-gradients churn through multi-megabyte critic buffers; the system
// allocator hands each one back to the kernel and page-faults it in again.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use thiserror::Error;

pub use autodiff::{AutodiffError, Tensor};
pub use params::{ParamSet, Partition};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("task sampling: {0}")]
    Task(String),
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("unknown {kind} `{value}`")]
    Unknown { kind: &'static str, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
