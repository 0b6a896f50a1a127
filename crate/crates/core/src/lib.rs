//! Structure-aware parameter-efficient fine-tuning of a miniature graph
//! transformer.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: `f64` tensors and a reverse-mode tape.
//! - [`graph`]: graphs, virtual nodes and the structure matrices S1–S4.
//! - [`model`]: the graph transformer backbone and masked-node pretraining.
//! - [`peft`]: G-Adapter and the baseline fine-tuning methods.
//! - [`training`]: losses, the Bregman proximal-point objective, the fit
//!   loop and evaluation metrics.
//! - [`diagnostics`]: feature-shift measurement, checkpoints and profiling.
//! - [`data`] and [`experiment`]: synthetic datasets and the experiment
//!   runner behind the `gadapter-lab` binary.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod peft;
pub mod tensor;
pub mod training;

pub use error::{LabError, Result};
