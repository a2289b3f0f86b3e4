//! Dual-path anomalous sound detection.
//!
//! A frequency-and-time excited network over linear magnitude spectrograms
//! runs alongside a 1-D convolutional network over the utterance spectrum.
//! Both are trained jointly with a sub-cluster AdaCos loss on machine-type ×
//! attribute classes, and test clips are scored by cosine distance to
//! per-machine prototype banks.

// `!(x > 0.0)` is the NaN-rejecting form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod excitation;
pub mod featuremaps;
pub mod ftc;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod scoring;
pub mod spectrum;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Mode, Var};
pub use config::{ExperimentConfig, Preset};
pub use error::{Error, Result};
pub use model::{Detector, LabelMap};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
