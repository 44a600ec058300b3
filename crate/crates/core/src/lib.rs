//! Response-based knowledge distillation for compact CNN classifiers.
//!
//! The crate trains a teacher network on labelled images, distils its
//! temperature-softened predictions into the small DCSNet student, evaluates
//! both with confusion-matrix metrics and explains the student with Grad-CAM.
//!
//! Layout:
//!
//! - [`tensor`]: dense arrays and a tape for reverse-mode gradients.
//! - [`models`]: DCSNet, teacher archetypes, checkpoints.
//! - [`distill`]: softened softmax and the soft/hard/total losses.
//! - [`train`]: Adam and the teacher-then-student training procedure.
//! - [`data`]: image folders, PPM, augmentation, splits, synthetic data.
//! - [`metrics`]: confusion matrices, precision/recall/F1.
//! - [`explain`]: Grad-CAM heatmaps and overlay rendering.
//! - [`cli`]: the `dcsnet` command line and sweep harness.

pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
