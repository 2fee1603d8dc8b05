// SPDX-License-Identifier: Apache-2.0

//! Full-body pose estimation from three sparse trackers (headset and two
//! controllers) with a hybrid state-space / attention sequence model.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`graph`], [`params`], [`optim`]: dense tensors, reverse-mode
//!   differentiation and Adam.
//! * [`ssd`]: the selective state space transformation in recurrent, matrix
//!   (dual) and chunked form.
//! * [`rotation`], [`kinematics`], [`pose`]: 6D rotations, the 22-joint body
//!   tree, forward kinematics and tracker feature synthesis.
//! * [`model`]: the network.
//! * [`loss`], [`metrics`]: training objective and evaluation metrics.
//! * [`motion`], [`synth`], [`window`], [`checkpoint`]: data and file formats.
//! * [`train`], [`eval`], [`bench`]: the workflows driven by the CLI.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kinematics;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod optim;
pub mod params;
pub mod pose;
pub mod rotation;
pub mod ssd;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
