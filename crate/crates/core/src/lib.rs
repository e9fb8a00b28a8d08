//! Membership-inference audit of a gaze-regression model.
//!
//! The pipeline trains a multi-branch dense gaze regressor on part of a
//! synthetic cohort, collects white-box traces (outputs, weight gradients,
//! loss, label) for every frame, learns a frame-level membership classifier
//! on those traces, and aggregates frame probabilities into recording-level
//! decisions with a linear SVM.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod cohort;
pub mod config;
pub mod error;
pub mod evalstat;
pub mod inference;
pub mod nnet;
pub mod pipeline;
pub mod target;

pub use error::{Error, Result};
