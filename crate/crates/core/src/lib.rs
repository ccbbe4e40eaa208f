//! Desk-scale laboratory for knowledge distillation under few-shot
//! semi-supervision.
//!
//! A student model (a small ReLU feature extractor plus one or two linear
//! prediction heads) is trained from a handful of labels and the categorical
//! predictions of a frozen teacher. Two training regimes are supported:
//!
//! - **Single-head optimization (SHO)**: one shared head receives the
//!   weighted sum of the supervised cross-entropy loss and the distillation
//!   KL loss.
//! - **Dual-head optimization (DHO)**: two heads on a shared extractor, one
//!   per loss, combined at inference time by interpolating their output
//!   probability vectors.
//!
//! Besides training and inference, the crate measures gradient conflicts
//! between the supervised and distillation signals ([`losses`]), runs a
//! post-training `(alpha, beta)` grid search ([`inference`]), and numerically
//! verifies the optimality/equivalence properties that justify dual-head
//! interpolation ([`theory`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod presets;
pub mod seeding;
pub mod teacher;
pub mod theory;
pub mod trainer;

pub use error::{CoreError, Result};
