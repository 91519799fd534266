//! Two-stage bias mitigation for group-labelled classification.
//!
//! A small MLP is first trained with ERM for a fraction of the epoch
//! budget. Groups (attribute × label cells) are then split into best and
//! worst by validation accuracy, and the model is fine-tuned with a
//! bias-mitigation objective (GroupDRO, group-balanced resampling or JTT)
//! plus a continual-learning penalty (LwF distillation or EWC) that keeps
//! the best groups from degrading.
//!
//! Modules, bottom up: [`tensor`] (autodiff), [`model`], [`datasets`],
//! [`methods`] (losses and regularizers), [`trainer`], [`metrics`] and
//! [`experiments`] (config-driven runs and reports).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod experiments;
pub mod methods;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
