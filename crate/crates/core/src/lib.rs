//! Diffusion-based framewise phase labeling with differentiable
//! temporal-logic constraints.

#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
pub mod error;
pub mod gradsuite;
pub mod labels;
pub mod logic;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod pipeline;
pub mod schedule;
pub mod synth;
pub mod tensor_core;

pub use error::{Error, Result};
