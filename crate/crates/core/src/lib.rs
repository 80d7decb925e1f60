//! Desk-scale toolkit for layer-wise analysis of transformer QA models.
//!
//! The crate trains a small bidirectional encoder on a synthetic multi-hop
//! deduction task, captures every layer's token representations, and provides
//! the machinery to analyse them: edge-probing classifiers per layer,
//! 2-D projections with cluster verification, and task-by-layer phase
//! matrices rendered as static SVG reports.

pub mod analysis;
pub mod encoder;
pub mod persistence;
pub mod probing;
pub mod rng;
pub mod synthgen;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod viz;

pub use encoder::{EncodedInput, HiddenStateTrace, Model, ModelConfig, Role};
pub use rng::Rng;
pub use tensor::Tensor;
