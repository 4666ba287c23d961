//! Desk-scale class-incremental continual learning on a synthetic dual-tower
//! embedding model.
//!
//! The pipeline: a frozen teacher snapshot guides construction of adversarial
//! anchors near the old-new class interface, training distills cross-modal
//! geometry on those anchors while regularizing text-embedding neighborhoods,
//! and after each task old-class prototypes are transferred along anchor
//! displacement estimates. Inference fuses cross-modal and prototype logits.

pub mod error;
pub mod graph;
pub mod tensor;

pub mod anchors;
pub mod config;
pub mod metrics;
pub mod model;
pub mod prototypes;
pub mod report;
pub mod runner;
pub mod stream;
pub mod training;

/// Concrete scalar used by the pipeline.
pub type Scalar = f64;
pub type Tensor = tensor::TensorOf<Scalar>;
pub type Graph = graph::Graph<Scalar>;
pub type Evaluation = graph::Evaluation<Scalar>;
