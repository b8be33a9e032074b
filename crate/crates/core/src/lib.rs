//! Image classification benchmark harness and model-agnostic attribution engine.
//!
//! The crate is organised around the pipeline an experiment walks through:
//!
//! * [`imaging`]: decoding, the fixed resize/crop/normalize chain, augmentation
//!   and the XPB1 tensor container.
//! * [`dataset`]: class-folder corpora, seeded stratified splits and batching.
//! * [`nnet`]: a small CPU network with activation capture and reverse-mode
//!   gradients, the head-variant builder, optimizers and the training loop.
//! * [`gateway`]: one black-box classifier handle over native and remote backends.
//! * [`explain`]: LIME, Kernel SHAP (with an exact Shapley oracle), Grad-CAM and
//!   the renderers for each.
//! * [`evalbench`]: confusion matrices, metrics, experiment configs and grids.
//! * [`synthetic`]: generated corpora and contrived models used by tests and demos.

pub mod dataset;
pub mod evalbench;
pub mod explain;
pub mod gateway;
pub mod imaging;
pub mod nnet;
pub mod rng;
pub mod synthetic;

pub use dataset::{LabeledCorpus, SplitPlan};
pub use evalbench::{ConfusionMatrix, ExperimentConfig, MetricsReport};
pub use explain::{AttributionResult, Method, SuperpixelMap};
pub use gateway::ModelHandle;
pub use imaging::{ImageTensor, NormalizationConstants, RangeTag};
pub use nnet::{Network, OptimizerSpec};
