//! Multi-task recurrent text classification.
//!
//! Per-task peephole LSTMs exchange information through gated coupling
//! terms, pair-wise bidirectional fusion layers and one global fusion
//! layer, all entering each task's candidate memory. Training uses Task
//! Oriented Sampling to build aligned K-tuples of samples and plain SGD on
//! the weighted sum of per-task cross-entropies.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{finite_diff_grad, Gradients, Tape, Var};
pub use data::{pad_collection, tos_sample, Sample, SampleCollection, TaskDataset, Vocab};
pub use model::{ModelConfig, MultiTaskModel, Topology};
pub use params::{ParamId, ParamStore};
pub use synth::{synth_generate, Scenario};
pub use tensor::Tensor;
pub use train::{joint_loss, ppg, sgd_step, train, TrainConfig};
