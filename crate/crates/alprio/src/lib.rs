//! Adaptable task-based annotation prioritisation.
//!
//! A recurrent controller is meta-trained with PPO across a distribution of
//! synthetic segmentation-task environments, then deployed weight-frozen
//! inside a batch-mode active-learning loop where its RNN state adapts
//! through reward feedback. The crate covers the full pipeline: synthetic
//! task generation, the segmentation predictor, controller training, the AL
//! engine with baseline strategies, and the evaluation/analysis tooling.

pub mod al;
pub mod analysis;
pub mod checkpoint;
pub mod controller;
pub mod error;
pub mod meta_train;
pub mod nn;
pub mod par;
pub mod ppo;
pub mod predictor;
pub mod reward;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
