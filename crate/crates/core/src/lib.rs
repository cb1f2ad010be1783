//! Progressive multilayer perceptron construction.
//!
//! A network is grown one block of rectifier neurons at a time. Each new
//! block is optimized on a sampled subset of the training data, with one
//! candidate per hyperparameter combination; the validation-best candidate
//! is kept and frozen. The finished topology is fine-tuned on the full
//! training set.

pub mod dataset;
pub mod error;
pub mod hyperopt;
pub mod network;
pub mod numerics;
pub mod progression;
pub mod sampling;
pub mod synthetic;
pub mod trainer;

pub use dataset::{DataSplit, Dataset, LabelColumn, Standardizer};
pub use error::{Error, Result};
pub use hyperopt::{CandidateResult, GridSpec, HyperGrid, HyperParams};
pub use network::{Block, BlockCache, Layer, Topology, TrainableParams};
pub use numerics::{AdamState, Matrix, RngState};
pub use progression::{ProgressionConfig, RunError, RunReport, StepRecord, SubsetSize};
pub use sampling::{Representation, SelectionContext, Strategy, Subset, UniqueTracker};
pub use trainer::{SampleSource, TrainStats};
