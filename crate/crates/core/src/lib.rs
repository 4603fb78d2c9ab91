//! Difficulty-aware training for continuous emotion prediction.
//!
//! A first multi-task network learns emotion together with either input
//! reconstruction or rater disagreement; its auxiliary outputs become
//! per-frame difficulty indicators that are appended to the inputs of a
//! second, single-task network. The crate also carries the evaluation stack:
//! concordance metrics, significance tests, post-processing and late fusion.

pub mod data;
pub mod difficulty;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod matrix;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod training;

pub use data::{Dataset, Dimension, Partition};
pub use difficulty::{DifficultyIndicator, DifficultyMode, SumConvention};
pub use error::{DdatError, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentRecord, System};
pub use fusion::{FitOptions, FusionModel};
pub use matrix::Matrix;
pub use metrics::{ccc, fisher_compare};
pub use network::{GruNetwork, NetworkConfig};
pub use postprocess::PostProcessParams;
pub use training::{MtlWeights, TrainRun, TrainingConfig};
