//! Optimizer, training loop, depth metrics and the finite-difference suite.

pub mod adam;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use adam::Adam;
pub use config::{Precision, TrainConfig};
pub use gradcheck::{gradcheck_suite, GradCheck, GRADCHECK_STEP, GRADCHECK_TOL};
pub use metrics::{evaluate, MetricsReport, Scaling};
pub use train::{
    complexity, evaluate_checkpoint, evaluate_model, predict_all, run, sequence_loss, train, CheckpointMeta, Complexity,
    Model, TrainOutcome,
};
