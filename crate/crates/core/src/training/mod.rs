//! Inner misreport search and the outer training loop.

mod adam;
mod batch;
mod misreport;
mod trainer;

pub use adam::Adam;
pub use batch::{make_batch, pad_batch, Batch, PaddedBatch, TrainingData};
pub use misreport::{optimize_misreports, regret_at, utilities_at, MisreportOutcome};
pub use trainer::{train, Objective, ObjectiveState, TrainConfig, Trainer, ValidationRow};
