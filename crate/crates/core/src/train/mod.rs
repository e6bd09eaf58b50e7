//! Training harness: objective and adversarial tracks.

pub mod adam;
pub mod checkpoint;
pub mod plan;
pub mod run;
pub mod step;

pub use adam::{grad_norm, AdamState};
pub use checkpoint::{Checkpoint, Progress};
pub use plan::{lr_at, AdamConfig, GanConfig, Phase, PhaseLoss, Track, TrainPlan};
pub use run::{list_checkpoints, run, run_on_pairs};
pub use step::{train_step_gan, train_step_objective, Batch, DiscriminatorState, GeneratorState, StepMetrics};
