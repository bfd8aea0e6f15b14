//! Supporting engineering: synthetic data, run configuration,
//! checkpointing, the training/evaluation loops, and scaling sweeps.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod sweep;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use data::{generate_dataset, Dataset, Sample, SyntheticTaskSpec};
pub use sweep::{run_scaling_sweep, SweepPlan};
pub use train::{evaluate, train, EvalTask};
