//! Experiment harness: datasets, training runs, evaluation, and ablation
//! grids.

pub mod data;
pub mod grid;
pub mod train;

pub use data::{gen_synthetic, load_dataset, save_dataset, SyntheticSpec};
pub use grid::{render_grid, run_grid, GridResult, GridSpec};
pub use train::{
    bow_baseline_accuracy, evaluate, prepare, run_eval, run_training, train, EpochRecord,
    Prediction, Prepared, RunConfig, TrainOutcome,
};
