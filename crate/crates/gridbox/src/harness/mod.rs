//! Experiment orchestration: configuration, corpus and pipeline runs,
//! ablations, training, and gradient verification.

pub mod ablation;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod train;

pub use ablation::{run_ablation, write_ablation_csv, AblationRow};
pub use config::{load_config, load_config_file, ExperimentConfig};
pub use experiment::{run_experiment, run_with_toggles, write_outputs, ExperimentOutput, Toggles};
pub use gradcheck::{run_gradchecks, CheckOutcome};
pub use train::{train_all, TrainSettings, TrainSummary};
