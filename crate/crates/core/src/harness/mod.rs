//! Experiment plumbing: configuration, synthetic data, training, model files.

pub mod config;
pub mod data;
pub mod model_io;
pub mod train;

pub use config::{parse_config, ClusterConfig, ClusterMethod, Counts, DataConfig, ExperimentConfig, Precision, RunConfig};
pub use data::{generate_dataset, Split, SyntheticDataset};
pub use model_io::{decode_model, encode_model, load_model, save_model};
pub use train::{
    evaluate, metrics_csv, parse_prune_sets, run_experiment, write_outputs, MetricsRow, Trainer, TrainOutcome,
};
