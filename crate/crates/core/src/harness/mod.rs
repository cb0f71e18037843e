//! Training loop, configuration, checkpoints, recipes and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod recipes;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, HeadInfo, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AugmentTag, DataSource, HeadInit, LossTag, PretrainConfig, RunConfig, Schedule};
pub use recipes::{
    compare_for_seed, feature_shift, finding_base, finding_foundation, median, reproduce_finding, sweep, Finding,
    FindingMedians, SeedComparison, SweepAxis, SweepRow,
};
pub use train::{
    fit, load_data, pretrain_backbone, prepare_model, resume, train, train_with, EpochMetrics, FitOptions, PretrainRun,
    Sgd, TrainRun,
};
