//! Experiment driver: synthetic data, configuration and reports.

mod config;
mod dataset;
mod experiment;

pub use config::{DataSource, ExperimentConfig, ModelDims, KEYS};
pub use dataset::{
    format_record, generate_dataset, language_alphabet, parse_record, read_tsv, write_splits, write_tsv, DatasetSpec,
    Input, InputEncoder, Language, Record, Splits, MIN_FRAMES,
};
pub use experiment::{
    evaluate, load_data, mode_vocab, run_experiment, train_mode, ExperimentReport, MetricsRow, ModeReport,
};
