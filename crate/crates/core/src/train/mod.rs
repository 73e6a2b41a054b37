//! Sampled-decomposition training: the epsilon-greedy sampler, the
//! single-sample gradient estimator, the optimizer and the training loop.

mod optimizer;
mod sampler;
mod schedule;
mod trainer;

pub use optimizer::{add_l2, clip_global_norm, Adam, OptimizerConfig};
pub use sampler::{sample_decomposition, sample_with_tape, sampler_distribution, total_variation};
pub use schedule::{interpolate, EpsilonSchedule, ScheduleShape};
pub use trainer::{
    estimate_gradient, evaluate_cer, example_rng, fixed_decomposition, train_run, write_stats_csv, Example,
    TrainConfig, TrainMode, TrainOutcome, TrainStats, Trainer,
};
