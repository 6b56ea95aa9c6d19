//! Optimization: AdamW, the learning-rate schedule and the training loop.

pub mod optim;
pub mod run;

pub use optim::{adamw_step, clip_global_norm, lr_at, AdamState, OptimSpec};
pub use run::{
    params_bit_identical, read_metrics, run_experiment, EpochRecord, Evaluation, GradNormRecord, RunSpec, TrainOutcome,
    TrainRun, Trainer, CONFIG_FILE, GRAD_CLIP_NORM, GRAD_NORMS_FILE, METRICS_FILE, SUMMARY_FILE,
};
