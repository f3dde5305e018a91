//! Training, evaluation, baselines and experiment orchestration.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod normalize;
pub mod train;

pub use config::{Ablation, Baseline, ExperimentConfig, ModelConfig, SceneSource, SplitMode};
pub use model::{Model, ModelOutput, ModelSpec};
pub use normalize::{Batch, Normalizer};
pub use eval::{evaluate_records, infer, write_csv, Inference, MetricsRecord, RoutingSummary, SamplePrediction};
pub use train::{train, StepLog, TrainOutcome, TrainSettings};
pub use experiment::{
    evaluate_checkpoint, grad_check_experiment, load_checkpoint, partition, prepare_samples, run_experiment, save_checkpoint,
    CheckpointMeta, ExperimentResult, Partition,
};
