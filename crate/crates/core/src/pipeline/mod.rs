//! The three-stage workflow: optional transfer initialization, optional
//! self-supervised pre-training, and supervised fine-tuning with per-epoch evaluation.

mod checkpoint;
mod classifier;
mod config;
mod train;

pub use checkpoint::{CheckpointEnvelope, CheckpointMeta, Stage, FORMAT_VERSION, MAGIC};
pub use classifier::{attach_classifier, cross_entropy, Classifier, ClassifierCache};
pub use config::{InitMode, TrainConfig};
pub use train::{
    aggregate_last_k, backbone_weights, evaluate, prepare_batch, replicate_channels, run_experiment, run_finetune,
    run_ssl_pretraining, AggregateReport, EpochLog, ExperimentOutcome, FileStore, FinetuneOutcome, ImageStore,
    MemoryStore, Observer,
};
