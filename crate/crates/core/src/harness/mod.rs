//! Experiment configuration, datasets, and run persistence.

mod config;
mod data;
mod idx;
mod record;

pub use config::{run_experiment, ExperimentConfig, ModelConfig};
pub use data::{gen_split_blobs, gen_split_rings, generate, DatasetConfig, DatasetKind, IdxPaths, TaskData, TaskStream};
pub use idx::{encode_images, encode_labels, load_idx, parse_images, parse_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use record::{
    load_run_artifacts, persist_run, read_acc_matrix, write_acc_matrix, RunRecord, ACC_MATRIX, CHECKPOINT, MEMORY,
    RUN_METRICS, SCHEMA_VERSION,
};
