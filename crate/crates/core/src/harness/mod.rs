//! Run configuration, datasets, training, evaluation and checkpoints.

mod checkpoint;
mod config;
mod data;
mod pipeline;
mod train;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{ConfigFormat, Paths, RunConfig};
pub use data::{embed_records, load_dataset, parse_dataset, stratified_split, DatasetRecord, Split, SPLIT_RATIOS};
pub use pipeline::{
    build_graph, dataset_records, dump_records, embedders_for, evaluate_checkpoint, explain_records, explain_subgraph,
    resolve_graph, run_training, EvalReport, Partition, TrainReport,
};
pub use train::{dump_embeddings, evaluate, train, EpochLog, Evaluation, RepeatSummary, Spread, TrainOutcome, TrainSettings, Trainer};
