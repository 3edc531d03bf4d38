//! Training, fine-tuning, evaluation and ablation drivers.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod train;
pub mod workspace;

pub use ablation::{benchmark_run, run_ablation, AblationKind, AblationRow, AblationTable};
pub use config::RunConfig;
pub use evaluate::{average_precision, evaluate_map, GroundTruth, GroundTruthSet, MapReport};
pub use metrics::{Metrics, MetricsRecord};
pub use train::{
    episode_seed, evaluate_novel, fine_tune, infer_novel, meta_train, novel_detections, novel_split, record_eval, Checkpoint,
};
pub use workspace::Workspace;
