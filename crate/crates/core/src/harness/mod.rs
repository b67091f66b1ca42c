//! Experiment orchestration: configuration, the pipeline commands, reports
//! and artifact provenance.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod report;

pub use artifacts::{ArtifactMeta, Layout};
pub use config::ExperimentConfig;
pub use pipeline::{
    cmd_report, cmd_score, cmd_split, cmd_train_cl, cmd_train_vanilla, evaluate_checkpoint, prepare_data,
    read_corruption_flags, run_all, write_config, CurriculumOutcome, PreparedData, ReportOutcome, RunSummary,
    VanillaOutcome,
};
pub use report::PartitionStats;
