//! Metrics, source pretraining, and the cross-user evaluation protocol.

mod metrics;
mod pretrain;
mod protocol;

pub use metrics::{evaluate_user, ConfusionMatrix, UserEvaluation};
pub use pretrain::{
    log_csv, pretrain, PretrainConfig, PretrainLogRow, PretrainOutcome, DEFAULT_PRETRAIN_EPOCHS,
    DEFAULT_PRETRAIN_LR,
};
pub use protocol::{
    adapt_user, build_grid, grid_group, mean_std, run_ablation, run_cross_validation, run_seed, sha256_hex,
    summary_csv, AblationConfig, AblationResult, AdaptMode, AdaptOutcome, DatasetSource,
    ExperimentConfig, FoldSummary, MemorySource, MetricsReport, SummaryRow, UserResult,
    UserSource, Variant,
};
