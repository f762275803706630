//! Losses, metrics and the adaptation/evaluation harness.

mod harness;
mod loss;
mod metrics;
mod report;

pub use harness::{
    evaluate, par_map, prepare_adaptation, pretrain_base, report_for, run_ablation, run_experiment,
    run_multimodality, train_adaptation, AblationRow, AblationTable, Adapted, DomainData, MultimodalReport,
    Prediction, PretrainConfig, PretrainOutcome, PromptSource, Prompts, RunConfig, Segmenter,
};
pub use loss::{seg_loss, DICE_EPS};
pub use metrics::{compute_metrics, overlap, Metrics, Overlap};
pub use report::{DatasetMetrics, EpochRecord, MetricsReport, SeedMetrics, Summary};
