//! Downstream validation: global sequence classification, local next-event
//! prediction, context-size sweeps, stage timing and metric reports.

pub mod auc;
pub mod bench;
pub mod context;
pub mod gbdt;
pub mod global;
pub mod local;
pub mod report;
pub mod sweep;

pub use auc::{roc_auc_binary, roc_auc_multiclass};
pub use bench::{bench_stages, infer_plain, infer_with_context, BenchSetup, StageTimings, BENCH_METHODS, STAGES};
pub use context::{ContextProvider, ContextSource};
pub use gbdt::{fit_gbdt, Gbdt, GbdtClassifier, GbdtConfig};
pub use global::{eval_global, global_features, label_classes, GlobalEvalConfig};
pub use local::{eval_local, window_starts, FineTuneMode, LinearHead, LocalEvalConfig, LocalResult};
pub use report::{
    mean_ranks, read_metrics_csv, summarize, write_metrics_csv, write_summaries, MetricsRow, Summary, TASK_GLOBAL,
    TASK_LOCAL,
};
pub use sweep::{nested_subsets, sweep_context_size, write_sweep_csv, SweepRow};
