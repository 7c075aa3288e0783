//! Evaluation statistics: ranking metrics, operating points, bootstrap
//! intervals and paired model comparison.

pub mod bootstrap;
pub mod metrics;
pub mod paired;
pub mod report;

pub use bootstrap::{bootstrap_ci, iteration_rng, quantile_sorted, Interval};
pub use metrics::{
    accuracy, argmax, auroc, balanced_accuracy, f1, macro_auc, ranking, spec_at_sens, topk_accuracy, weighted_f1,
    OperatingPoint,
};
pub use paired::{average_ranks, holm, mcnemar_midp, paired_wilcoxon_holm, wilcoxon_signed_rank, PairTest};
pub use report::{
    evaluate, report_markdown, subgroup_report, write_report, EvalConfig, EvalReport, GroupReport, ReportBundle,
    ScoredItem, BINARY_METRICS, MULTICLASS_METRICS,
};
