//! Metrics, forgetting deltas and report tables.

mod manifest;
mod metrics;
mod report;

pub use manifest::{evaluate_all, evaluate_task, EvalManifest, EvalOptions, EvalTask};
pub use metrics::{
    bleu, char_f1, exact_accuracy, forgetting_delta, normalize_answer, perplexity, sample_nll, Direction,
    Metric, MetricResult, PplScope,
};
pub use report::{emit_report, with_note, Layout, Report, ReportEntry};
