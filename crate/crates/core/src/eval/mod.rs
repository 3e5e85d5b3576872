//! Classification metrics, baseline deltas and TO/CA error analysis.

mod analysis;
mod metrics;

pub use analysis::{categorize_errors, CategoryCounts, ErrorCategory, ErrorExample, ErrorReport};
pub use metrics::{
    compare_to_baseline, compute_metrics, format_mean_std, BaselineDelta, ClassMetrics,
    Confusion, Metrics,
};
