use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Confusion counts with SARCASM as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    /// P = 0 without positive predictions, R = 0 without gold positives,
    /// F1 = 0 when P + R = 0.
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassMetrics {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sarcasm: ClassMetrics,
    pub not_sarcasm: ClassMetrics,
    /// Unweighted mean of the two per-class values.
    pub macro_avg: ClassMetrics,
    pub accuracy: f64,
    pub confusion: Confusion,
}

pub fn compute_metrics(preds: &[Label], golds: &[Label]) -> Result<Metrics> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions but {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("metrics need at least one example"));
    }
    let mut c = Confusion::default();
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (Label::Sarcasm, Label::Sarcasm) => c.tp += 1,
            (Label::Sarcasm, Label::NotSarcasm) => c.fp += 1,
            (Label::NotSarcasm, Label::Sarcasm) => c.fn_ += 1,
            (Label::NotSarcasm, Label::NotSarcasm) => c.tn += 1,
        }
    }
    let sarcasm = ClassMetrics::from_counts(c.tp, c.fp, c.fn_);
    let not_sarcasm = ClassMetrics::from_counts(c.tn, c.fn_, c.fp);
    let macro_avg = ClassMetrics {
        precision: (sarcasm.precision + not_sarcasm.precision) / 2.0,
        recall: (sarcasm.recall + not_sarcasm.recall) / 2.0,
        f1: (sarcasm.f1 + not_sarcasm.f1) / 2.0,
    };
    Ok(Metrics {
        sarcasm,
        not_sarcasm,
        macro_avg,
        accuracy: (c.tp + c.tn) as f64 / preds.len() as f64,
        confusion: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineDelta {
    pub model_f1: f64,
    pub baseline_f1: f64,
    /// (model - baseline) in percentage points.
    pub delta_points: f64,
}

/// Macro-F1 difference to a baseline score given as a ratio in [0, 1].
pub fn compare_to_baseline(metrics: &Metrics, baseline_f1: f64) -> Result<BaselineDelta> {
    if !(0.0..=1.0).contains(&baseline_f1) {
        return Err(Error::invalid(format!("baseline F1 {baseline_f1} outside [0, 1]")));
    }
    Ok(BaselineDelta {
        model_f1: metrics.macro_avg.f1,
        baseline_f1,
        delta_points: (metrics.macro_avg.f1 - baseline_f1) * 100.0,
    })
}

/// Renders a mean/std pair of ratios as percentages, e.g. `81.3 (±0.2)`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.1} (±{:.1})", mean * 100.0, std * 100.0)
}
