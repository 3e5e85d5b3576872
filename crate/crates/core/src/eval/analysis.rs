use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{ConversationThread, Label};
use crate::error::{Error, Result};

/// Outcome of a target-oriented (TO) / context-aware (CA) prediction pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCategory {
    /// TO is wrong and CA is correct.
    TwCc,
    /// TO is correct and CA is wrong.
    TcCw,
    /// Both TO and CA are wrong.
    TwCw,
    /// Both are correct.
    TcCc,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [
        ErrorCategory::TwCc,
        ErrorCategory::TcCw,
        ErrorCategory::TwCw,
        ErrorCategory::TcCc,
    ];

    pub fn of(to_pred: Label, ca_pred: Label, gold: Label) -> Self {
        match (to_pred == gold, ca_pred == gold) {
            (false, true) => ErrorCategory::TwCc,
            (true, false) => ErrorCategory::TcCw,
            (false, false) => ErrorCategory::TwCw,
            (true, true) => ErrorCategory::TcCc,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorCategory::TwCc => "TwCc",
            ErrorCategory::TcCw => "TcCw",
            ErrorCategory::TwCw => "TwCw",
            ErrorCategory::TcCc => "TcCc",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ErrorCategory::TwCc => "TO is wrong and CA is correct",
            ErrorCategory::TcCw => "TO is correct and CA is wrong",
            ErrorCategory::TwCw => "Both TO and CA are wrong",
            ErrorCategory::TcCc => "Both TO and CA are correct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorExample {
    pub index: usize,
    pub id: String,
    pub gold: Label,
    pub to_pred: Label,
    pub ca_pred: Label,
    pub context: Vec<String>,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub n: usize,
    pub counts: CategoryCounts,
    pub tw_cc: Vec<ErrorExample>,
    pub tc_cw: Vec<ErrorExample>,
    pub tw_cw: Vec<ErrorExample>,
    pub tc_cc: Vec<ErrorExample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CategoryCounts {
    pub TwCc: usize,
    pub TcCw: usize,
    pub TwCw: usize,
    pub TcCc: usize,
}

impl CategoryCounts {
    pub fn get(&self, c: ErrorCategory) -> usize {
        match c {
            ErrorCategory::TwCc => self.TwCc,
            ErrorCategory::TcCw => self.TcCw,
            ErrorCategory::TwCw => self.TwCw,
            ErrorCategory::TcCc => self.TcCc,
        }
    }

    fn bump(&mut self, c: ErrorCategory) {
        match c {
            ErrorCategory::TwCc => self.TwCc += 1,
            ErrorCategory::TcCw => self.TcCw += 1,
            ErrorCategory::TwCw => self.TwCw += 1,
            ErrorCategory::TcCc => self.TcCc += 1,
        }
    }

    pub fn total(&self) -> usize {
        ErrorCategory::ALL.iter().map(|&c| self.get(c)).sum()
    }
}

impl ErrorReport {
    pub fn examples(&self, c: ErrorCategory) -> &[ErrorExample] {
        match c {
            ErrorCategory::TwCc => &self.tw_cc,
            ErrorCategory::TcCw => &self.tc_cw,
            ErrorCategory::TwCw => &self.tw_cw,
            ErrorCategory::TcCc => &self.tc_cc,
        }
    }

    fn examples_mut(&mut self, c: ErrorCategory) -> &mut Vec<ErrorExample> {
        match c {
            ErrorCategory::TwCc => &mut self.tw_cc,
            ErrorCategory::TcCw => &mut self.tc_cw,
            ErrorCategory::TwCw => &mut self.tw_cw,
            ErrorCategory::TcCc => &mut self.tc_cc,
        }
    }

    /// Plain-text dump of the three error situations: context lines `C1..Ck`
    /// followed by the target `T` for every example.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in [ErrorCategory::TwCc, ErrorCategory::TcCw, ErrorCategory::TwCw] {
            let examples = self.examples(c);
            let _ = writeln!(out, "== {}: {} ({}) ==", c.name(), c.description(), examples.len());
            for ex in examples {
                let _ = writeln!(
                    out,
                    "[{}] gold={} TO={} CA={}",
                    ex.id, ex.gold, ex.to_pred, ex.ca_pred
                );
                for (i, utterance) in ex.context.iter().enumerate() {
                    let _ = writeln!(out, "  C{}: {}", i + 1, utterance);
                }
                let _ = writeln!(out, "  T : {}", ex.response);
                out.push('\n');
            }
        }
        let _ = writeln!(
            out,
            "TwCc={} TcCw={} TwCw={} TcCc={} n={}",
            self.counts.TwCc, self.counts.TcCw, self.counts.TwCw, self.counts.TcCc, self.n
        );
        out
    }
}

/// Assigns every example to exactly one TO/CA outcome category.
pub fn categorize_errors(
    to_preds: &[Label],
    ca_preds: &[Label],
    golds: &[Label],
    threads: &[ConversationThread],
) -> Result<ErrorReport> {
    let n = golds.len();
    if to_preds.len() != n || ca_preds.len() != n || threads.len() != n {
        return Err(Error::LengthMismatch(format!(
            "TO {} / CA {} / gold {} / threads {}",
            to_preds.len(),
            ca_preds.len(),
            n,
            threads.len()
        )));
    }
    let mut report = ErrorReport {
        n,
        counts: CategoryCounts::default(),
        tw_cc: Vec::new(),
        tc_cw: Vec::new(),
        tw_cw: Vec::new(),
        tc_cc: Vec::new(),
    };
    for i in 0..n {
        let c = ErrorCategory::of(to_preds[i], ca_preds[i], golds[i]);
        report.counts.bump(c);
        report.examples_mut(c).push(ErrorExample {
            index: i,
            id: threads[i].id.clone(),
            gold: golds[i],
            to_pred: to_preds[i],
            ca_pred: ca_preds[i],
            context: threads[i].context.clone(),
            response: threads[i].response.clone(),
        });
    }
    Ok(report)
}
