//! Input sequences for the two classifiers and padded batches.
//!
//! Target-oriented input: `[CLS] target`. Context-aware input:
//! `[CLS] target [SEP] context_1 .. context_k`, with all context utterances
//! concatenated in thread order and no separators between them.

use serde::{Deserialize, Serialize};

use crate::corpus::{ConversationThread, Label};
use crate::error::{Error, Result};
use crate::tokenizer::{Tokenizer, CLS_ID, PAD_ID, SEP_ID};

pub const DEFAULT_MAX_LEN_TARGET: usize = 128;
pub const DEFAULT_MAX_LEN_CONTEXT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TargetOriented,
    ContextAware,
}

impl Mode {
    pub fn short(self) -> &'static str {
        match self {
            Mode::TargetOriented => "target",
            Mode::ContextAware => "context",
        }
    }
}

/// Which end of the concatenated context is cut when an input overflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextTruncation {
    /// Keep the oldest context tokens; cut the most recent ones.
    #[default]
    DropTail,
    /// Keep the most recent context tokens; cut the oldest ones.
    DropHead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub segment: Vec<u8>,
    pub mode: Mode,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn build_target_input(target_ids: &[usize], max_len: usize) -> Result<ModelInput> {
    if max_len < 1 {
        return Err(Error::invalid("target max_len must be at least 1"));
    }
    let keep = target_ids.len().min(max_len - 1);
    let mut ids = Vec::with_capacity(keep + 1);
    ids.push(CLS_ID);
    ids.extend_from_slice(&target_ids[..keep]);
    let n = ids.len();
    Ok(ModelInput {
        ids,
        mask: vec![1; n],
        segment: vec![0; n],
        mode: Mode::TargetOriented,
    })
}

pub fn build_context_input(
    target_ids: &[usize],
    context_ids: &[Vec<usize>],
    max_len: usize,
    truncation: ContextTruncation,
) -> Result<ModelInput> {
    if max_len < 2 {
        return Err(Error::invalid("context max_len must be at least 2"));
    }
    let target_keep = target_ids.len().min(max_len - 2);
    let context: Vec<usize> = context_ids.iter().flatten().copied().collect();
    let room = max_len - 2 - target_keep;
    let context = if context.len() <= room {
        &context[..]
    } else {
        match truncation {
            ContextTruncation::DropTail => &context[..room],
            ContextTruncation::DropHead => &context[context.len() - room..],
        }
    };
    let mut ids = Vec::with_capacity(2 + target_keep + context.len());
    ids.push(CLS_ID);
    ids.extend_from_slice(&target_ids[..target_keep]);
    ids.push(SEP_ID);
    ids.extend_from_slice(context);
    let n = ids.len();
    let mut segment = vec![0u8; n];
    for s in &mut segment[1 + target_keep..] {
        *s = 1;
    }
    Ok(ModelInput {
        ids,
        mask: vec![1; n],
        segment,
        mode: Mode::ContextAware,
    })
}

/// Sequence construction settings shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputConfig {
    pub mode: Mode,
    pub max_len_target: usize,
    pub max_len_context: usize,
    pub context_truncation: ContextTruncation,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            mode: Mode::ContextAware,
            max_len_target: DEFAULT_MAX_LEN_TARGET,
            max_len_context: DEFAULT_MAX_LEN_CONTEXT,
            context_truncation: ContextTruncation::DropTail,
        }
    }
}

impl InputConfig {
    pub fn max_len(&self) -> usize {
        match self.mode {
            Mode::TargetOriented => self.max_len_target,
            Mode::ContextAware => self.max_len_context,
        }
    }

    /// Tokenizes a thread and builds the input for the configured mode.
    pub fn encode_thread(&self, thread: &ConversationThread, tokenizer: &Tokenizer) -> Result<ModelInput> {
        let target = tokenizer.encode_text(&thread.response);
        match self.mode {
            Mode::TargetOriented => build_target_input(&target, self.max_len_target),
            Mode::ContextAware => {
                let context: Vec<Vec<usize>> =
                    thread.context.iter().map(|c| tokenizer.encode_text(c)).collect();
                build_context_input(&target, &context, self.max_len_context, self.context_truncation)
            }
        }
    }
}

/// Row-major padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub segment: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub mode: Mode,
    pub labels: Option<Vec<Label>>,
}

impl Batch {
    pub fn row_ids(&self, r: usize) -> &[usize] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.cols..(r + 1) * self.cols]
    }

    pub fn label_indices(&self) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|ls| ls.iter().map(|l| l.index()).collect())
    }
}

pub fn pad_batch(inputs: &[&ModelInput], labels: Option<&[Label]>) -> Result<Batch> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("cannot batch an empty input list"))?;
    if inputs.iter().any(|i| i.mode != first.mode) {
        return Err(Error::MixedModes);
    }
    if let Some(ls) = labels {
        if ls.len() != inputs.len() {
            return Err(Error::LengthMismatch(format!(
                "{} inputs but {} labels",
                inputs.len(),
                ls.len()
            )));
        }
    }
    let cols = inputs.iter().map(|i| i.len()).max().unwrap_or(0);
    let rows = inputs.len();
    let mut ids = vec![PAD_ID; rows * cols];
    let mut mask = vec![0u8; rows * cols];
    let mut segment = vec![0u8; rows * cols];
    for (r, input) in inputs.iter().enumerate() {
        let at = r * cols;
        ids[at..at + input.len()].copy_from_slice(&input.ids);
        mask[at..at + input.len()].copy_from_slice(&input.mask);
        segment[at..at + input.len()].copy_from_slice(&input.segment);
    }
    Ok(Batch {
        ids,
        mask,
        segment,
        rows,
        cols,
        mode: first.mode,
        labels: labels.map(<[Label]>::to_vec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn target_input_basic() {
        let t = build_target_input(&[10, 11, 12, 13, 14], 128).unwrap();
        assert_eq!(t.ids, [CLS_ID, 10, 11, 12, 13, 14]);
        assert_eq!(t.segment, [0; 6]);
        assert_eq!(t.mode, Mode::TargetOriented);
        assert_eq!(build_target_input(&[], 128).unwrap().ids, [CLS_ID]);
        assert!(build_target_input(&[], 0).is_err());
    }

    #[test]
    fn target_input_truncates_tail() {
        let target: Vec<usize> = (100..300).collect();
        let t = build_target_input(&target, 128).unwrap();
        assert_eq!(t.len(), 128);
        assert_eq!(&t.ids[1..], &target[..127]);
    }

    #[test]
    fn context_input_layout() {
        let c = build_context_input(
            &[10, 11, 12],
            &[vec![20, 21], vec![22, 23]],
            256,
            ContextTruncation::DropTail,
        )
        .unwrap();
        assert_eq!(c.ids, [CLS_ID, 10, 11, 12, SEP_ID, 20, 21, 22, 23]);
        assert_eq!(c.segment, [0, 0, 0, 0, 1, 1, 1, 1, 1]);
        let empty = build_context_input(&[10, 11], &[], 256, ContextTruncation::DropTail).unwrap();
        assert_eq!(empty.ids, [CLS_ID, 10, 11, SEP_ID]);
    }

    #[test]
    fn context_truncated_before_target() {
        let target: Vec<usize> = (1000..1100).collect();
        let context: Vec<usize> = (5000..5300).collect();
        let c = build_context_input(&target, std::slice::from_ref(&context), 256, ContextTruncation::DropTail)
            .unwrap();
        assert_eq!(c.len(), 256);
        assert_eq!(&c.ids[1..101], &target[..]);
        assert_eq!(&c.ids[102..], &context[..154]);

        let c = build_context_input(&target, std::slice::from_ref(&context), 256, ContextTruncation::DropHead)
            .unwrap();
        assert_eq!(&c.ids[102..], &context[300 - 154..]);

        // target alone overflows: context vanishes, then the target is cut
        let long: Vec<usize> = (0..300).collect();
        let c = build_context_input(&long, &[vec![7; 4]], 8, ContextTruncation::DropTail).unwrap();
        assert_eq!(c.ids, [CLS_ID, 0, 1, 2, 3, 4, 5, SEP_ID]);
        assert!(build_context_input(&[], &[], 1, ContextTruncation::DropTail).is_err());
    }

    #[test]
    fn pad_batch_shapes_and_errors() {
        let a = build_context_input(&[5; 4], &[], 256, ContextTruncation::DropTail).unwrap();
        let b = build_context_input(&[5; 3], &[vec![6; 4]], 256, ContextTruncation::DropTail)
            .unwrap();
        let single = pad_batch(&[&a], None).unwrap();
        assert_eq!((single.rows, single.cols), (1, 6));
        assert_eq!(single.mask, [1; 6]);

        let batch = pad_batch(&[&a, &b], Some(&[Label::Sarcasm, Label::NotSarcasm])).unwrap();
        assert_eq!(batch.cols, 9);
        assert_eq!(batch.row_mask(0), [1, 1, 1, 1, 1, 1, 0, 0, 0]);
        assert_eq!(&batch.row_ids(0)[6..], [PAD_ID; 3]);
        assert_eq!(batch.label_indices(), Some(vec![1, 0]));

        let t = build_target_input(&[5], 128).unwrap();
        assert!(matches!(pad_batch(&[&a, &t], None), Err(Error::MixedModes)));
        assert!(pad_batch(&[], None).is_err());
        assert!(pad_batch(&[&a], Some(&[])).is_err());
    }

    fn ids(max: usize) -> impl Strategy<Value = Vec<usize>> {
        proptest::collection::vec(4usize..500, 0..max)
    }

    proptest! {
        #[test]
        fn context_input_invariants(
            target in ids(40),
            context in proptest::collection::vec(ids(20), 0..5),
            max_len in 2usize..60,
            drop_head in any::<bool>(),
        ) {
            let policy = if drop_head { ContextTruncation::DropHead } else { ContextTruncation::DropTail };
            let ca = build_context_input(&target, &context, max_len, policy).unwrap();
            let to = build_target_input(&target, max_len - 1).unwrap();
            prop_assert!(ca.len() <= max_len);
            prop_assert_eq!(ca.ids[0], CLS_ID);
            prop_assert_eq!(ca.ids.iter().filter(|&&i| i == SEP_ID).count(), 1);
            // target tokens sit at the same positions in both inputs
            prop_assert_eq!(&ca.ids[..to.len()], &to.ids[..]);
            let kept_ctx = ca.len() - to.len() - 1;
            if kept_ctx > 0 {
                prop_assert_eq!(to.len() - 1, target.len());
            }
            if context.iter().all(Vec::is_empty) {
                let mut expect = to.ids.clone();
                expect.push(SEP_ID);
                prop_assert_eq!(&ca.ids, &expect);
            }
            prop_assert!(!to.ids.contains(&SEP_ID));
        }

        #[test]
        fn padding_never_masks_real_tokens(lens in proptest::collection::vec(0usize..12, 1..6)) {
            let inputs: Vec<ModelInput> = lens
                .iter()
                .map(|&n| build_target_input(&vec![9; n], 128).unwrap())
                .collect();
            let refs: Vec<&ModelInput> = inputs.iter().collect();
            let b = pad_batch(&refs, None).unwrap();
            for (r, input) in inputs.iter().enumerate() {
                let m = b.row_mask(r);
                let real = m.iter().take_while(|&&x| x == 1).count();
                prop_assert_eq!(real, input.len());
                prop_assert!(m[real..].iter().all(|&x| x == 0));
                for (&id, &mk) in b.row_ids(r).iter().zip(m) {
                    prop_assert_eq!(id == PAD_ID, mk == 0);
                }
            }
        }
    }
}
