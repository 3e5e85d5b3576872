//! Checkpoint container.
//!
//! A checkpoint is one UTF-8 JSON document:
//!
//! ```text
//! {
//!   "format": "sarcasm-checkpoint",
//!   "version": 1,
//!   "seed": <training seed>,
//!   "epoch": <epoch the weights come from, 1-based>,
//!   "input": { "mode", "max_len_target", "max_len_context", "context_truncation" },
//!   "encoder": { EncoderConfig fields },
//!   "tokenizer": { "lowercase", "min_freq", "max_vocab" },
//!   "vocab": [ token for id 0, token for id 1, ... ],
//!   "vocab_sha256": hex digest of the vocabulary file text,
//!   "params": [ { "name", "shape": [..], "data": [..] }, ... ]
//! }
//! ```
//!
//! Parameters appear in canonical order (see [`EncoderParams::names`]).
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so save/load is bit-exact for finite float64 values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::sequence::InputConfig;
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, TokenizerConfig, Vocabulary};

pub const FORMAT: &str = "sarcasm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub epoch: usize,
    pub input: InputConfig,
    pub encoder: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub params: EncoderParams,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    epoch: usize,
    input: InputConfig,
    encoder: EncoderConfig,
    tokenizer: TokenizerConfig,
    vocab: Vec<String>,
    vocab_sha256: String,
    params: Vec<NamedArray>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            seed: self.seed,
            epoch: self.epoch,
            input: self.input,
            encoder: self.encoder.clone(),
            tokenizer: self.tokenizer.config.clone(),
            vocab: self.tokenizer.vocab.tokens().to_vec(),
            vocab_sha256: sha256_hex(self.tokenizer.vocab.to_text().as_bytes()),
            params: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| NamedArray {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("finite parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if file.format != FORMAT || file.version != VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("unsupported format {} v{}", file.format, file.version),
            ));
        }
        let vocab = Vocabulary::from_tokens(file.vocab)?;
        if sha256_hex(vocab.to_text().as_bytes()) != file.vocab_sha256 {
            return Err(Error::format("checkpoint", "vocabulary digest mismatch"));
        }
        if vocab.len() != file.encoder.vocab_size {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "vocabulary has {} tokens but encoder expects {}",
                    vocab.len(),
                    file.encoder.vocab_size
                ),
            ));
        }
        let names = EncoderParams::names(file.encoder.num_layers);
        if names.len() != file.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} parameter arrays, got {}", names.len(), file.params.len()),
            ));
        }
        let mut tensors = Vec::with_capacity(names.len());
        for (expected, arr) in names.iter().zip(file.params) {
            if &arr.name != expected {
                return Err(Error::format(
                    "checkpoint",
                    format!("expected parameter `{expected}`, found `{}`", arr.name),
                ));
            }
            tensors.push(Tensor::new(arr.shape, arr.data)?);
        }
        let params = EncoderParams::from_tensors(&file.encoder, tensors)?;
        Ok(Checkpoint {
            seed: file.seed,
            epoch: file.epoch,
            input: file.input,
            encoder: file.encoder,
            tokenizer: Tokenizer {
                config: file.tokenizer,
                vocab,
            },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
