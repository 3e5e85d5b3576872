//! Word-level tokenizer with fixed special tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;

pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

const USER_PLACEHOLDER: &str = "@USER";
const URL_PLACEHOLDER: &str = "<URL>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub min_freq: usize,
    /// Upper bound on vocabulary size, reserved tokens included.
    pub max_vocab: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            min_freq: 2,
            max_vocab: 20_000,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_freq < 1 {
            return Err(Error::invalid("min_freq must be at least 1"));
        }
        if self.max_vocab < 5 {
            return Err(Error::invalid("max_vocab must be at least 5"));
        }
        Ok(())
    }
}

fn placeholder(s: &str) -> Option<&'static str> {
    if s.eq_ignore_ascii_case(USER_PLACEHOLDER) {
        Some(USER_PLACEHOLDER)
    } else if s.eq_ignore_ascii_case(URL_PLACEHOLDER) {
        Some(URL_PLACEHOLDER)
    } else {
        None
    }
}

fn starts_with_ignore_case(s: &str, prefix: &str) -> bool {
    s.len() >= prefix.len()
        && s.is_char_boundary(prefix.len())
        && s[..prefix.len()].eq_ignore_ascii_case(prefix)
}

fn is_symbol(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Whether the remaining chunk starts a token that owns its leading symbol.
fn protected_start(s: &str) -> bool {
    if starts_with_ignore_case(s, USER_PLACEHOLDER) || starts_with_ignore_case(s, URL_PLACEHOLDER) {
        return true;
    }
    let mut chars = s.chars();
    chars.next() == Some('#') && chars.next().is_some_and(char::is_alphanumeric)
}

fn push_core(out: &mut Vec<String>, core: &str, config: &TokenizerConfig) {
    if let Some(p) = placeholder(core) {
        out.push(p.to_string());
    } else if config.lowercase {
        out.push(core.to_lowercase());
    } else {
        out.push(core.to_string());
    }
}

/// Splits text into tokens.
///
/// `@USER` and `<URL>` are matched case-insensitively and emitted in
/// canonical case; `#word` stays whole. Other chunks are lowercased (if
/// configured) and lose their leading and trailing symbols, each of which
/// becomes its own token.
pub fn normalize_and_split(text: &str, config: &TokenizerConfig) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut core = chunk;
        while let Some(c) = core.chars().next() {
            if protected_start(core) || !is_symbol(c) {
                break;
            }
            out.push(c.to_string());
            core = &core[c.len_utf8()..];
        }
        let mut trailing = Vec::new();
        while let Some(c) = core.chars().next_back() {
            if placeholder(core).is_some() || !is_symbol(c) {
                break;
            }
            trailing.push(c.to_string());
            core = &core[..core.len() - c.len_utf8()];
        }
        if !core.is_empty() {
            push_core(&mut out, core, config);
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Bijective token/id map with reserved ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn reserved_only() -> Self {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for t in RESERVED {
            v.push(t.to_string());
        }
        v
    }

    fn push(&mut self, token: String) {
        self.token_to_id.insert(token.clone(), self.id_to_token.len());
        self.id_to_token.push(token);
    }

    /// Builds a vocabulary from an explicit id-ordered token list whose
    /// first four entries are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(t, r)| t != r)
        {
            return Err(Error::format(
                "vocabulary",
                "the first four entries must be [PAD] [UNK] [CLS] [SEP]",
            ));
        }
        let mut v = Vocabulary {
            token_to_id: HashMap::with_capacity(tokens.len()),
            id_to_token: Vec::with_capacity(tokens.len()),
        };
        for t in tokens {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("invalid token {t:?}")));
            }
            if v.token_to_id.contains_key(&t) {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
            v.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocabulary::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }
}

/// Counts tokens over `texts` and keeps those seen at least `min_freq`
/// times, ranked by frequency (descending) then token (ascending).
pub fn train_vocab<S: AsRef<str>>(texts: &[S], config: &TokenizerConfig) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in normalize_and_split(text.as_ref(), config) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= config.min_freq && !RESERVED.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocabulary::reserved_only();
    let room = config.max_vocab.saturating_sub(RESERVED.len());
    for (tok, _) in ranked.into_iter().take(room) {
        vocab.push(tok);
    }
    vocab
}

pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> Vec<usize> {
    tokens
        .iter()
        .map(|t| vocab.id(t.as_ref()).unwrap_or(UNK_ID))
        .collect()
}

/// Maps ids back to tokens; out-of-range ids decode to `[UNK]`.
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(RESERVED[UNK_ID]).to_string())
        .collect()
}

/// Tokenizer bundle: configuration plus trained vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub vocab: Vocabulary,
}

impl Tokenizer {
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        encode(&normalize_and_split(text, &self.config), &self.vocab)
    }
}
