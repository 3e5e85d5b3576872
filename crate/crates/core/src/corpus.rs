//! Conversation-thread datasets: JSON-lines ingestion, exact deduplication,
//! seeded train/dev splitting, corpus statistics and a synthetic generator
//! whose labels can only be recovered from the context.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "NOT_SARCASM")]
    NotSarcasm,
    #[serde(rename = "SARCASM")]
    Sarcasm,
}

impl Label {
    /// Class index used by the classifier head: 0 = NOT_SARCASM, 1 = SARCASM.
    pub fn index(self) -> usize {
        match self {
            Label::NotSarcasm => 0,
            Label::Sarcasm => 1,
        }
    }

    pub fn from_index(index: usize) -> Result<Self> {
        match index {
            0 => Ok(Label::NotSarcasm),
            1 => Ok(Label::Sarcasm),
            other => Err(Error::BadLabel(other)),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NotSarcasm => "NOT_SARCASM",
            Label::Sarcasm => "SARCASM",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::NotSarcasm => Label::Sarcasm,
            Label::Sarcasm => Label::NotSarcasm,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SARCASM" => Ok(Label::Sarcasm),
            "NOT_SARCASM" => Ok(Label::NotSarcasm),
            other => Err(Error::invalid(format!(
                "label `{other}` is not SARCASM or NOT_SARCASM"
            ))),
        }
    }
}

/// One conversation: chronological context utterances plus the target
/// utterance (`response`) to classify.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationThread {
    pub id: String,
    pub context: Vec<String>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Twitter,
    Reddit,
    Mixed,
    Synthetic,
}

impl Source {
    pub fn prefix(self) -> &'static str {
        match self {
            Source::Twitter => "twitter",
            Source::Reddit => "reddit",
            Source::Mixed => "mixed",
            Source::Synthetic => "synthetic",
        }
    }

    /// Guess the source from a file name (`twitter`/`reddit`/`synth` substrings).
    pub fn infer(path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if name.contains("twitter") {
            Source::Twitter
        } else if name.contains("reddit") {
            Source::Reddit
        } else if name.contains("synth") {
            Source::Synthetic
        } else {
            Source::Mixed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<ConversationThread>,
    pub source: Source,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate ids and empty responses.
    pub fn new(records: Vec<ConversationThread>, source: Source) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.response.trim().is_empty() {
                return Err(Error::Schema {
                    line: i + 1,
                    message: format!("record `{}` has an empty response", r.id),
                });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Corpus { records, source })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Concatenates two corpora (e.g. Twitter + Reddit training sets).
    pub fn concat(self, other: Corpus) -> Result<Corpus> {
        let source = if self.source == other.source {
            self.source
        } else {
            Source::Mixed
        };
        let mut records = self.records;
        records.extend(other.records);
        Corpus::new(records, source)
    }

    pub fn labels(&self) -> Result<Vec<Label>> {
        self.records
            .iter()
            .map(|r| r.label.ok_or_else(|| Error::Unlabeled(r.id.clone())))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("thread serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    label: Option<String>,
    response: String,
    #[serde(default)]
    context: Vec<String>,
}

/// Loads a JSON-lines corpus, inferring the source from the file name.
pub fn load_jsonl(path: &Path) -> Result<Corpus> {
    load_jsonl_with_source(path, Source::infer(path))
}

pub fn load_jsonl_with_source(path: &Path, source: Source) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, source)
}

/// Parses JSON-lines text. Blank lines are skipped; line numbers in errors
/// and auto-assigned ids are 1-based physical line numbers.
pub fn parse_jsonl(text: &str, source: Source) -> Result<Corpus> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: lineno,
            message: e.to_string(),
        })?;
        let label = match raw.label {
            Some(l) => Some(l.parse::<Label>().map_err(|e| Error::Schema {
                line: lineno,
                message: e.to_string(),
            })?),
            None => None,
        };
        if raw.response.trim().is_empty() {
            return Err(Error::Schema {
                line: lineno,
                message: "`response` is empty".into(),
            });
        }
        records.push(ConversationThread {
            id: raw
                .id
                .unwrap_or_else(|| format!("{}_{}", source.prefix(), lineno)),
            context: raw.context,
            response: raw.response,
            label,
        });
    }
    Corpus::new(records, source)
}

/// Removes exact duplicate threads, keeping first occurrences.
///
/// Two threads are duplicates when response, every context utterance and
/// the label agree after trimming trailing whitespace. Returns the
/// deduplicated corpus and the number of records removed.
pub fn deduplicate(corpus: &Corpus) -> (Corpus, usize) {
    let mut seen: HashSet<(String, Vec<String>, Option<Label>)> = HashSet::new();
    let mut kept = Vec::with_capacity(corpus.len());
    for r in &corpus.records {
        let key = (
            r.response.trim_end().to_string(),
            r.context.iter().map(|c| c.trim_end().to_string()).collect(),
            r.label,
        );
        if seen.insert(key) {
            kept.push(r.clone());
        }
    }
    let removed = corpus.len() - kept.len();
    (
        Corpus {
            records: kept,
            source: corpus.source,
        },
        removed,
    )
}

/// Number of dev records for a corpus of `n`: round-half-up of `n * fraction`.
pub fn dev_size(n: usize, dev_fraction: f64) -> usize {
    ((n as f64 * dev_fraction) + 0.5).floor() as usize
}

/// Seeded random train/dev partition over whole threads. Both halves keep
/// the corpus order.
pub fn split(corpus: &Corpus, dev_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(Error::invalid(format!(
            "dev fraction {dev_fraction} outside [0, 1)"
        )));
    }
    let n = corpus.len();
    let n_dev = dev_size(n, dev_fraction);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut in_dev = vec![false; n];
    for &i in &order[..n_dev] {
        in_dev[i] = true;
    }
    let (mut train, mut dev) = (Vec::with_capacity(n - n_dev), Vec::with_capacity(n_dev));
    for (r, dev_flag) in corpus.records.iter().zip(in_dev) {
        if dev_flag {
            dev.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((
        Corpus {
            records: train,
            source: corpus.source,
        },
        Corpus {
            records: dev,
            source: corpus.source,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub nc: usize,
    pub au_mean: f64,
    pub au_std: f64,
    pub at_mean: f64,
    pub at_std: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Utterances per conversation (target included) and whitespace tokens per
/// utterance, pooled over contexts and targets.
pub fn compute_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot compute statistics of an empty corpus"));
    }
    let mut utterances = Vec::with_capacity(corpus.len());
    let mut tokens = Vec::new();
    for r in &corpus.records {
        utterances.push((r.context.len() + 1) as f64);
        for u in r.context.iter().chain(std::iter::once(&r.response)) {
            tokens.push(u.split_whitespace().count() as f64);
        }
    }
    let (au_mean, au_std) = mean_std(&utterances);
    let (at_mean, at_std) = mean_std(&tokens);
    Ok(CorpusStats {
        nc: corpus.len(),
        au_mean,
        au_std,
        at_mean,
        at_std,
    })
}

/// Token whose presence in a context utterance marks a synthetic thread as sarcastic.
pub const SYNTHETIC_TRIGGER: &str = "#not";

/// Target utterances for synthetic threads; drawn independently of the label.
pub const SYNTHETIC_TARGETS: &[&str] = &[
    "oh great another monday",
    "what a wonderful day this is",
    "i just love waiting in line",
    "sounds like science !",
    "well that went perfectly",
    "thanks for the update",
    "best meeting ever",
    "cannot wait for tomorrow",
    "this is exactly what i needed",
    "so glad we did that",
    "nice work everyone",
    "that was totally worth it",
];

const SYNTHETIC_FILLER: &[&str] = &[
    "the", "game", "last", "night", "was", "on", "tv", "we", "watched", "it", "with",
    "friends", "traffic", "today", "my", "boss", "said", "meeting", "again", "weather",
    "rain", "coffee", "phone", "battery", "train", "late", "work", "weekend", "plans",
    "team", "report", "lunch",
];

/// Balanced synthetic corpus whose label is decidable only from the context.
///
/// Targets come uniformly from [`SYNTHETIC_TARGETS`] regardless of label.
/// A thread is SARCASM iff [`SYNTHETIC_TRIGGER`] was inserted into one of
/// its context utterances.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Corpus> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "synthetic corpus size must be even and at least 2, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n / 2 { Label::Sarcasm } else { Label::NotSarcasm })
        .collect();
    labels.shuffle(&mut rng);

    let mut records = Vec::with_capacity(n);
    for (i, label) in labels.into_iter().enumerate() {
        let response = SYNTHETIC_TARGETS[rng.random_range(0..SYNTHETIC_TARGETS.len())].to_string();
        let k = rng.random_range(1..=3usize);
        let mut context: Vec<Vec<&str>> = (0..k)
            .map(|_| {
                let len = rng.random_range(3..=7usize);
                (0..len)
                    .map(|_| SYNTHETIC_FILLER[rng.random_range(0..SYNTHETIC_FILLER.len())])
                    .collect()
            })
            .collect();
        if label == Label::Sarcasm {
            let which = rng.random_range(0..k);
            let pos = rng.random_range(0..=context[which].len());
            context[which].insert(pos, SYNTHETIC_TRIGGER);
        }
        records.push(ConversationThread {
            id: format!("{}_{}", Source::Synthetic.prefix(), i + 1),
            context: context.into_iter().map(|u| u.join(" ")).collect(),
            response,
            label: Some(label),
        });
    }
    Corpus::new(records, Source::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn thread(id: &str, ctx: &[&str], resp: &str, label: Option<Label>) -> ConversationThread {
        ConversationThread {
            id: id.into(),
            context: ctx.iter().map(|s| s.to_string()).collect(),
            response: resp.into(),
            label,
        }
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let c = parse_jsonl("", Source::Twitter).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn three_line_fixture() {
        let text = concat!(
            r#"{"label": "SARCASM", "response": "@USER yeah right", "context": ["a", "b"]}"#,
            "\n",
            r#"{"label": "NOT_SARCASM", "response": "fine", "context": []}"#,
            "\n",
            r#"{"label": "SARCASM", "response": "sure", "context": ["x"], "extra": 1}"#,
            "\n",
        );
        let c = parse_jsonl(text, Source::Twitter).unwrap();
        let expected = vec![
            thread("twitter_1", &["a", "b"], "@USER yeah right", Some(Label::Sarcasm)),
            thread("twitter_2", &[], "fine", Some(Label::NotSarcasm)),
            thread("twitter_3", &["x"], "sure", Some(Label::Sarcasm)),
        ];
        assert_eq!(c.records, expected);
    }

    #[test]
    fn non_string_response_names_line() {
        let err = parse_jsonl(r#"{"response": 5}"#, Source::Twitter).unwrap_err();
        match err {
            Error::Schema { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_label_and_missing_response_rejected() {
        let text = "{\"response\": \"a\", \"context\": []}\n{\"response\": \"b\", \"label\": \"MAYBE\"}";
        assert!(matches!(
            parse_jsonl(text, Source::Reddit),
            Err(Error::Schema { line: 2, .. })
        ));
        assert!(matches!(
            parse_jsonl(r#"{"context": []}"#, Source::Reddit),
            Err(Error::Schema { line: 1, .. })
        ));
        assert!(matches!(
            parse_jsonl("{not json", Source::Reddit),
            Err(Error::Schema { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "{\"id\": \"a\", \"response\": \"x\"}\n{\"id\": \"a\", \"response\": \"y\"}";
        assert!(matches!(
            parse_jsonl(text, Source::Mixed),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn dedup_identity_and_collapse() {
        let distinct = Corpus::new(
            vec![
                thread("1", &["a"], "x", Some(Label::Sarcasm)),
                thread("2", &["a"], "x", Some(Label::NotSarcasm)),
                thread("3", &["b"], "x", Some(Label::Sarcasm)),
            ],
            Source::Mixed,
        )
        .unwrap();
        let (same, removed) = deduplicate(&distinct);
        assert_eq!(removed, 0);
        assert_eq!(same, distinct);

        let copies = Corpus::new(
            (0..7)
                .map(|i| thread(&i.to_string(), &["c "], "y  ", Some(Label::Sarcasm)))
                .collect(),
            Source::Mixed,
        )
        .unwrap();
        let (one, removed) = deduplicate(&copies);
        assert_eq!(removed, 6);
        assert_eq!(one.records[0].id, "0");
    }

    #[test]
    fn dedup_trims_trailing_whitespace_only() {
        let c = Corpus::new(
            vec![
                thread("1", &["a"], "x", None),
                thread("2", &["a\t"], "x \n", None),
                thread("3", &[" a"], "x", None),
            ],
            Source::Mixed,
        )
        .unwrap();
        let (d, removed) = deduplicate(&c);
        assert_eq!(removed, 1);
        assert_eq!(
            d.records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["1", "3"]
        );
    }

    #[test]
    fn dev_sizes_follow_round_half_up() {
        assert_eq!(dev_size(4759, 0.10), 476);
        assert_eq!(dev_size(4400, 0.10), 440);
        assert_eq!(dev_size(5, 0.10), 1);
        assert_eq!(dev_size(4, 0.10), 0);
        assert_eq!(dev_size(100, 0.0), 0);
    }

    #[test]
    fn split_fraction_zero_is_identity() {
        let c = generate_synthetic(20, 1).unwrap();
        let (train, dev) = split(&c, 0.0, 3).unwrap();
        assert!(dev.is_empty());
        assert_eq!(train, c);
        assert!(split(&c, 1.0, 3).is_err());
        assert!(split(&c, -0.1, 3).is_err());
    }

    #[test]
    fn stats_hand_fixture() {
        let c = Corpus::new(vec![thread("1", &["a b", "c"], "d e f", None)], Source::Mixed)
            .unwrap();
        let s = compute_stats(&c).unwrap();
        assert_eq!(s.nc, 1);
        assert_eq!(s.au_mean, 3.0);
        assert_eq!(s.au_std, 0.0);
        assert_eq!(s.at_mean, 2.0);
        assert!((s.at_std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stats_zero_variance_and_empty() {
        let c = Corpus::new(
            vec![
                thread("1", &["a b c d"], "e f g h", None),
                thread("2", &[], "i j k l", None),
            ],
            Source::Mixed,
        )
        .unwrap();
        let s = compute_stats(&c).unwrap();
        assert_eq!((s.at_mean, s.at_std), (4.0, 0.0));
        assert_eq!((s.au_mean, s.au_std), (1.5, 0.5));
        assert!(compute_stats(&Corpus::new(vec![], Source::Mixed).unwrap()).is_err());
    }

    #[test]
    fn synthetic_preconditions_and_balance() {
        assert!(generate_synthetic(0, 7).is_err());
        assert!(generate_synthetic(3, 7).is_err());
        let c = generate_synthetic(1000, 7).unwrap();
        let sarcastic = c
            .records
            .iter()
            .filter(|r| r.label == Some(Label::Sarcasm))
            .count();
        assert_eq!(sarcastic, 500);
        assert_eq!(generate_synthetic(1000, 7).unwrap(), c);
        assert_ne!(generate_synthetic(1000, 8).unwrap(), c);
    }

    #[test]
    fn synthetic_label_iff_trigger_in_context() {
        let c = generate_synthetic(400, 11).unwrap();
        for r in &c.records {
            let has_trigger = r
                .context
                .iter()
                .any(|u| u.split_whitespace().any(|t| t == SYNTHETIC_TRIGGER));
            assert_eq!(has_trigger, r.label == Some(Label::Sarcasm), "{}", r.id);
            assert!(!r.response.contains(SYNTHETIC_TRIGGER));
        }
    }

    /// Brute-force tally of label counts per target string. Under
    /// label-independent sampling, 2 n MI (in nats) is asymptotically
    /// chi-square with (templates - 1) degrees of freedom.
    #[test]
    fn synthetic_target_carries_no_label_information() {
        let c = generate_synthetic(2000, 7).unwrap();
        let mut table: HashMap<&str, [f64; 2]> = HashMap::new();
        for r in &c.records {
            table.entry(r.response.as_str()).or_default()[r.label.unwrap().index()] += 1.0;
        }
        let n = c.len() as f64;
        let mut mi = 0.0;
        for counts in table.values() {
            let row = counts[0] + counts[1];
            for &joint in counts {
                if joint > 0.0 {
                    mi += joint / n * ((joint / n) / ((row / n) * 0.5)).ln();
                }
            }
        }
        // chi-square(11) upper 0.999 quantile is 31.26
        assert!(2.0 * n * mi < 31.26, "G statistic {}", 2.0 * n * mi);
        // every template appears with both labels in comparable proportion
        for (t, counts) in &table {
            let row = counts[0] + counts[1];
            let z = (counts[1] - row / 2.0) / (row / 4.0).sqrt();
            assert!(z.abs() < 4.0, "template `{t}` z={z}");
        }
    }
}
