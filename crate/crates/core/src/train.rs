//! Seeded training runs and multi-seed aggregation.
//!
//! Each minibatch is cut into fixed-size shards. Shard gradients are
//! computed independently (in parallel when enabled) and summed in shard
//! order, so a run is bit-reproducible regardless of thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{mean_std, Corpus, Label};
use crate::encoder::{classify, forward_on_tape, EncoderConfig, EncoderParams, ParamVars};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, format_mean_std, Metrics};
use crate::par::{self, Execution};
use crate::sequence::{pad_batch, InputConfig, ModelInput};
use crate::tensor::Tape;
use crate::tokenizer::Tokenizer;

/// Learning rate used to fine-tune large pretrained encoders.
pub const FINE_TUNE_LEARNING_RATE: f64 = 3e-5;
/// Learning rate for the small from-scratch encoder.
pub const DESK_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_SEEDS: [u64; 3] = [21, 42, 63];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub input: InputConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Examples per gradient shard inside a minibatch.
    pub shard_size: usize,
    pub eval_batch_size: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DESK_LEARNING_RATE,
            epochs: 30,
            batch_size: 16,
            seeds: DEFAULT_SEEDS.to_vec(),
            input: InputConfig::default(),
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
            shard_size: 4,
            eval_batch_size: 32,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.shard_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::invalid("batch, shard and eval batch sizes must be positive"));
        }
        if self.grad_clip_norm < 0.0 {
            return Err(Error::invalid("grad_clip_norm must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    adam: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len()
    {
        return Err(Error::LengthMismatch("adam parameter/gradient/state sizes".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = adam.beta1 * state.m[i] + (1.0 - adam.beta1) * g;
        state.v[i] = adam.beta2 * state.v[i] + (1.0 - adam.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> Result<f64> {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    Ok(norm)
}

/// Encoded inputs plus gold labels for one split.
#[derive(Debug, Clone)]
pub struct EncodedSet {
    pub inputs: Vec<ModelInput>,
    pub labels: Vec<Label>,
}

impl EncodedSet {
    pub fn labeled(corpus: &Corpus, tokenizer: &Tokenizer, input: &InputConfig) -> Result<Self> {
        let labels = corpus.labels()?;
        Ok(EncodedSet {
            inputs: encode_corpus(corpus, tokenizer, input)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn encode_corpus(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    input: &InputConfig,
) -> Result<Vec<ModelInput>> {
    corpus
        .records
        .iter()
        .map(|r| input.encode_thread(r, tokenizer))
        .collect()
}

/// Loss and summed parameter gradients of the mean cross-entropy over
/// `indices`, computed shard by shard.
pub fn batch_gradients(
    params: &EncoderParams,
    config: &EncoderConfig,
    set: &EncodedSet,
    indices: &[usize],
    shard_size: usize,
    execution: Execution,
    dropout_rng: Option<(u64, u64)>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let total = indices.len() as f64;
    let shards: Vec<(usize, &[usize])> = indices.chunks(shard_size).enumerate().collect();
    let results = par::try_map(execution, &shards, |&(k, shard)| {
        let inputs: Vec<&ModelInput> = shard.iter().map(|&i| &set.inputs[i]).collect();
        let labels: Vec<Label> = shard.iter().map(|&i| set.labels[i]).collect();
        let batch = pad_batch(&inputs, Some(&labels))?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let mut rng = dropout_rng.map(|(seed, stream)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream + k as u64);
            r
        });
        let fv = forward_on_tape(&mut tape, &vars, config, &batch, rng.as_mut())?;
        let label_ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let loss = tape.cross_entropy(fv.logits, &label_ids)?;
        let loss = tape.scale(loss, shard.len() as f64 / total);
        tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars
            .0
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect();
        Ok::<_, Error>((tape.value(loss).data()[0], grads))
    })?;

    let mut iter = results.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| Error::invalid("empty batch"))?;
    for (l, g) in iter {
        loss += l;
        for (acc, part) in grads.iter_mut().zip(g) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    Ok((loss, grads))
}

/// Eval-mode logits for every input, batched in fixed chunks.
pub fn predict_logits(
    params: &EncoderParams,
    config: &EncoderConfig,
    inputs: &[ModelInput],
    eval_batch_size: usize,
    execution: Execution,
) -> Result<Vec<[f64; 2]>> {
    let chunks: Vec<&[ModelInput]> = inputs.chunks(eval_batch_size.max(1)).collect();
    let per_chunk = par::try_map(execution, &chunks, |chunk| {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        let batch = pad_batch(&refs, None)?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, params);
        let fv = forward_on_tape(&mut tape, &vars, config, &batch, None)?;
        Ok::<_, Error>(
            tape.value(fv.logits)
                .data()
                .chunks(2)
                .map(|z| [z[0], z[1]])
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

pub fn predict_labels(
    params: &EncoderParams,
    config: &EncoderConfig,
    inputs: &[ModelInput],
    eval_batch_size: usize,
    execution: Execution,
) -> Result<Vec<Label>> {
    predict_logits(params, config, inputs, eval_batch_size, execution)?
        .iter()
        .map(|z| classify(z))
        .collect()
}

pub fn evaluate_set(
    params: &EncoderParams,
    config: &EncoderConfig,
    set: &EncodedSet,
    eval_batch_size: usize,
    execution: Execution,
) -> Result<Metrics> {
    let preds = predict_labels(params, config, &set.inputs, eval_batch_size, execution)?;
    compute_metrics(&preds, &set.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best: Metrics,
    pub checkpoint: Option<PathBuf>,
    pub best_params: EncoderParams,
    pub encoder: EncoderConfig,
}

/// Resolves `vocab_size` from the tokenizer and checks position capacity.
pub fn resolve_encoder_config(
    enc: &EncoderConfig,
    tokenizer: &Tokenizer,
    input: &InputConfig,
) -> Result<EncoderConfig> {
    let mut cfg = enc.clone();
    if cfg.vocab_size == 0 {
        cfg.vocab_size = tokenizer.vocab.len();
    } else if cfg.vocab_size != tokenizer.vocab.len() {
        return Err(Error::invalid(format!(
            "encoder vocab_size {} does not match vocabulary of {}",
            cfg.vocab_size,
            tokenizer.vocab.len()
        )));
    }
    if cfg.max_positions < input.max_len() {
        return Err(Error::invalid(format!(
            "max_positions {} is shorter than the {} max length {}",
            cfg.max_positions,
            input.mode.short(),
            input.max_len()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn checkpoint_path(dir: &Path, mode_short: &str, seed: u64) -> PathBuf {
    dir.join(format!("{mode_short}_seed{seed}.json"))
}

/// One seeded run: init, per-epoch shuffled minibatch training with
/// clipping and Adam, dev evaluation after every epoch, and best-epoch
/// selection by dev macro-F1 (earliest epoch wins ties).
pub fn train_run(
    train: &Corpus,
    dev: &Corpus,
    tokenizer: &Tokenizer,
    enc_config: &EncoderConfig,
    train_config: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<RunResult> {
    train_config.validate()?;
    let config = resolve_encoder_config(enc_config, tokenizer, &train_config.input)?;
    let train_set = EncodedSet::labeled(train, tokenizer, &train_config.input)?;
    let dev_set = EncodedSet::labeled(dev, tokenizer, &train_config.input)?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::invalid("train and dev sets must be non-empty"));
    }

    let mut params = EncoderParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut states: Vec<AdamState> = params
        .tensors()
        .iter()
        .map(|t| AdamState::new(t.numel()))
        .collect();

    let shards_per_batch = train_config.batch_size.div_ceil(train_config.shard_size) as u64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(train_config.epochs);
    let mut best: Option<(usize, Metrics, EncoderParams)> = None;
    let mut step: u64 = 0;
    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(train_config.batch_size) {
            let dropout = (config.dropout > 0.0).then(|| (seed, 2 + step * shards_per_batch));
            let (loss, mut grads) = batch_gradients(
                &params,
                &config,
                &train_set,
                batch,
                train_config.shard_size,
                train_config.execution,
                dropout,
            )?;
            clip_global_norm(&mut grads, train_config.grad_clip_norm)?;
            for ((t, g), s) in params.tensors_mut().into_iter().zip(&grads).zip(&mut states) {
                adam_step(t.data_mut(), g, s, &train_config.adam, train_config.learning_rate)?;
            }
            loss_sum += loss;
            batches += 1;
            step += 1;
        }
        let dev_metrics = evaluate_set(
            &params,
            &config,
            &dev_set,
            train_config.eval_batch_size,
            train_config.execution,
        )?;
        let improved = best
            .as_ref()
            .is_none_or(|(_, m, _)| dev_metrics.macro_avg.f1 > m.macro_avg.f1);
        if improved {
            best = Some((epoch, dev_metrics, params.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            dev: dev_metrics,
        });
    }
    let (best_epoch, best_metrics, best_params) = best.expect("at least one epoch");

    let checkpoint = match checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = checkpoint_path(dir, train_config.input.mode.short(), seed);
            Checkpoint {
                seed,
                epoch: best_epoch,
                input: train_config.input,
                encoder: config.clone(),
                tokenizer: tokenizer.clone(),
                params: best_params.clone(),
            }
            .save(&path)?;
            Some(path)
        }
        None => None,
    };

    Ok(RunResult {
        seed,
        epochs,
        best_epoch,
        best: best_metrics,
        checkpoint,
        best_params,
        encoder: config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1_macro: MeanStd,
    pub f1_sarcasm: MeanStd,
    pub accuracy: MeanStd,
}

impl AggregateResult {
    pub fn from_runs(runs: &[RunResult]) -> Self {
        let pick = |f: fn(&Metrics) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.best)).collect::<Vec<_>>());
        AggregateResult {
            runs: runs.len(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            precision: pick(|m| m.macro_avg.precision),
            recall: pick(|m| m.macro_avg.recall),
            f1_macro: pick(|m| m.macro_avg.f1),
            f1_sarcasm: pick(|m| m.sarcasm.f1),
            accuracy: pick(|m| m.accuracy),
        }
    }

    /// Table row in `P  R  F1` order, e.g. `81.0 (±0.3)  80.2 (±0.5)  81.3 (±0.2)`.
    pub fn table_row(&self) -> String {
        format!(
            "{}  {}  {}",
            format_mean_std(self.precision.mean, self.precision.std),
            format_mean_std(self.recall.mean, self.recall.std),
            format_mean_std(self.f1_macro.mean, self.f1_macro.std)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiRunResult {
    pub runs: Vec<RunResult>,
    pub aggregate: AggregateResult,
}

/// One [`train_run`] per configured seed (in parallel when enabled),
/// aggregated as mean and population std of the best dev metrics.
pub fn multi_run(
    train: &Corpus,
    dev: &Corpus,
    tokenizer: &Tokenizer,
    enc_config: &EncoderConfig,
    train_config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<MultiRunResult> {
    train_config.validate()?;
    let runs = par::try_map(train_config.execution, &train_config.seeds, |&seed| {
        train_run(train, dev, tokenizer, enc_config, train_config, seed, checkpoint_dir)
    })?;
    let aggregate = AggregateResult::from_runs(&runs);
    Ok(MultiRunResult { runs, aggregate })
}

#[derive(Serialize)]
struct MetricsLine {
    seed: u64,
    epoch: usize,
    split: &'static str,
    precision: f64,
    recall: f64,
    f1_macro: f64,
    f1_sarcasm: f64,
}

/// One JSON line per (seed, epoch) dev evaluation.
pub fn metrics_jsonl(runs: &[RunResult]) -> String {
    let mut out = String::new();
    for run in runs {
        for e in &run.epochs {
            let line = MetricsLine {
                seed: run.seed,
                epoch: e.epoch,
                split: "dev",
                precision: e.dev.macro_avg.precision,
                recall: e.dev.macro_avg.recall,
                f1_macro: e.dev.macro_avg.f1,
                f1_sarcasm: e.dev.sarcasm.f1,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("finite metrics"));
        }
    }
    out
}
