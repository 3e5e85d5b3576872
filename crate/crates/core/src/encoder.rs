//! Post-norm transformer encoder with CLS pooling and a linear 2-way decoder.
//!
//! embeddings (token + position + segment) -> N x [multi-head self-attention,
//! residual, layer norm, GELU feed-forward, residual, layer norm] -> final
//! hidden state at position 0 -> linear decoder -> logits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::sequence::Batch;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub use_segment: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0,
            max_positions: 256,
            dropout: 0.1,
            use_segment: true,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::invalid("vocab_size must cover the four reserved tokens"));
        }
        if self.num_layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::invalid("num_layers, d_ff and max_positions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const LAYER_NAMES: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "w1", "b1", "w2",
    "b2", "ln2_gain", "ln2_bias",
];

impl LayerParams {
    fn init<R: Rng + ?Sized>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        let mut w = |shape: &[usize]| Tensor::randn(shape, INIT_STD, rng);
        LayerParams {
            wq: w(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: w(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: w(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: w(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            w1: w(&[d, d_ff]),
            b1: Tensor::zeros(&[d_ff]),
            w2: w(&[d_ff, d]),
            b2: Tensor::zeros(&[d]),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gain, &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2,
            &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gain, &mut self.ln2_bias,
        ]
    }
}

/// Every learnable tensor of the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub segment_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub decoder_weight: Tensor,
    pub decoder_bias: Tensor,
}

impl EncoderParams {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embedding = Tensor::randn(&[config.vocab_size, d], INIT_STD, rng);
        let position_embedding = Tensor::randn(&[config.max_positions, d], INIT_STD, rng);
        let segment_embedding = Tensor::randn(&[2, d], INIT_STD, rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams::init(d, config.d_ff, rng))
            .collect();
        let decoder_weight = Tensor::randn(&[d, 2], INIT_STD, rng);
        Ok(EncoderParams {
            token_embedding,
            position_embedding,
            segment_embedding,
            layers,
            decoder_weight,
            decoder_bias: Tensor::zeros(&[2]),
        })
    }

    /// Canonical parameter names, in the order of [`EncoderParams::tensors`].
    pub fn names(num_layers: usize) -> Vec<String> {
        let mut names = vec![
            "token_embedding".to_string(),
            "position_embedding".to_string(),
            "segment_embedding".to_string(),
        ];
        for l in 0..num_layers {
            names.extend(LAYER_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        names.push("decoder.weight".into());
        names.push("decoder.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.segment_embedding,
        ];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.decoder_weight);
        out.push(&self.decoder_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.segment_embedding,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.decoder_weight);
        out.push(&mut self.decoder_bias);
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        Self::names(self.layers.len())
            .into_iter()
            .zip(self.tensors())
            .collect()
    }

    /// Expected shape of every tensor, in canonical order.
    pub fn expected_shapes(config: &EncoderConfig) -> Vec<Vec<usize>> {
        let (d, f) = (config.d_model, config.d_ff);
        let mut shapes = vec![
            vec![config.vocab_size, d],
            vec![config.max_positions, d],
            vec![2, d],
        ];
        for _ in 0..config.num_layers {
            shapes.extend([
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
                vec![d],
                vec![d],
            ]);
        }
        shapes.push(vec![d, 2]);
        shapes.push(vec![2]);
        shapes
    }

    /// Rebuilds parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::expected_shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::format(
                "parameters",
                format!("expected {} tensors, got {}", shapes.len(), tensors.len()),
            ));
        }
        let names = Self::names(config.num_layers);
        for ((t, s), n) in tensors.iter().zip(&shapes).zip(&names) {
            if t.shape() != s.as_slice() {
                return Err(Error::format(
                    "parameters",
                    format!("{n}: expected shape {s:?}, got {:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(n.clone()));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("count checked");
        let token_embedding = next();
        let position_embedding = next();
        let segment_embedding = next();
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln1_gain: next(),
                ln1_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                ln2_gain: next(),
                ln2_bias: next(),
            })
            .collect();
        let decoder_weight = next();
        let decoder_bias = next();
        Ok(EncoderParams {
            token_embedding,
            position_embedding,
            segment_embedding,
            layers,
            decoder_weight,
            decoder_bias,
        })
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }
}

/// Parameter leaves registered on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn register<'p>(tape: &mut Tape<'p>, params: &'p EncoderParams) -> Self {
        ParamVars(params.tensors().into_iter().map(|t| tape.param(t)).collect())
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.0[3 + l * 16 + k]
    }

    fn decoder(&self) -> (Var, Var) {
        let n = self.0.len();
        (self.0[n - 2], self.0[n - 1])
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub embeddings: Var,
    pub hidden: Var,
    pub cls: Var,
    pub logits: Var,
    /// One `[b, heads, L, L]` attention tensor per layer.
    pub attention: Vec<Var>,
}

fn embed_on_tape(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    config: &EncoderConfig,
    batch: &Batch,
) -> Result<Var> {
    let (b, l) = (batch.rows, batch.cols);
    if l > config.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {l} exceeds max_positions {}",
            config.max_positions
        )));
    }
    let tok = tape.embedding(vars.0[0], &batch.ids, &[b, l])?;
    let positions: Vec<usize> = (0..l).collect();
    let pos = tape.embedding(vars.0[1], &positions, &[l])?;
    let mut h = tape.add(tok, pos)?;
    if config.use_segment {
        let seg_ids: Vec<usize> = batch.segment.iter().map(|&s| s as usize).collect();
        let seg = tape.embedding(vars.0[2], &seg_ids, &[b, l])?;
        h = tape.add(h, seg)?;
    }
    Ok(h)
}

fn maybe_dropout(
    tape: &mut Tape<'_>,
    x: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(r) if p > 0.0 => tape.dropout(x, p, *r),
        _ => Ok(x),
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Records the full forward pass. Pass `rng = Some(..)` for training mode
/// (dropout active); `None` is evaluation mode.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    config: &EncoderConfig,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardVars> {
    let (b, l, d, heads) = (batch.rows, batch.cols, config.d_model, config.num_heads);
    let hd = config.head_dim();
    let embeddings = embed_on_tape(tape, vars, config, batch)?;
    let mut h = maybe_dropout(tape, embeddings, config.dropout, &mut rng)?;

    let key_mask = Tensor::new(
        vec![b, 1, 1, l],
        batch.mask.iter().map(|&m| f64::from(m)).collect(),
    )?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut attention = Vec::with_capacity(config.num_layers);
    for layer in 0..config.num_layers {
        let p = |k| vars.layer(layer, k);
        let q = linear(tape, h, p(0), p(1))?;
        let k = linear(tape, h, p(2), p(3))?;
        let v = linear(tape, h, p(4), p(5))?;
        let q = tape.reshape(q, &[b, l, heads, hd])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let k = tape.reshape(k, &[b, l, heads, hd])?;
        let kt = tape.permute(k, &[0, 2, 3, 1])?;
        let v = tape.reshape(v, &[b, l, heads, hd])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;

        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_masked(scores, &key_mask)?;
        attention.push(attn);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, l, d])?;
        let out = linear(tape, ctx, p(6), p(7))?;
        let out = maybe_dropout(tape, out, config.dropout, &mut rng)?;
        let res = tape.add(h, out)?;
        h = tape.layer_norm(res, p(8), p(9), LAYER_NORM_EPS)?;

        let ff = linear(tape, h, p(10), p(11))?;
        let ff = tape.gelu(ff);
        let ff = linear(tape, ff, p(12), p(13))?;
        let ff = maybe_dropout(tape, ff, config.dropout, &mut rng)?;
        let res = tape.add(h, ff)?;
        h = tape.layer_norm(res, p(14), p(15), LAYER_NORM_EPS)?;
    }
    let cls = tape.narrow(h, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[b, d])?;
    let (dw, db) = vars.decoder();
    let logits = linear(tape, cls, dw, db)?;
    Ok(ForwardVars {
        embeddings,
        hidden: h,
        cls,
        logits,
        attention,
    })
}

/// Materialized forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[b, d_model]` final hidden state at the CLS position.
    pub cls_embedding: Tensor,
    /// `[b, L, d_model]` final hidden states.
    pub token_embeddings: Tensor,
    /// `[b, 2]`.
    pub logits: Tensor,
    /// Per layer, `[b, heads, L, L]`.
    pub attention: Vec<Tensor>,
}

/// Summed token, position and segment embeddings, `[b, L, d_model]`.
pub fn embed(
    batch: &Batch,
    params: &EncoderParams,
    config: &EncoderConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let h = embed_on_tape(&mut tape, &vars, config, batch)?;
    let mut rng = rng;
    let h = maybe_dropout(&mut tape, h, config.dropout, &mut rng)?;
    Ok(tape.value(h).clone())
}

pub fn encoder_forward(
    batch: &Batch,
    params: &EncoderParams,
    config: &EncoderConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params);
    let fv = forward_on_tape(&mut tape, &vars, config, batch, rng)?;
    Ok(EncoderOutput {
        cls_embedding: tape.value(fv.cls).clone(),
        token_embeddings: tape.value(fv.hidden).clone(),
        logits: tape.value(fv.logits).clone(),
        attention: fv.attention.iter().map(|&a| tape.value(a).clone()).collect(),
    })
}

/// Argmax over `[NOT_SARCASM, SARCASM]` logits; an exact tie is NOT_SARCASM.
pub fn classify(logits: &[f64]) -> Result<Label> {
    if logits.len() != 2 {
        return Err(Error::invalid(format!("expected 2 logits, got {}", logits.len())));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(if logits[1] > logits[0] {
        Label::Sarcasm
    } else {
        Label::NotSarcasm
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::{build_context_input, build_target_input, pad_batch, ContextTruncation};
    use rand::SeedableRng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 20,
            max_positions: 256,
            dropout: 0.0,
            use_segment: true,
        }
    }

    fn params(config: &EncoderConfig, seed: u64) -> EncoderParams {
        EncoderParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(EncoderConfig { num_heads: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { vocab_size: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { dropout: 1.0, ..tiny() }.validate().is_err());
    }

    #[test]
    fn init_shapes_and_names_agree() {
        let c = tiny();
        let p = params(&c, 1);
        let shapes = EncoderParams::expected_shapes(&c);
        let names = EncoderParams::names(c.num_layers);
        assert_eq!(names.len(), p.tensors().len());
        for (t, s) in p.tensors().iter().zip(&shapes) {
            assert_eq!(t.shape(), s.as_slice());
        }
        assert_eq!(p.layers[1].ln2_gain.data(), [1.0; 8]);
        let rebuilt =
            EncoderParams::from_tensors(&c, p.tensors().into_iter().cloned().collect()).unwrap();
        assert_eq!(rebuilt, p);
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let c = tiny();
        let mut p = params(&c, 2);
        for t in [&mut p.token_embedding, &mut p.position_embedding, &mut p.segment_embedding] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let input = build_target_input(&[5, 6], 128).unwrap();
        let batch = pad_batch(&[&input], None).unwrap();
        let e = embed(&batch, &p, &c, None).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_row_is_sum_of_tables() {
        let c = tiny();
        let p = params(&c, 3);
        let input = crate::sequence::ModelInput {
            ids: vec![5],
            mask: vec![1],
            segment: vec![0],
            mode: crate::sequence::Mode::TargetOriented,
        };
        let batch = pad_batch(&[&input, &input], None).unwrap();
        let e = embed(&batch, &p, &c, None).unwrap();
        let d = c.d_model;
        for j in 0..d {
            let expect = p.token_embedding.data()[5 * d + j]
                + p.position_embedding.data()[j]
                + p.segment_embedding.data()[j];
            assert_eq!(e.data()[j], expect);
            assert_eq!(e.data()[d + j], e.data()[j]);
        }
    }

    #[test]
    fn rejects_out_of_range_ids_and_lengths() {
        let c = tiny();
        let p = params(&c, 4);
        let input = build_target_input(&[25], 128).unwrap();
        let batch = pad_batch(&[&input], None).unwrap();
        assert!(matches!(
            encoder_forward(&batch, &p, &c, None),
            Err(Error::TokenOutOfRange { id: 25, .. })
        ));
        let short = EncoderConfig { max_positions: 2, ..c.clone() };
        let ps = params(&short, 4);
        let input = build_target_input(&[5, 6, 7], 128).unwrap();
        let batch = pad_batch(&[&input], None).unwrap();
        assert!(encoder_forward(&batch, &ps, &short, None).is_err());
    }

    #[test]
    fn output_shapes() {
        let c = tiny();
        let p = params(&c, 5);
        let input = build_target_input(&[5, 6, 7], 128).unwrap();
        let batch = pad_batch(&[&input], None).unwrap();
        let out = encoder_forward(&batch, &p, &c, None).unwrap();
        assert_eq!(out.logits.shape(), [1, 2]);
        assert_eq!(out.cls_embedding.shape(), [1, 8]);
        assert_eq!(out.token_embeddings.shape(), [1, 4, 8]);
        assert_eq!(out.attention.len(), 2);
        for a in &out.attention {
            assert_eq!(a.shape(), [1, 2, 4, 4]);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_dropout_is_not() {
        let c = EncoderConfig { dropout: 0.3, ..tiny() };
        let p = params(&c, 6);
        let input =
            build_context_input(&[5, 6], &[vec![7, 8, 9]], 256, ContextTruncation::DropTail)
                .unwrap();
        let batch = pad_batch(&[&input, &input], None).unwrap();
        let a = encoder_forward(&batch, &p, &c, None).unwrap();
        let b = encoder_forward(&batch, &p, &c, None).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.logits.data()[..2], a.logits.data()[2..]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = encoder_forward(&batch, &p, &c, Some(&mut rng)).unwrap();
        assert_ne!(t.logits.data(), a.logits.data());
    }

    #[test]
    fn classify_rules() {
        assert_eq!(classify(&[0.2, 1.7]).unwrap(), Label::Sarcasm);
        assert_eq!(classify(&[3.0, 3.0]).unwrap(), Label::NotSarcasm);
        assert_eq!(classify(&[1.0, 0.0]).unwrap(), Label::NotSarcasm);
        assert!(classify(&[f64::NAN, 0.0]).is_err());
        assert!(classify(&[0.0]).is_err());
    }
}
