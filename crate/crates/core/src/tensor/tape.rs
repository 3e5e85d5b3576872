use rand::Rng;

use super::{broadcast_map, broadcast_shape, numel, strides, Tensor};
use crate::error::{Error, Result};

/// Source index for each output element of a broadcast operand.
type BroadcastMap = Vec<usize>;

/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Add {
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        offsets: Vec<(usize, usize)>,
        p: usize,
        q: usize,
        r: usize,
    },
    /// out[i] = x[map[i]]; used by permute and narrow.
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    SoftmaxMasked {
        x: Var,
        d: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        d: usize,
    },
    Gelu {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

struct Node<'p> {
    value: Value<'p>,
    requires_grad: bool,
    op: Op,
}

/// Execution-ordered record of tensor operations.
///
/// Node inputs always precede their outputs, so reverse insertion order is
/// a valid reverse topological order for [`Tape::backward`].
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_value(Value::Owned(value), requires_grad, op)
    }

    fn push_value(&mut self, value: Value<'p>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a borrowed tensor as a differentiable leaf without copying it.
    pub fn param(&mut self, value: &'p Tensor) -> Var {
        self.push_value(Value::Borrowed(value), true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Tape::backward`], if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Option<BroadcastMap>, Option<BroadcastMap>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb, name)?;
        let a_map = (sa != out_shape).then(|| broadcast_map(&sa, &out_shape));
        let b_map = (sb != out_shape).then(|| broadcast_map(&sb, &out_shape));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let data = (0..n)
            .map(|i| {
                let ia = a_map.as_ref().map_or(i, |m| m[i]);
                let ib = b_map.as_ref().map_or(i, |m| m[i]);
                f(da[ia], db[ib])
            })
            .collect();
        Ok((Tensor::new(out_shape, data)?, a_map, b_map))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, a_map, b_map) = self.elementwise(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b, a_map, b_map }))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, a_map, b_map) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b, a_map, b_map }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Scale { x, factor })
    }

    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]` with
    /// broadcasting over the leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(mismatch());
        }
        let (p, q, r) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb, "matmul").map_err(|_| mismatch())?;
        let amap = broadcast_map(ba, &batch);
        let bmap = broadcast_map(bb, &batch);
        let offsets: Vec<(usize, usize)> = amap
            .iter()
            .zip(&bmap)
            .map(|(&i, &j)| (i * p * q, j * q * r))
            .collect();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; offsets.len() * p * r];
        for (bi, &(ao, bo)) in offsets.iter().enumerate() {
            let c = &mut out[bi * p * r..(bi + 1) * p * r];
            for i in 0..p {
                let crow = &mut c[i * r..(i + 1) * r];
                for k in 0..q {
                    let av = da[ao + i * q + k];
                    let brow = &db[bo + k * r..bo + (k + 1) * r];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        let mut shape = batch;
        shape.extend([p, r]);
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::MatMul {
                a,
                b,
                offsets,
                p,
                q,
                r,
            },
        ))
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.needs(&[x]);
        self.push(
            Tensor::new(shape, data).expect("map sized to shape"),
            rg,
            Op::Gather { x, map },
        )
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permutation {perm:?} invalid for shape {shape:?}"
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total = numel(&out_shape);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(self.gather(x, out_shape, map))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::invalid("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of bounds for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in start..start + len {
                let base = (o * shape[axis] + i) * inner;
                map.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.gather(x, out_shape, map))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Softmax over the last axis restricted to positions where the
    /// broadcast `mask` is nonzero; masked positions get exactly 0.
    pub fn softmax_masked(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("softmax of a scalar"))?;
        let full = broadcast_shape(&shape, mask.shape(), "softmax_masked")?;
        if full != shape {
            return Err(Error::ShapeMismatch {
                op: "softmax_masked",
                lhs: shape,
                rhs: mask.shape().to_vec(),
            });
        }
        let mmap = broadcast_map(mask.shape(), &shape);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row, (xs, ys)) in src.chunks(d.max(1)).zip(out.chunks_mut(d.max(1))).enumerate() {
            let live = |j: usize| mask.data()[mmap[row * d + j]] != 0.0;
            let max = (0..d)
                .filter(|&j| live(j))
                .map(|j| xs[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked { row });
            }
            let mut sum = 0.0;
            for j in 0..d {
                if live(j) {
                    ys[j] = (xs[j] - max).exp();
                    sum += ys[j];
                }
            }
            for y in ys.iter_mut() {
                *y /= sum;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::SoftmaxMasked { x, d }))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm of a scalar"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (src, g, b) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let xs = &src[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xs[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                d,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (SQRT_2_OVER_PI * (v + GELU_COEFF * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(value, rg, Op::Gelu { x })
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Only call in training mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::Dropout { x, mask }))
    }

    /// Gathers rows of a `[vocab, d]` table; output shape is
    /// `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::invalid(format!("embedding table must be 2-D, got {ts:?}")));
        }
        if numel(index_shape) != ids.len() {
            return Err(Error::invalid("index shape does not match id count"));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: vocab,
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                d,
            },
        ))
    }

    /// Mean negative log-likelihood of the gold class for `[b, 2]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[1] != 2 || shape[0] == 0 {
            return Err(Error::invalid(format!(
                "cross_entropy expects [b >= 1, 2] logits, got {shape:?}"
            )));
        }
        if labels.len() != shape[0] {
            return Err(Error::LengthMismatch(format!(
                "{} logit rows but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::BadLabel(bad));
        }
        let c = shape[1];
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[label];
        }
        let loss = total / labels.len() as f64;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean { x })
    }

    /// Populates gradients of every `requires_grad` node that `loss`
    /// depends on. Previous gradients are discarded; within one call,
    /// contributions from multiple uses accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            propagate(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.get().numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn scatter(dst: &mut [f64], map: Option<&Vec<usize>>, contrib: impl Fn(usize) -> f64, n: usize) {
    match map {
        None => {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += contrib(i);
            }
        }
        Some(m) => {
            for i in 0..n {
                dst[m[i]] += contrib(i);
            }
        }
    }
}

fn propagate(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let value = |v: Var| nodes[v.0].value.get().data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add { a, b, a_map, b_map } => {
            if let Some(da) = slot(nodes, grads, *a) {
                scatter(da, a_map.as_ref(), |k| g[k], g.len());
            }
            if let Some(db) = slot(nodes, grads, *b) {
                scatter(db, b_map.as_ref(), |k| g[k], g.len());
            }
        }
        Op::Mul { a, b, a_map, b_map } => {
            let (va, vb) = (value(*a), value(*b));
            let ia = |k: usize| a_map.as_ref().map_or(k, |m| m[k]);
            let ib = |k: usize| b_map.as_ref().map_or(k, |m| m[k]);
            if let Some(da) = slot(nodes, grads, *a) {
                scatter(da, a_map.as_ref(), |k| g[k] * vb[ib(k)], g.len());
            }
            if let Some(db) = slot(nodes, grads, *b) {
                scatter(db, b_map.as_ref(), |k| g[k] * va[ia(k)], g.len());
            }
        }
        Op::Scale { x, factor } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv * factor;
                }
            }
        }
        Op::MatMul {
            a,
            b,
            offsets,
            p,
            q,
            r,
        } => {
            let (p, q, r) = (*p, *q, *r);
            let (va, vb) = (value(*a), value(*b));
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = dC . B^T
                for (bi, &(ao, bo)) in offsets.iter().enumerate() {
                    let gc = &g[bi * p * r..(bi + 1) * p * r];
                    for i in 0..p {
                        let grow = &gc[i * r..(i + 1) * r];
                        for k in 0..q {
                            let brow = &vb[bo + k * r..bo + (k + 1) * r];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            da[ao + i * q + k] += s;
                        }
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB = A^T . dC
                for (bi, &(ao, bo)) in offsets.iter().enumerate() {
                    let gc = &g[bi * p * r..(bi + 1) * p * r];
                    for i in 0..p {
                        let grow = &gc[i * r..(i + 1) * r];
                        for k in 0..q {
                            let av = va[ao + i * q + k];
                            let drow = &mut db[bo + k * r..bo + (k + 1) * r];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Gather { x, map } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (k, &src) in map.iter().enumerate() {
                    dx[src] += g[k];
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::SoftmaxMasked { x, d } => {
            let y = nodes[i].value.get().data();
            let d = *d;
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((ys, gs), dxs) in y.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dxs[j] += ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
            d,
        } => {
            let d = *d;
            let gv = value(*gain);
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, rs) in rstd.iter().enumerate() {
                    let gs = &g[r * d..(r + 1) * d];
                    let hs = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<f64> = gs.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(hs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] +=
                            rs / d as f64 * (d as f64 * dh[j] - sum_dh - hs[j] * sum_dh_h);
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for (k, (gk, hk)) in g.iter().zip(xhat).enumerate() {
                    dg[k % d] += gk * hk;
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for (k, gk) in g.iter().enumerate() {
                    db[k % d] += gk;
                }
            }
        }
        Op::Gelu { x } => {
            let xs = value(*x);
            if let Some(dx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    let v = xs[k];
                    let t = (SQRT_2_OVER_PI * (v + GELU_COEFF * v * v * v)).tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * v * v);
                    dx[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for k in 0..g.len() {
                    dx[k] += g[k] * mask[k];
                }
            }
        }
        Op::Embedding { table, ids, d } => {
            let d = *d;
            if let Some(dt) = slot(nodes, grads, *table) {
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let scale = g[0] / labels.len() as f64;
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (row, &label) in labels.iter().enumerate() {
                    for j in 0..2 {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dl[row * 2 + j] += scale * (probs[row * 2 + j] - onehot);
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { x } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let n = dx.len().max(1) as f64;
                for d in dx.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let m = rand_t(&[3, 2], 1);
        let mv = tape.constant(m.clone());
        let out = tape.matmul(eye, mv).unwrap();
        assert_eq!(tape.value(out), &m);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), [17.0, 39.0]);
        assert_eq!(tape.shape(c), [2, 1]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradients() {
        let rep = grad_check(
            |tape, v| {
                let c = tape.matmul(v[0], v[1])?;
                Ok(tape.sum(c))
            },
            &[rand_t(&[3, 4], 2), rand_t(&[4, 2], 3)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");

        // batched times broadcast 2-D
        let rep = grad_check(
            |tape, v| {
                let c = tape.matmul(v[0], v[1])?;
                let w = tape.constant(rand_t(&[2, 3, 5], 9));
                let c = tape.mul(c, w)?;
                Ok(tape.sum(c))
            },
            &[rand_t(&[2, 3, 4], 4), rand_t(&[4, 5], 5)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn softmax_masked_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.softmax_masked(x, &Tensor::ones(&[1, 4])).unwrap();
        assert_eq!(tape.value(y).data(), [0.25; 4]);

        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let y = tape.softmax_masked(x, &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert_eq!(tape.value(y).data(), [1.0, 0.0]);

        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.softmax_masked(x, &t(&[2, 2], &[1.0, 1.0, 0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 1 }));
    }

    #[test]
    fn softmax_masked_gradients() {
        let mask = t(&[2, 5], &[1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let w = rand_t(&[2, 5], 12);
        let rep = grad_check(
            |tape, v| {
                let y = tape.softmax_masked(v[0], &mask)?;
                let w = tape.constant(w.clone());
                let y = tape.mul(y, w)?;
                Ok(tape.sum(y))
            },
            &[rand_t(&[2, 5], 11)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn layer_norm_values_and_gradients() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), [0.0; 3]);

        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        // variance 1, so outputs are -1/sqrt(1 + eps) and +1/sqrt(1 + eps)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - expect).abs() < 1e-15);

        let w = rand_t(&[3, 4], 22);
        let rep = grad_check(
            |tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = tape.constant(w.clone());
                let y = tape.mul(y, w)?;
                Ok(tape.sum(y))
            },
            &[rand_t(&[3, 4], 20), rand_t(&[4], 21), rand_t(&[4], 23)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn cross_entropy_values_and_errors() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        for label in [0, 1] {
            let l = tape.cross_entropy(z, &[label]).unwrap();
            assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
        }
        let z = tape.constant(t(&[1, 2], &[100.0, 0.0]));
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-40);
        assert!(matches!(tape.cross_entropy(z, &[2]), Err(Error::BadLabel(2))));

        let rep = grad_check(
            |tape, v| tape.cross_entropy(v[0], &[1, 0, 1]),
            &[rand_t(&[3, 2], 30)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn backward_hand_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]), true);
        let y = tape.reshape(x, &[]).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), [1.0]);

        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let y = tape.sum(sq);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), [2.0, 4.0, 6.0]);

        // x feeds two branches: y = sum(3x) + sum(x * c)
        let x = tape.leaf(t(&[2], &[1.0, -1.0]), true);
        let c = tape.constant(t(&[2], &[5.0, 7.0]));
        let left = tape.scale(x, 3.0);
        let right = tape.mul(x, c).unwrap();
        let both = tape.add(left, right).unwrap();
        let y = tape.sum(both);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), [8.0, 10.0]);
        assert!(tape.grad(c).is_none());

        let v = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(v), Err(Error::NotScalar(_))));
    }

    #[test]
    fn embedding_gather_scatter() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::from_fn(&[4, 2], |i| i as f64), true);
        let e = tape.embedding(table, &[3, 1, 3], &[3]).unwrap();
        assert_eq!(tape.value(e).data(), [6.0, 7.0, 2.0, 3.0, 6.0, 7.0]);
        let y = tape.sum(e);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(table).unwrap(), [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(
            tape.embedding(table, &[4], &[1]),
            Err(Error::TokenOutOfRange { id: 4, vocab_size: 4 })
        ));
    }

    #[test]
    fn dropout_is_seeded_inverted_and_differentiable() {
        let x = Tensor::ones(&[1000]);
        let run = |seed| {
            let mut tape = Tape::new();
            let v = tape.constant(x.clone());
            let y = tape.dropout(v, 0.25, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            tape.value(y).clone()
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_ne!(a, run(2));
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let kept = a.data().iter().filter(|&&v| v > 0.0).count();
        assert!((650..850).contains(&kept), "{kept}");

        let rep = grad_check(
            |tape, v| {
                let y = tape.dropout(v[0], 0.5, &mut ChaCha8Rng::seed_from_u64(3))?;
                let y = tape.mul(y, y)?;
                Ok(tape.sum(y))
            },
            &[rand_t(&[10], 31)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn permute_narrow_reshape_gradients() {
        let w = rand_t(&[3, 1, 4], 41);
        let rep = grad_check(
            |tape, v| {
                let p = tape.permute(v[0], &[2, 0, 1])?; // [4, 2, 3]
                let p = tape.transpose(p)?; // [4, 3, 2]
                let n = tape.narrow(p, 2, 1, 1)?; // [4, 3, 1]
                let r = tape.reshape(n, &[3, 1, 4])?;
                let w = tape.constant(w.clone());
                let y = tape.mul(r, w)?;
                let y = tape.gelu(y);
                Ok(tape.mean(y))
            },
            &[rand_t(&[2, 3, 4], 40)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let xt = tape.transpose(x).unwrap();
        assert_eq!(tape.value(xt).data(), [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(tape.permute(x, &[0, 0]).is_err());
        assert!(tape.narrow(x, 1, 2, 2).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 1.0, -1.0]));
        let y = tape.gelu(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((d[2] + 0.158_808_009_391_723_24).abs() < 1e-12);
    }

    #[test]
    fn add_broadcasts_bias() {
        let rep = grad_check(
            |tape, v| {
                let y = tape.add(v[0], v[1])?;
                let y = tape.mul(y, y)?;
                Ok(tape.sum(y))
            },
            &[rand_t(&[2, 3, 4], 50), rand_t(&[4], 51)],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
