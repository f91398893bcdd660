use rayon::prelude::*;

use super::{Result, Scalar, Tensor, TensorError};
use crate::concurrency;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddBias { x: Var, bias: Var },
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    TransposeLast2 { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    ReduceMean { x: Var, axis: usize },
    ReduceVar { x: Var, axis: usize },
    SumAll { x: Var },
    PrependToken { tokens: Var, token: Var },
    SelectToken { x: Var, index: usize },
    CrossEntropy { logits: Var, labels: Vec<u32>, probs: Vec<T> },
}

struct Node<T: Scalar> {
    tensor: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed ops. Backward traverses in exact reverse
/// execution order; one tape is single-threaded, independent tapes may run
/// concurrently.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Its `requires_grad` flag decides whether
    /// backward will populate its gradient.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Total bytes held by non-leaf node payloads (activation footprint of
    /// the recorded computation).
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.tensor.numel() * T::DTYPE.size_bytes())
            .sum()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(id)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.data()
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                context,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, needs))
    }

    /// Multiply by a constant scalar (not a tape value; no gradient flows
    /// into the constant).
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let data: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data).expect("scale preserves shape"),
            Op::Scale { x, c },
            needs,
        )
    }

    /// `x + bias` where `bias.shape` is a suffix of `x.shape` (bias-add over
    /// leading dims; the only broadcast the engine supports).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(bias);
        if bs.len() > xs.len() || &xs[xs.len() - bs.len()..] != bs {
            return Err(TensorError::ShapeMismatch {
                context: "add_bias: bias shape must be a suffix of x shape",
                lhs: xs.to_vec(),
                rhs: bs.to_vec(),
            });
        }
        let bn = self.nodes[bias.0].tensor.numel().max(1);
        let bd = self.data(bias);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % bn])
            .collect();
        let shape = xs.to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias { x, bias }, needs))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asr, bsr) = (self.shape(a), self.shape(b));
        if asr.len() != 2 || bsr.len() != 2 {
            return Err(TensorError::Dimension(format!(
                "matmul requires rank-2 operands, got {:?} and {:?}",
                asr, bsr
            )));
        }
        let (m, k) = (asr[0], asr[1]);
        let n = bsr[1];
        if bsr[0] != k {
            return Err(TensorError::ShapeMismatch {
                context: "matmul inner extents",
                lhs: asr.to_vec(),
                rhs: bsr.to_vec(),
            });
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul { a, b }, needs))
    }

    /// `[N,m,k] x [N,k,n] -> [N,m,n]`, slice-wise.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asr, bsr) = (self.shape(a), self.shape(b));
        if asr.len() != 3 || bsr.len() != 3 || asr[0] != bsr[0] || asr[2] != bsr[1] {
            return Err(TensorError::ShapeMismatch {
                context: "batch_matmul expects [N,m,k] x [N,k,n]",
                lhs: asr.to_vec(),
                rhs: bsr.to_vec(),
            });
        }
        let (nb, m, k, n) = (asr[0], asr[1], asr[2], bsr[2]);
        let data = batch_matmul_raw(self.data(a), self.data(b), nb, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![nb, m, n], data)?,
            Op::BatchMatMul { a, b },
            needs,
        ))
    }

    /// Swap the last two axes (plain transpose for rank 2).
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(TensorError::Dimension(
                "transpose_last2 requires rank >= 2".into(),
            ));
        }
        let (data, shape) = transpose_last2_raw(self.data(x), xs);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::TransposeLast2 { x }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(TensorError::Dimension("transpose requires rank 2".into()));
        }
        self.transpose_last2(x)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        check_permutation(axes, xs.len())?;
        let (data, shape) = permute_raw(self.data(x), xs, axes);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].tensor.numel() {
            return Err(TensorError::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(x),
                new_shape
            )));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(new_shape, data)?, Op::Reshape { x }, needs))
    }

    // ── Nonlinearities and reductions ───────────────────────────────────

    /// Max-subtraction stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = lane_geometry(&xs, axis)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    if xd[at(j)] > max {
                        max = xd[at(j)];
                    }
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax { x, axis }, needs))
    }

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| {
            TensorError::Dimension("layer_norm requires rank >= 1".into())
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                context: "layer_norm affine params must be [d]",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![d],
            });
        }
        let eps = T::from_f64(eps);
        let xd = self.data(x);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let rows = xd.len() / d;
        let mut out = vec![T::zero(); xd.len()];
        let mut means = vec![T::zero(); rows];
        let mut rstds = vec![T::zero(); rows];
        let inv_d = T::one() / T::from_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = T::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                out[r * d + j] = gd[j] * xhat + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| {
                let u = c0 * (v + c1 * v * v * v);
                half * v * (T::one() + u.tanh())
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data).expect("gelu preserves shape"),
            Op::Gelu { x },
            needs,
        )
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = lane_geometry(&xs, axis)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_f64(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for j in 0..len {
                    s = s + xd[o * len * inner + j * inner + i];
                }
                out[o * inner + i] = s * inv;
            }
        }
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ReduceMean { x, axis },
            needs,
        ))
    }

    /// Population variance along `axis`.
    pub fn reduce_var(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = lane_geometry(&xs, axis)?;
        let xd = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        let inv = T::one() / T::from_f64(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mean = T::zero();
                for j in 0..len {
                    mean = mean + xd[at(j)];
                }
                mean = mean * inv;
                let mut var = T::zero();
                for j in 0..len {
                    let c = xd[at(j)] - mean;
                    var = var + c * c;
                }
                out[o * inner + i] = var * inv;
            }
        }
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ReduceVar { x, axis },
            needs,
        ))
    }

    /// Sum of all elements, producing a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    // ── Token plumbing ──────────────────────────────────────────────────

    /// Prepend a learned token to every sequence: `[B,P,d] + [d] -> [B,P+1,d]`.
    pub fn prepend_token(&mut self, tokens: Var, token: Var) -> Result<Var> {
        let ts = self.shape(tokens);
        let ks = self.shape(token);
        if ts.len() != 3 || ks.len() != 1 || ks[0] != ts[2] {
            return Err(TensorError::ShapeMismatch {
                context: "prepend_token expects [B,P,d] and [d]",
                lhs: ts.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let (b, p, d) = (ts[0], ts[1], ts[2]);
        let td = self.data(tokens);
        let kd = self.data(token);
        let mut out = vec![T::zero(); b * (p + 1) * d];
        for bi in 0..b {
            out[bi * (p + 1) * d..bi * (p + 1) * d + d].copy_from_slice(kd);
            out[bi * (p + 1) * d + d..(bi + 1) * (p + 1) * d]
                .copy_from_slice(&td[bi * p * d..(bi + 1) * p * d]);
        }
        let needs = self.needs(tokens) || self.needs(token);
        Ok(self.push(
            Tensor::new(vec![b, p + 1, d], out)?,
            Op::PrependToken { tokens, token },
            needs,
        ))
    }

    /// Extract one sequence position: `[B,T,d] -> [B,d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(TensorError::Dimension(
                "select_token expects [B,T,d]".into(),
            ));
        }
        let (b, t, d) = (xs[0], xs[1], xs[2]);
        if index >= t {
            return Err(TensorError::Dimension(format!(
                "token index {} out of range for sequence length {}",
                index, t
            )));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            out[bi * d..(bi + 1) * d]
                .copy_from_slice(&xd[bi * t * d + index * d..bi * t * d + index * d + d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::SelectToken { x, index },
            needs,
        ))
    }

    /// Mean negative log-likelihood over the batch: logits `[B,C]`, labels
    /// class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 {
            return Err(TensorError::Dimension(
                "cross_entropy expects logits [B,C]".into(),
            ));
        }
        let (b, c) = (ls[0], ls[1]);
        if labels.len() != b {
            return Err(TensorError::Dimension(format!(
                "cross_entropy: {} labels for batch {}",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= c) {
            return Err(TensorError::Dimension(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for bi in 0..b {
            let row = &ld[bi * c..(bi + 1) * c];
            let mut max = T::neg_infinity();
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[bi * c + j] = e;
                sum = sum + e;
            }
            for j in 0..c {
                probs[bi * c + j] = probs[bi * c + j] / sum;
            }
            let y = labels[bi] as usize;
            loss = loss - (row[y] - max - sum.ln());
        }
        loss = loss / T::from_f64(b as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(self.nodes[v.0].tensor.numel(), delta.len());
        match self.nodes[v.0].tensor.grad_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    /// Populate gradients of every `requires_grad` leaf reachable from a
    /// scalar `loss`. One backward pass per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss(
                self.nodes[loss.0].tensor.shape().to_vec(),
            ));
        }
        *self.nodes[loss.0].tensor.grad_mut() = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da: Vec<T> =
                            g.iter().zip(self.data(b)).map(|(&gi, &bi)| gi * bi).collect();
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let db: Vec<T> =
                            g.iter().zip(self.data(a)).map(|(&gi, &ai)| gi * ai).collect();
                        self.accumulate(b, db);
                    }
                }
                Op::Scale { x, c } => {
                    self.accumulate(x, g.iter().map(|&v| v * c).collect());
                }
                Op::AddBias { x, bias } => {
                    if self.needs(bias) {
                        let bn = self.nodes[bias.0].tensor.numel();
                        let mut db = vec![T::zero(); bn];
                        for (idx, &gi) in g.iter().enumerate() {
                            db[idx % bn] = db[idx % bn] + gi;
                        }
                        self.accumulate(bias, db);
                    }
                    self.accumulate(x, g);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        // dA = G . B^T
                        let (bt, _) = transpose_last2_raw(self.data(b), self.shape(b));
                        let da = matmul_raw(&g, &bt, m, n, k);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        // dB = A^T . G
                        let (at, _) = transpose_last2_raw(self.data(a), self.shape(a));
                        let db = matmul_raw(&at, &g, k, m, n);
                        self.accumulate(b, db);
                    }
                }
                Op::BatchMatMul { a, b } => {
                    let asr = self.shape(a).to_vec();
                    let bsr = self.shape(b).to_vec();
                    let (nb, m, k, n) = (asr[0], asr[1], asr[2], bsr[2]);
                    if self.needs(a) {
                        let (bt, _) = transpose_last2_raw(self.data(b), &bsr);
                        let da = batch_matmul_raw(&g, &bt, nb, m, n, k);
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let (at, _) = transpose_last2_raw(self.data(a), &asr);
                        let db = batch_matmul_raw(&at, &g, nb, k, m, n);
                        self.accumulate(b, db);
                    }
                }
                Op::TransposeLast2 { x } => {
                    let out_shape = self.nodes[i].tensor.shape().to_vec();
                    let (dx, _) = transpose_last2_raw(&g, &out_shape);
                    self.accumulate(x, dx);
                }
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0usize; axes.len()];
                    for (dst, &src) in axes.iter().enumerate() {
                        inverse[src] = dst;
                    }
                    let out_shape = self.nodes[i].tensor.shape().to_vec();
                    let (dx, _) = permute_raw(&g, &out_shape, &inverse);
                    self.accumulate(x, dx);
                }
                Op::Reshape { x } => {
                    self.accumulate(x, g);
                }
                Op::Softmax { x, axis } => {
                    let xs = self.shape(x).to_vec();
                    let (outer, len, inner) = lane_geometry(&xs, axis)?;
                    let s = self.nodes[i].tensor.data();
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let mut dot = T::zero();
                            for j in 0..len {
                                dot = dot + g[at(j)] * s[at(j)];
                            }
                            for j in 0..len {
                                dx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let d = *self.shape(x).last().unwrap();
                    let rows = mean.len();
                    let xd = self.data(x);
                    let gd = self.data(gamma);
                    let inv_d = T::one() / T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); xd.len()];
                    let mut dgamma = vec![T::zero(); d];
                    let mut dbeta = vec![T::zero(); d];
                    for r in 0..rows {
                        let base = r * d;
                        let (m, rs) = (mean[r], rstd[r]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let xhat = (xd[base + j] - m) * rs;
                            let dy = g[base + j] * gd[j];
                            m1 = m1 + dy;
                            m2 = m2 + dy * xhat;
                            dgamma[j] = dgamma[j] + g[base + j] * xhat;
                            dbeta[j] = dbeta[j] + g[base + j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for j in 0..d {
                            let xhat = (xd[base + j] - m) * rs;
                            let dy = g[base + j] * gd[j];
                            dx[base + j] = rs * (dy - m1 - xhat * m2);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gamma, dgamma);
                    self.accumulate(beta, dbeta);
                }
                Op::Gelu { x } => {
                    let c0 = T::from_f64(GELU_C0);
                    let c1 = T::from_f64(GELU_C1);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let dx: Vec<T> = self
                        .data(x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gi)| {
                            let u = c0 * (v + c1 * v * v * v);
                            let t = u.tanh();
                            let du = c0 * (T::one() + three * c1 * v * v);
                            gi * (half * (T::one() + t)
                                + half * v * (T::one() - t * t) * du)
                        })
                        .collect();
                    self.accumulate(x, dx);
                }
                Op::ReduceMean { x, axis } => {
                    let xs = self.shape(x).to_vec();
                    let (outer, len, inner) = lane_geometry(&xs, axis)?;
                    let inv = T::one() / T::from_f64(len as f64);
                    let mut dx = vec![T::zero(); outer * len * inner];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let go = g[o * inner + ii] * inv;
                            for j in 0..len {
                                dx[o * len * inner + j * inner + ii] = go;
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::ReduceVar { x, axis } => {
                    let xs = self.shape(x).to_vec();
                    let (outer, len, inner) = lane_geometry(&xs, axis)?;
                    let xd = self.data(x);
                    let inv = T::one() / T::from_f64(len as f64);
                    let two = T::from_f64(2.0);
                    let mut dx = vec![T::zero(); xd.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let mut mean = T::zero();
                            for j in 0..len {
                                mean = mean + xd[at(j)];
                            }
                            mean = mean * inv;
                            let go = g[o * inner + ii];
                            for j in 0..len {
                                dx[at(j)] = go * two * (xd[at(j)] - mean) * inv;
                            }
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::SumAll { x } => {
                    let n = self.nodes[x.0].tensor.numel();
                    self.accumulate(x, vec![g[0]; n]);
                }
                Op::PrependToken { tokens, token } => {
                    let out_shape = self.nodes[i].tensor.shape().to_vec();
                    let (b, t, d) = (out_shape[0], out_shape[1], out_shape[2]);
                    if self.needs(token) {
                        let mut dtok = vec![T::zero(); d];
                        for bi in 0..b {
                            for j in 0..d {
                                dtok[j] = dtok[j] + g[bi * t * d + j];
                            }
                        }
                        self.accumulate(token, dtok);
                    }
                    if self.needs(tokens) {
                        let mut dtokens = vec![T::zero(); b * (t - 1) * d];
                        for bi in 0..b {
                            dtokens[bi * (t - 1) * d..(bi + 1) * (t - 1) * d]
                                .copy_from_slice(&g[bi * t * d + d..(bi + 1) * t * d]);
                        }
                        self.accumulate(tokens, dtokens);
                    }
                }
                Op::SelectToken { x, index } => {
                    let xs = self.shape(x).to_vec();
                    let (b, t, d) = (xs[0], xs[1], xs[2]);
                    let mut dx = vec![T::zero(); b * t * d];
                    for bi in 0..b {
                        dx[bi * t * d + index * d..bi * t * d + index * d + d]
                            .copy_from_slice(&g[bi * d..(bi + 1) * d]);
                    }
                    self.accumulate(x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = self.shape(logits)[1];
                    let b = labels.len();
                    let scale = g[0] / T::from_f64(b as f64);
                    let mut dl = vec![T::zero(); b * c];
                    for (bi, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let indicator = if j == y as usize { T::one() } else { T::zero() };
                            dl[bi * c + j] = (probs[bi * c + j] - indicator) * scale;
                        }
                    }
                    self.accumulate(logits, dl);
                }
            }
        }

        // Contract: every requires_grad leaf ends up with a gradient, even if
        // the loss did not depend on it.
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf)
                && node.tensor.requires_grad()
                && node.tensor.grad().is_none()
            {
                let n = node.tensor.numel();
                *node.tensor.grad_mut() = Some(vec![T::zero(); n]);
            }
        }
        Ok(())
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

fn lane_geometry(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        return Err(TensorError::Dimension(format!(
            "permutation {:?} does not match rank {}",
            axes, rank
        )));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(TensorError::Dimension(format!(
                "invalid permutation {:?}",
                axes
            )));
        }
        seen[a] = true;
    }
    Ok(())
}

const PAR_FLOP_THRESHOLD: usize = 1 << 15;

/// Row-major matmul. Each output element accumulates over k left to right,
/// so results are bit-identical whether or not rows run in parallel.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |i: usize, out_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && concurrency::threads() > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
    out
}

pub(crate) fn batch_matmul_raw<T: Scalar>(
    a: &[T],
    b: &[T],
    nb: usize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); nb * m * n];
    let slice_job = |s: usize, out_slice: &mut [T]| {
        let a_s = &a[s * m * k..(s + 1) * m * k];
        let b_s = &b[s * k * n..(s + 1) * k * n];
        for i in 0..m {
            let a_row = &a_s[i * k..(i + 1) * k];
            let out_row = &mut out_slice[i * n..(i + 1) * n];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_row = &b_s[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + aik * bv;
                }
            }
        }
    };
    if nb * m * k * n >= PAR_FLOP_THRESHOLD && concurrency::threads() > 1 {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(s, chunk)| slice_job(s, chunk));
    } else {
        for (s, chunk) in out.chunks_mut(m * n).enumerate() {
            slice_job(s, chunk);
        }
    }
    out
}

fn transpose_last2_raw<T: Scalar>(data: &[T], shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let (r, c) = (shape[rank - 2], shape[rank - 1]);
    let slabs: usize = shape[..rank - 2].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for s in 0..slabs {
        let base = s * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = data[base + i * c + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(rank - 2, rank - 1);
    (out, out_shape)
}

fn permute_raw<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = vec![T::zero(); data.len()];
    let numel = data.len();
    let mut coords = vec![0usize; rank];
    for (flat, slot) in out.iter_mut().enumerate().take(numel) {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += coords[d] * perm_strides[d];
        }
        *slot = data[src];
    }
    (out, out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, vals).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t64(vec![3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tape.leaf(t64(vec![3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t64(vec![2, 1], &[0., 1.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2., 4.]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(vec![2, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(vec![4, 2]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![3], &[0., 0., 0.]));
        let s = tape.softmax(x, 0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.leaf(t64(vec![2], &[1000., 1000.]));
        let s = tape.softmax(big, 0).unwrap();
        assert!(tape.value(s).is_finite());
        for &v in tape.value(s).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![3], &[1., 2., 3.]));
        let s = tape.softmax(x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in tape.value(s).data().iter().enumerate() {
            let direct = ((j + 1) as f64).exp() / z;
            assert!((v - direct).abs() < 1e-12, "{} vs {}", v, direct);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2, 4], &[0.3, -1.2, 5.0, 2.2, -9.0, 0.0, 1.0, 3.5]));
        let s = tape.softmax(x, 1).unwrap();
        let d = tape.value(s).data();
        for r in 0..2 {
            let sum: f64 = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![4], &[5., 5., 5., 5.]));
        let gamma = tape.leaf(t64(vec![4], &[1., 1., 1., 1.]));
        let beta = tape.leaf(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_scale_invariance() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..8).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
        let doubled: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        let gamma = tape.leaf(Tensor::full(vec![8], 1.0));
        let beta = tape.leaf(Tensor::zeros(vec![8]));
        let x = tape.leaf(t64(vec![8], &vals));
        let x2 = tape.leaf(t64(vec![8], &doubled));
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let y2 = tape.layer_norm(x2, gamma, beta, 1e-6).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(tape.value(y2).data()) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn layer_norm_mean_and_variance_properties() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..16).map(|i| (i as f64 * 1.7).sin() * 3.0 + 1.0).collect();
        let gamma = tape.leaf(Tensor::full(vec![16], 1.0));
        let beta = tape.leaf(Tensor::zeros(vec![16]));
        let x = tape.leaf(t64(vec![16], &vals));
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let d = tape.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 16.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![1], &[0.0]));
        let y = tape.gelu(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_limits() {
        let mut tape = Tape::new();
        // one-hot-perfect logits with large margin -> loss ~ 0
        let logits = tape.leaf(t64(vec![2, 3], &[40., 0., 0., 0., 40., 0.]));
        let loss = tape.cross_entropy(logits, &[0, 1]).unwrap();
        assert!(tape.value(loss).item() < 1e-10);

        // uniform logits -> ln C
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![4, 5]));
        let loss = tape.cross_entropy(logits, &[0, 1, 2, 3]).unwrap();
        assert!((tape.value(loss).item() - (5.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![2, 3]));
        assert!(tape.cross_entropy(logits, &[0, 3]).is_err());
        assert!(tape.cross_entropy(logits, &[0]).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![1], &[3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2], &[1.0, 2.0]).with_grad());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detached_leaf_gets_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2], &[1.0, 2.0])); // requires_grad = false
        let w = tape.leaf(t64(vec![2], &[3.0, 4.0]).with_grad());
        let p = tape.mul(x, w).unwrap();
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn unused_grad_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![1], &[2.0]).with_grad());
        let unused = tape.leaf(t64(vec![3], &[1., 1., 1.]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.leaf(t64(vec![2, 3, 4], &vals));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(p).shape(), &[4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
    }

    #[test]
    fn transpose_last2_matches_manual() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]));
        let xt = tape.transpose(x).unwrap();
        assert_eq!(tape.value(xt).shape(), &[3, 2]);
        assert_eq!(tape.value(xt).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn batch_matmul_slices_independent() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(vec![2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t64(vec![2, 2, 1], &[1., 1., 10., 100.]));
        let y = tape.batch_matmul(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 1]);
        assert_eq!(tape.value(y).data(), &[3., 430.]);
    }

    #[test]
    fn reduce_ops_match_hand_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]));
        let m = tape.reduce_mean(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 5.0]);
        let v = tape.reduce_var(x, 1).unwrap();
        let expect = 2.0 / 3.0;
        for &val in tape.value(v).data() {
            assert!((val - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn prepend_and_select_token() {
        let mut tape = Tape::new();
        let tokens = tape.leaf(t64(vec![2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]));
        let cls = tape.leaf(t64(vec![2], &[-1., -2.]));
        let seq = tape.prepend_token(tokens, cls).unwrap();
        assert_eq!(tape.value(seq).shape(), &[2, 3, 2]);
        let first = tape.select_token(seq, 0).unwrap();
        assert_eq!(tape.value(first).data(), &[-1., -2., -1., -2.]);
        let second = tape.select_token(seq, 1).unwrap();
        assert_eq!(tape.value(second).data(), &[1., 2., 5., 6.]);
        assert!(tape.select_token(seq, 3).is_err());
    }

    #[test]
    fn scale_exact_at_special_constants() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(vec![3], &[0.1, -2.5, 7.0]));
        let x0 = tape.scale(x, 0.0);
        assert_eq!(tape.value(x0).data(), &[0.0, 0.0, 0.0]);
        let x2 = tape.scale(x, 2.0);
        assert_eq!(tape.value(x2).data(), &[0.2, -5.0, 14.0]);
        let x1 = tape.scale(x, 1.0);
        assert_eq!(tape.value(x1).data(), tape.value(x).data());
    }

    #[test]
    fn determinism_same_inputs_bit_identical() {
        let vals: Vec<f64> = (0..64).map(|i| ((i * 31 % 17) as f64 - 8.0) * 0.3).collect();
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(t64(vec![8, 8], &vals));
            let b = tape.leaf(t64(vec![8, 8], &vals));
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax(c, 1).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
