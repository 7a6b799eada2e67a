//! Reverse-mode gradient tape.
//!
//! A [`Graph`] records every operation applied to its variables together
//! with whatever forward state the adjoint needs (pooling argmax, softmax
//! probabilities). Nodes are only differentiated when some ancestor was
//! registered with [`Graph::variable`]; constants (frozen parameters during
//! an attack, fixed inputs during training) never receive gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{self, col2im, gemm, im2col, ConvGeometry, Result, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Relu(usize),
    Scale(usize, f32),
    Reshape(usize),
    Sum(usize),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geom: ConvGeometry,
    },
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    /// `[B, 1] -> [B, 2]` with an implicit zero logit in column 0.
    BinaryLogits(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    KlDivergence {
        p_logits: usize,
        q_logits: usize,
        p_probs: Vec<f32>,
        q_probs: Vec<f32>,
        log_ratio: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Registers a tensor that gradients are taken with respect to.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.index].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, var: Var) -> Result<usize> {
        if var.graph != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(var.index)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, value: Tensor, op: Op, parent: usize) -> Var {
        let rg = self.needs(&[parent]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(v, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.sub(&self.nodes[ib].value)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(v, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.mul(&self.nodes[ib].value)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(v, Op::Mul(ia, ib), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(v, Op::MatMul(ia, ib), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let x = &self.nodes[ia].value;
        let b = &self.nodes[ib].value;
        let (_, n) = tensor::dims2("add_bias", x)?;
        if b.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[ia, ib]);
        Ok(self.push(v, Op::AddBias(ia, ib), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.relu();
        Ok(self.unary(v, Op::Relu(ia), ia))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| x * factor);
        Ok(self.unary(v, Op::Scale(ia, factor), ia))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(ia), ia))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s: f32 = self.nodes[ia].value.data().iter().sum();
        Ok(self.unary(Tensor::scalar(s), Op::Sum(ia), ia))
    }

    /// Valid 2-D convolution, stride 1, NCHW input and OIHW weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ii, iw, ib) = (self.idx(input)?, self.idx(weight)?, self.idx(bias)?);
        let geom = ConvGeometry::new(&self.nodes[ii].value, &self.nodes[iw].value, &self.nodes[ib].value)?;
        let v = tensor::conv2d_forward(
            &geom,
            self.nodes[ii].value.data(),
            self.nodes[iw].value.data(),
            self.nodes[ib].value.data(),
        );
        let rg = self.needs(&[ii, iw, ib]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input: ii,
                weight: iw,
                bias: ib,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let (v, argmax) = tensor::maxpool2_forward(&self.nodes[ii].value)?;
        Ok(self.unary(v, Op::MaxPool2 { input: ii, argmax }, ii))
    }

    /// Lifts single-logit outputs `[B, 1]` to two-class logits `(0, z)`.
    pub fn binary_logits(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let (b, k) = tensor::dims2("binary_logits", x)?;
        if k != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "binary_logits",
                left: x.shape().to_vec(),
                right: vec![b, 1],
            });
        }
        let data = x.data().iter().flat_map(|&z| [0.0, z]).collect();
        let v = Tensor::new(vec![b, 2], data)?;
        Ok(self.unary(v, Op::BinaryLogits(ia), ia))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let x = &self.nodes[il].value;
        let (b, k) = tensor::dims2("cross_entropy", x)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut total = 0.0f64;
        for (row, &label) in x.data().chunks(k).zip(labels) {
            let (log_probs, p) = log_softmax_row(row);
            total -= log_probs[label] as f64;
            probs.extend(p);
        }
        let v = Tensor::scalar((total / b as f64) as f32);
        Ok(self.unary(
            v,
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            il,
        ))
    }

    /// Mean over the batch of `KL(softmax(p) || softmax(q))`.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (ip, iq) = (self.idx(p_logits)?, self.idx(q_logits)?);
        let p = &self.nodes[ip].value;
        let q = &self.nodes[iq].value;
        if p.shape() != q.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "kl_divergence",
                left: p.shape().to_vec(),
                right: q.shape().to_vec(),
            });
        }
        let (b, k) = tensor::dims2("kl_divergence", p)?;
        let mut p_probs = Vec::with_capacity(b * k);
        let mut q_probs = Vec::with_capacity(b * k);
        let mut log_ratio = Vec::with_capacity(b * k);
        let mut total = 0.0f64;
        for (prow, qrow) in p.data().chunks(k).zip(q.data().chunks(k)) {
            let (lp, pp) = log_softmax_row(prow);
            let (lq, qp) = log_softmax_row(qrow);
            for j in 0..k {
                let r = lp[j] - lq[j];
                total += (pp[j] * r) as f64;
                log_ratio.push(r);
            }
            p_probs.extend(pp);
            q_probs.extend(qp);
        }
        let v = Tensor::scalar((total / b as f64) as f32);
        let rg = self.needs(&[ip, iq]);
        Ok(self.push(
            v,
            Op::KlDivergence {
                p_logits: ip,
                q_logits: iq,
                p_probs,
                q_probs,
                log_ratio,
            },
            rg,
        ))
    }

    /// Gradients of a `[1]`-shaped output with respect to each of `wrt`.
    /// Variables that do not influence the output get zero gradients.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out = self.idx(output)?;
        if self.nodes[out].value.shape() != [1] {
            return Err(TensorError::NotScalar(self.nodes[out].value.shape().to_vec()));
        }
        let targets = wrt.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; out + 1];
        grads[out] = Some(vec![1.0]);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(targets
            .into_iter()
            .map(|t| {
                let shape = self.nodes[t].value.shape().to_vec();
                match grads.get_mut(t).and_then(Option::take) {
                    Some(data) => Tensor::new(shape, data).expect("gradient matches value shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if wants(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if wants(*a) {
                    let buf = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, vb.data(), true, buf, 1.0);
                }
                if wants(*b) {
                    let buf = slot(grads, *b, k * n);
                    gemm(k, m, n, va.data(), true, g, false, buf, 1.0);
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if wants(*b) {
                    let n = self.nodes[*b].value.numel();
                    let buf = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        for (d, s) in buf.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                accumulate(grads, *a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }));
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.iter().map(|v| v * f)),
            Op::Reshape(a) => accumulate(grads, *a, g.iter().copied()),
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                accumulate(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => self.conv_backward(*input, *weight, *bias, geom, g, grads),
            Op::MaxPool2 { input, argmax } => {
                let n = self.nodes[*input].value.numel();
                let buf = slot(grads, *input, n);
                for (&src, &gv) in argmax.iter().zip(g) {
                    buf[src] += gv;
                }
            }
            Op::BinaryLogits(a) => {
                accumulate(grads, *a, g.chunks(2).map(|pair| pair[1]));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.nodes[*logits].value.shape()[1];
                let scale = g[0] / labels.len() as f32;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, d.into_iter());
            }
            Op::KlDivergence {
                p_logits,
                q_logits,
                p_probs,
                q_probs,
                log_ratio,
            } => {
                let k = self.nodes[*p_logits].value.shape()[1];
                let b = p_probs.len() / k;
                let scale = g[0] / b as f32;
                if wants(*p_logits) {
                    // d/dz_p: p_j (r_j - sum_i p_i r_i)
                    let mut d = Vec::with_capacity(p_probs.len());
                    for (prow, rrow) in p_probs.chunks(k).zip(log_ratio.chunks(k)) {
                        let mean: f32 = prow.iter().zip(rrow).map(|(p, r)| p * r).sum();
                        d.extend(prow.iter().zip(rrow).map(|(p, r)| scale * p * (r - mean)));
                    }
                    accumulate(grads, *p_logits, d.into_iter());
                }
                if wants(*q_logits) {
                    accumulate(
                        grads,
                        *q_logits,
                        q_probs.iter().zip(p_probs).map(|(q, p)| scale * (q - p)),
                    );
                }
            }
        }
    }

    fn conv_backward(
        &self,
        input: usize,
        weight: usize,
        bias: usize,
        geom: &ConvGeometry,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let pixels = geom.out_pixels();
        let out_len = geom.out_channels * pixels;
        let patch = geom.patch_len();
        if self.nodes[bias].requires_grad {
            let buf = slot(grads, bias, geom.out_channels);
            for n in 0..geom.batch {
                for (o, chunk) in g[n * out_len..(n + 1) * out_len].chunks(pixels).enumerate() {
                    buf[o] += chunk.iter().sum::<f32>();
                }
            }
        }
        let want_w = self.nodes[weight].requires_grad;
        let want_x = self.nodes[input].requires_grad;
        if !want_w && !want_x {
            return;
        }
        let x = self.nodes[input].value.data();
        let w = self.nodes[weight].value.data();
        let mut col = vec![0.0; patch * pixels];
        let mut dw = if want_w { vec![0.0; geom.out_channels * patch] } else { Vec::new() };
        let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
        for n in 0..geom.batch {
            let gn = &g[n * out_len..(n + 1) * out_len];
            if want_w {
                im2col(geom, &x[n * geom.input_len()..(n + 1) * geom.input_len()], &mut col);
                gemm(geom.out_channels, pixels, patch, gn, false, &col, true, &mut dw, 1.0);
            }
            if want_x {
                gemm(patch, geom.out_channels, pixels, w, true, gn, false, &mut col, 0.0);
                col2im(geom, &col, &mut dx[n * geom.input_len()..(n + 1) * geom.input_len()]);
            }
        }
        if want_w {
            accumulate(grads, weight, dw.into_iter());
        }
        if want_x {
            accumulate(grads, input, dx.into_iter());
        }
    }
}

fn slot(grads: &mut [Option<Vec<f32>>], index: usize, len: usize) -> &mut [f32] {
    grads[index].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f32>>], index: usize, values: impl Iterator<Item = f32>) {
    match &mut grads[index] {
        Some(buf) => buf.iter_mut().zip(values).for_each(|(d, v)| *d += v),
        slot @ None => *slot = Some(values.collect()),
    }
}

/// Log-softmax of one row plus the matching probabilities, computed in
/// `f64` with max-shift stabilization.
pub(crate) fn log_softmax_row(row: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = row.iter().map(|&v| v as f64 - lse).collect();
    (
        log_probs.iter().map(|&v| v as f32).collect(),
        log_probs.iter().map(|&v| v.exp() as f32).collect(),
    )
}
