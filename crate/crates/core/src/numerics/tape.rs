//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products into a [`Gradients`] table.

use super::kernels::{self, gemm, View};
use super::{NumericsError, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<T>,
    },
    AssembleTokens {
        embedded: Var,
        class_token: Var,
        pos: Var,
        batch: usize,
    },
    ClassRows {
        x: Var,
        batch: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SumSquares(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Values are immutable once recorded.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn take_or_zeros(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn dim_err(op: &str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::Dimension(format!("{op}: incompatible shapes {shapes:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", &[ta.shape(), tb.shape()]));
        }
        let mut out = ta.clone();
        out.add_assign(tb)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var, NumericsError> {
        let (out, cache) = kernels::layer_norm_with_cache(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: cache.xhat,
            inv_std: cache.inv_std,
        };
        Ok(self.push(out, op, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let axis = t.ndim().saturating_sub(1);
        let out = if t.ndim() == 0 {
            Tensor::scalar(T::one())
        } else {
            kernels::softmax(t, axis).expect("last axis is always valid")
        };
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch·seq, dim]` with the samples stacked along rows;
    /// each head attends within its own sample over a `dim / heads` slice.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (rows, dim) = self.value(q).dims2()?;
        for t in [k, v] {
            if self.value(t).shape() != [rows, dim] {
                return Err(dim_err(
                    "attention",
                    &[self.value(q).shape(), self.value(t).shape()],
                ));
            }
        }
        if batch == 0 || rows % batch != 0 || heads == 0 || dim % heads != 0 {
            return Err(NumericsError::Dimension(format!(
                "attention: {rows} rows × {dim} cols cannot split into {batch} samples and {heads} heads"
            )));
        }
        let seq = rows / batch;
        let dh = dim / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * dim];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * dim + h * dh;
                let head_view = View::block(off, seq, dh, dim);
                let p_off = (b * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                gemm(
                    scale,
                    qd,
                    head_view,
                    kd,
                    head_view.t(),
                    T::zero(),
                    p,
                    View::dense(seq, seq),
                );
                for row in p.chunks_mut(seq) {
                    kernels::softmax_row(row);
                }
                gemm(
                    T::one(),
                    p,
                    View::dense(seq, seq),
                    vd,
                    head_view,
                    T::zero(),
                    &mut out,
                    head_view,
                );
            }
        }
        let out = Tensor::from_parts(vec![rows, dim], out);
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            heads,
            probs,
        };
        Ok(self.push(out, op, &[q, k, v]))
    }

    /// Attention probabilities `[batch, heads, seq, seq]` recorded by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<(&[T], usize, usize)> {
        match &self.nodes[node.0].op {
            Op::Attention {
                probs,
                batch,
                heads,
                ..
            } => Some((probs, *batch, *heads)),
            _ => None,
        }
    }

    /// Prepends the class token to every sample's embedded patches and adds
    /// positional encodings: `[batch·n, d] → [batch·(n+1), d]`.
    pub fn assemble_tokens(
        &mut self,
        embedded: Var,
        class_token: Var,
        pos: Var,
        batch: usize,
    ) -> Result<Var, NumericsError> {
        let (e, c, p) = (
            self.value(embedded),
            self.value(class_token),
            self.value(pos),
        );
        let (rows, d) = e.dims2()?;
        let (seq, pd) = p.dims2()?;
        if batch == 0 || rows % batch != 0 || rows / batch + 1 != seq || pd != d || c.shape() != [d]
        {
            return Err(NumericsError::Dimension(format!(
                "token assembly: patches {:?} for {batch} samples, class token {:?}, positions {:?}",
                e.shape(),
                c.shape(),
                p.shape()
            )));
        }
        let mut out = vec![T::zero(); batch * seq * d];
        for b in 0..batch {
            for t in 0..seq {
                let dst = &mut out[(b * seq + t) * d..(b * seq + t + 1) * d];
                let src = if t == 0 {
                    c.data()
                } else {
                    e.row(b * (seq - 1) + t - 1)
                };
                for ((o, &s), &pe) in dst.iter_mut().zip(src).zip(p.row(t)) {
                    *o = s + pe;
                }
            }
        }
        let out = Tensor::from_parts(vec![batch * seq, d], out);
        let op = Op::AssembleTokens {
            embedded,
            class_token,
            pos,
            batch,
        };
        Ok(self.push(out, op, &[embedded, class_token, pos]))
    }

    /// Row 0 of every sample: `[batch·seq, d] → [batch, d]`.
    pub fn class_rows(&mut self, x: Var, batch: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (rows, d) = t.dims2()?;
        if batch == 0 || rows % batch != 0 {
            return Err(NumericsError::Dimension(format!(
                "class rows: {rows} rows for {batch} samples"
            )));
        }
        let seq = rows / batch;
        let mut out = Vec::with_capacity(batch * d);
        for b in 0..batch {
            out.extend_from_slice(t.row(b * seq));
        }
        let out = Tensor::from_parts(vec![batch, d], out);
        Ok(self.push(out, Op::ClassRows { x, batch }, &[x]))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let dims = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<Vec<_>, _>>()?;
        let rows = dims.first().map(|d| d.0).unwrap_or(0);
        if parts.is_empty() || dims.iter().any(|d| d.0 != rows) {
            return Err(NumericsError::Dimension(format!(
                "concat: part shapes {dims:?}"
            )));
        }
        let width: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![rows, width], out);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean cross-entropy over the batch; the result is a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let (loss, probs) = kernels::cross_entropy_with_probs(self.value(logits), labels)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(NumericsError::Validation(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(out.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NumericsError> {
        let mut send = |v: Var, t: Tensor<T>| -> Result<(), NumericsError> {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.dims2()?.1;
                if self.wants(*a) {
                    send(*a, matmul_nt(g.data(), tb.data(), m, n, k))?;
                }
                if self.wants(*b) {
                    send(*b, matmul_tn(ta.data(), g.data(), m, k, n))?;
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (din, dout) = tw.dims2()?;
                let rows = tx.rows();
                if self.wants(*x) {
                    let gx = matmul_nt(g.data(), tw.data(), rows, dout, din);
                    send(*x, Tensor::from_parts(tx.shape().to_vec(), gx.into_data()))?;
                }
                if self.wants(*w) {
                    send(*w, matmul_tn(tx.data(), g.data(), rows, din, dout))?;
                }
                if self.wants(*b) {
                    send(*b, col_sums(g.data(), dout))?;
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    send(*a, g.clone())?;
                }
                if self.wants(*b) {
                    send(*b, g.clone())?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.wants(*x) {
                    let dn = T::lit(d as f64);
                    let mut gx = vec![T::zero(); g.len()];
                    let mut dxhat = vec![T::zero(); d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let base = r * d;
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..d {
                            dxhat[j] = g.data()[base + j] * gam[j];
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[base + j];
                        }
                        mean_dxhat = mean_dxhat / dn;
                        mean_dxhat_xhat = mean_dxhat_xhat / dn;
                        for j in 0..d {
                            gx[base + j] =
                                is * (dxhat[j] - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
                        }
                    }
                    send(*x, Tensor::from_parts(g.shape().to_vec(), gx))?;
                }
                if self.wants(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (gi, hi) in g.data().chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gi[j] * hi[j];
                        }
                    }
                    send(*gamma, Tensor::from_parts(vec![d], gg))?;
                }
                if self.wants(*beta) {
                    send(*beta, col_sums(g.data(), d))?;
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let gx = tx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * kernels::gelu_grad_scalar(xv))
                    .collect();
                send(*x, Tensor::from_parts(tx.shape().to_vec(), gx))?;
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.len()];
                for ((gxr, yr), gr) in gx
                    .chunks_mut(d)
                    .zip(y.data().chunks(d))
                    .zip(g.data().chunks(d))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, Tensor::from_parts(y.shape().to_vec(), gx))?;
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *batch, *heads, probs, g);
                if self.wants(*q) {
                    send(*q, gq)?;
                }
                if self.wants(*k) {
                    send(*k, gk)?;
                }
                if self.wants(*v) {
                    send(*v, gv)?;
                }
            }
            Op::AssembleTokens {
                embedded,
                class_token,
                pos,
                batch,
            } => {
                let (rows, d) = g.dims2()?;
                let seq = rows / batch;
                if self.wants(*embedded) {
                    let mut ge = Vec::with_capacity(batch * (seq - 1) * d);
                    for b in 0..*batch {
                        ge.extend_from_slice(&g.data()[(b * seq + 1) * d..(b + 1) * seq * d]);
                    }
                    send(
                        *embedded,
                        Tensor::from_parts(vec![batch * (seq - 1), d], ge),
                    )?;
                }
                if self.wants(*class_token) {
                    let mut gc = vec![T::zero(); d];
                    for b in 0..*batch {
                        for (a, &x) in gc.iter_mut().zip(g.row(b * seq)) {
                            *a += x;
                        }
                    }
                    send(*class_token, Tensor::from_parts(vec![d], gc))?;
                }
                if self.wants(*pos) {
                    let mut gp = vec![T::zero(); seq * d];
                    for chunk in g.data().chunks(seq * d) {
                        for (a, &x) in gp.iter_mut().zip(chunk) {
                            *a += x;
                        }
                    }
                    send(*pos, Tensor::from_parts(vec![seq, d], gp))?;
                }
            }
            Op::ClassRows { x, batch } => {
                let tx = self.value(*x);
                let (rows, d) = tx.dims2()?;
                let seq = rows / batch;
                let mut gx = vec![T::zero(); rows * d];
                for b in 0..*batch {
                    gx[b * seq * d..(b * seq + 1) * d].copy_from_slice(g.row(b));
                }
                send(*x, Tensor::from_parts(vec![rows, d], gx))?;
            }
            Op::ConcatCols(parts) => {
                let (rows, width) = g.dims2()?;
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(
                                &g.data()[r * width + start..r * width + start + w],
                            );
                        }
                        send(p, Tensor::from_parts(vec![rows, w], gp))?;
                    }
                    start += w;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (batch, classes) = self.value(*logits).dims2()?;
                let scale = g.item()? / T::lit(batch as f64);
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * classes + l] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                send(*logits, Tensor::from_parts(vec![batch, classes], gl))?;
            }
            Op::SumSquares(x) => {
                let s = g.item()? * T::lit(2.0);
                send(*x, self.value(*x).map(|v| v * s))?;
            }
            Op::Sum(x) => {
                let s = g.item()?;
                send(*x, Tensor::full(self.value(*x).shape(), s))?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let (rows, dim) = (g.rows(), g.last_dim());
        let seq = rows / batch;
        let dh = dim / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut gq = vec![T::zero(); rows * dim];
        let mut gk = vec![T::zero(); rows * dim];
        let mut gv = vec![T::zero(); rows * dim];
        let mut dp = vec![T::zero(); seq * seq];
        let sq = View::dense(seq, seq);
        for b in 0..batch {
            for h in 0..heads {
                let hv = View::block(b * seq * dim + h * dh, seq, dh, dim);
                let p_off = (b * heads + h) * seq * seq;
                let p = &probs[p_off..p_off + seq * seq];
                // dV = Pᵀ dO
                gemm(T::one(), p, sq.t(), g.data(), hv, T::zero(), &mut gv, hv);
                // dP = dO Vᵀ
                gemm(T::one(), g.data(), hv, vd, hv.t(), T::zero(), &mut dp, sq);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for (dr, pr) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                gemm(T::one(), &dp, sq, kd, hv, T::zero(), &mut gq, hv);
                gemm(T::one(), &dp, sq.t(), qd, hv, T::zero(), &mut gk, hv);
            }
        }
        let shape = vec![rows, dim];
        (
            Tensor::from_parts(shape.clone(), gq),
            Tensor::from_parts(shape.clone(), gk),
            Tensor::from_parts(shape, gv),
        )
    }
}

/// `a [m×n] · bᵀ` where `b` is `[k×n]`.
fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); m * k];
    gemm(
        T::one(),
        a,
        View::dense(m, n),
        b,
        View::dense(k, n).t(),
        T::zero(),
        &mut out,
        View::dense(m, k),
    );
    Tensor::from_parts(vec![m, k], out)
}

/// `aᵀ · b` where `a` is `[m×k]` and `b` is `[m×n]`.
fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); k * n];
    gemm(
        T::one(),
        a,
        View::dense(m, k).t(),
        b,
        View::dense(m, n),
        T::zero(),
        &mut out,
        View::dense(k, n),
    );
    Tensor::from_parts(vec![k, n], out)
}

fn col_sums<T: Real>(data: &[T], cols: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); cols];
    for row in data.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::from_parts(vec![cols], out)
}
