use std::sync::atomic::{AtomicU32, Ordering};

use rayon::prelude::*;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon used by the model.
pub const LN_EPS: f64 = 1e-5;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

/// Source row for [`Tape::embed`]: a token-table row or a soft-prompt row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedRow {
    Token(usize),
    Prompt(usize),
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize, usize),
    CausalMask(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Embed {
        table: usize,
        prompt: Option<usize>,
        rows: Vec<EmbedRow>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<T>,
    },
    Sum(usize),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Define-by-run operation record.
///
/// Nodes are appended in execution order, so every node's inputs precede
/// it. [`Tape::backward`] may run once; afterwards the op records are
/// dropped and leaf gradients stay readable through [`Tape::grad`].
pub struct Tape<T: Real = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(Error::contract("variable does not belong to this tape"));
        }
        Ok(v.idx as usize)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract(
                "tape already consumed by backward; record a new forward pass",
            ));
        }
        let rg = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|&i| self.nodes[i].value.requires_grad()),
        };
        let value = value.with_requires_grad(rg);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx })
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Registers a tensor as a leaf; gradients flow to it if it requires grad.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(self.val(self.index(v)?))
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.val(self.index(v)?).grad())
    }

    pub fn take_grad(&mut self, v: Var) -> Result<Option<Vec<T>>> {
        let i = self.index(v)?;
        Ok(self.nodes[i].value.take_grad())
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(self.val(ia).data(), self.val(ib).data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bt * m * n];
        let (ad, bd) = (self.val(ia).data(), self.val(ib).data());
        out.par_chunks_mut(m * n)
            .enumerate()
            .with_min_len(8)
            .for_each(|(z, c)| {
                gemm_nn(
                    &ad[z * m * k..(z + 1) * m * k],
                    &bd[z * k * n..(z + 1) * k * n],
                    c,
                    m,
                    k,
                    n,
                )
            });
        self.push(
            Tensor::new(vec![bt, m, n], out)?,
            Op::BatchMatMul(ia, ib),
            &[ia, ib],
        )
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<()> {
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape("add", ia, ib)?;
        let out: Vec<T> = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.val(ia).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(ia, ib), &[ia, ib])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape("mul", ia, ib)?;
        let out: Vec<T> = self
            .val(ia)
            .data()
            .iter()
            .zip(self.val(ib).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.val(ia).shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(ia, ib), &[ia, ib])
    }

    /// Adds a vector along the last axis (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.index(x)?, self.index(row)?);
        let (sx, sr) = (self.val(ix).shape(), self.val(ir).shape());
        let n = *sx.last().unwrap();
        if self.val(ir).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sx.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let r = self.val(ir).data();
        let mut out = self.val(ix).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = sx.to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddRow(ix, ir), &[ix, ir])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let ix = self.index(x)?;
        let s = T::of(s);
        let t = self.val(ix).map(|v| v * s);
        self.push(t, Op::Scale(ix, s), &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let t = self.val(ix).clone().with_requires_grad(false);
        let t = Tensor::new(t.shape().to_vec(), t.into_data())?.reshape(shape)?;
        self.push(t, Op::Reshape(ix), &[ix])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let ix = self.index(x)?;
        let shape = self.val(ix).shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::contract(format!(
                "permute: axes {axes:?} are not a permutation of rank {}",
                shape.len()
            )));
        }
        let (out_shape, out) = permute_copy(self.val(ix).data(), shape, axes);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute(ix, axes.to_vec()),
            &[ix],
        )
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.index(x)?;
        let shape = self.val(ix).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.val(ix).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax(ix, axis), &[ix])
    }

    /// Sets entries above the diagonal of the trailing square matrices to -inf.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let shape = self.val(ix).shape().to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::Shape {
                op: "causal_mask",
                lhs: shape.clone(),
                rhs: shape,
            });
        }
        let t = shape[r - 1];
        let mut out = self.val(ix).data().to_vec();
        for mat in out.chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut mat[i * t + i + 1..(i + 1) * t] {
                    *v = T::neg_infinity();
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::CausalMask(ix), &[ix])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gain)?, self.index(bias)?);
        let shape = self.val(ix).shape().to_vec();
        let n = *shape.last().unwrap();
        for (i, op) in [(ig, "layer_norm gain"), (ib, "layer_norm bias")] {
            if self.val(i).numel() != n {
                return Err(Error::Shape {
                    op,
                    lhs: shape.clone(),
                    rhs: self.val(i).shape().to_vec(),
                });
            }
        }
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let (g, b) = (self.val(ig).data(), self.val(ib).data());
        let src = self.val(ix).data();
        let rows = src.len() / n;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                xhat,
                rstd,
            },
            &[ix, ig, ib],
        )
    }

    /// `x·Φ(x)` with the exact normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let t = self.val(ix).map(gelu_scalar);
        self.push(t, Op::Gelu(ix), &[ix])
    }

    /// Row lookup into `table[V×d]`, optionally mixing in rows of `prompt[n×d]`.
    pub fn embed(&mut self, table: Var, prompt: Option<Var>, rows: &[EmbedRow]) -> Result<Var> {
        let it = self.index(table)?;
        let ip = prompt.map(|p| self.index(p)).transpose()?;
        let st = self.val(it).shape();
        if st.len() != 2 {
            return Err(Error::contract(format!(
                "embedding table must be rank 2, got {st:?}"
            )));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(ip) = ip {
            let sp = self.val(ip).shape();
            if sp.len() != 2 || sp[1] != d {
                return Err(Error::Shape {
                    op: "embed prompt",
                    lhs: st.to_vec(),
                    rhs: sp.to_vec(),
                });
            }
        }
        if rows.is_empty() {
            return Err(Error::contract("embedding lookup of zero rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            match r {
                EmbedRow::Token(id) => {
                    if id >= vocab {
                        return Err(Error::Index {
                            what: "token id",
                            index: id,
                            bound: vocab,
                        });
                    }
                    out.extend_from_slice(&self.val(it).data()[id * d..(id + 1) * d]);
                }
                EmbedRow::Prompt(j) => {
                    let ip = ip.ok_or_else(|| {
                        Error::contract("virtual slot present but no prompt embeddings supplied")
                    })?;
                    let n = self.val(ip).shape()[0];
                    if j >= n {
                        return Err(Error::Index {
                            what: "prompt row",
                            index: j,
                            bound: n,
                        });
                    }
                    out.extend_from_slice(&self.val(ip).data()[j * d..(j + 1) * d]);
                }
            }
        }
        let inputs: Vec<usize> = std::iter::once(it).chain(ip).collect();
        self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::Embed {
                table: it,
                prompt: ip,
                rows: rows.to_vec(),
            },
            &inputs,
        )
    }

    /// Mean negative log-likelihood of `targets` under `logits[n×V]`, over
    /// positions where `active` is set. Zero when nothing is active.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let il = self.index(logits)?;
        let shape = self.val(il).shape();
        if shape.len() != 2 || shape[0] != targets.len() || active.len() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![targets.len(), active.len()],
            });
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "target id",
                index: bad,
                bound: v,
            });
        }
        let src = self.val(il).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, (&t, &on)) in targets.iter().zip(active).enumerate() {
            if !on {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let lsm = super::log_softmax_row(row);
            total += -lsm[t];
            for (p, l) in probs[r * v..(r + 1) * v].iter_mut().zip(&lsm) {
                *p = l.exp();
            }
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                active: active.to_vec(),
                probs,
            },
            &[il],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.index(x)?;
        let s = self.val(ix).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(ix), &[ix])
    }

    /// Populates gradients of `loss` on every leaf that requires grad.
    ///
    /// Valid once per tape; the op records are released afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(
                "backward called twice on the same tape without a new forward pass",
            ));
        }
        let il = self.index(loss)?;
        if !self.val(il).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(il).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![T::one()]);
        for i in (0..=il).rev() {
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.set_grad(g)?;
                continue;
            }
            self.adjoint(i, &g, &mut grads);
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad()
    }

    fn adjoint(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let buf = acc_buf(grads, a, m * k);
                    gemm_nt(g, self.val(b).data(), buf, m, n, k);
                }
                if self.wants(b) {
                    let buf = acc_buf(grads, b, k * n);
                    gemm_tn(self.val(a).data(), g, buf, m, k, n);
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.val(a).data(), self.val(b).data());
                if self.wants(a) {
                    let buf = acc_buf(grads, a, bt * m * k);
                    buf.par_chunks_mut(m * k)
                        .enumerate()
                        .with_min_len(8)
                        .for_each(|(z, c)| {
                            gemm_nt(
                                &g[z * m * n..(z + 1) * m * n],
                                &bd[z * k * n..(z + 1) * k * n],
                                c,
                                m,
                                n,
                                k,
                            )
                        });
                }
                if self.wants(b) {
                    let buf = acc_buf(grads, b, bt * k * n);
                    buf.par_chunks_mut(k * n)
                        .enumerate()
                        .with_min_len(8)
                        .for_each(|(z, c)| {
                            gemm_tn(
                                &ad[z * m * k..(z + 1) * m * k],
                                &g[z * m * n..(z + 1) * m * n],
                                c,
                                m,
                                k,
                                n,
                            )
                        });
                }
            }
            &Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(x) {
                        add_into(acc_buf(grads, x, g.len()), g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (x, other) in [(a, b), (b, a)] {
                    if self.wants(x) {
                        let od = self.val(other).data();
                        let buf = acc_buf(grads, x, g.len());
                        for ((d, &gi), &o) in buf.iter_mut().zip(g).zip(od) {
                            *d += gi * o;
                        }
                    }
                }
            }
            &Op::AddRow(x, r) => {
                if self.wants(x) {
                    add_into(acc_buf(grads, x, g.len()), g);
                }
                if self.wants(r) {
                    let n = self.val(r).numel();
                    let buf = acc_buf(grads, r, n);
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if self.wants(x) {
                    let buf = acc_buf(grads, x, g.len());
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += gi * s;
                    }
                }
            }
            &Op::Reshape(x) => {
                if self.wants(x) {
                    add_into(acc_buf(grads, x, g.len()), g);
                }
            }
            Op::Permute(x, axes) => {
                if self.wants(*x) {
                    let mut inv = vec![0; axes.len()];
                    for (o, &a) in axes.iter().enumerate() {
                        inv[a] = o;
                    }
                    let (_, back) = permute_copy(g, node.value.shape(), &inv);
                    add_into(acc_buf(grads, *x, g.len()), &back);
                }
            }
            &Op::Softmax(x, axis) => {
                if self.wants(x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), axis);
                    let buf = acc_buf(grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut s = T::zero();
                            for j in 0..len {
                                s += g[at(j)] * y[at(j)];
                            }
                            for j in 0..len {
                                buf[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            &Op::CausalMask(x) => {
                if self.wants(x) {
                    let t = *node.value.shape().last().unwrap();
                    let buf = acc_buf(grads, x, g.len());
                    for (bm, gm) in buf.chunks_mut(t * t).zip(g.chunks(t * t)) {
                        for i in 0..t {
                            for j in 0..=i {
                                bm[i * t + j] += gm[i * t + j];
                            }
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
            } => {
                let n = self.val(*gain).numel();
                let gd = self.val(*gain).data();
                let nf = T::of(n as f64);
                if self.wants(*x) {
                    let buf = acc_buf(grads, *x, g.len());
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dh_h = mean_dh_h / nf;
                        for j in 0..n {
                            let dh = gr[j] * gd[j];
                            buf[r * n + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if self.wants(*gain) {
                    let buf = acc_buf(grads, *gain, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let buf = acc_buf(grads, *bias, n);
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.wants(x) {
                    let xd = self.val(x).data();
                    let buf = acc_buf(grads, x, g.len());
                    for ((d, &gi), &xi) in buf.iter_mut().zip(g).zip(xd) {
                        *d += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Embed {
                table,
                prompt,
                rows,
            } => {
                let d = self.val(*table).shape()[1];
                if self.wants(*table) {
                    let n = self.val(*table).numel();
                    let buf = acc_buf(grads, *table, n);
                    for (r, row) in rows.iter().enumerate() {
                        if let EmbedRow::Token(id) = *row {
                            add_into(&mut buf[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                        }
                    }
                }
                if let Some(p) = *prompt {
                    if self.wants(p) {
                        let n = self.val(p).numel();
                        let buf = acc_buf(grads, p, n);
                        for (r, row) in rows.iter().enumerate() {
                            if let EmbedRow::Prompt(j) = *row {
                                add_into(&mut buf[j * d..(j + 1) * d], &g[r * d..(r + 1) * d]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
            } => {
                if self.wants(*logits) {
                    let count = active.iter().filter(|&&a| a).count();
                    if count == 0 {
                        acc_buf(grads, *logits, probs.len());
                        return;
                    }
                    let v = self.val(*logits).shape()[1];
                    let w = g[0] / T::of(count as f64);
                    let buf = acc_buf(grads, *logits, probs.len());
                    for (r, (&t, &on)) in targets.iter().zip(active).enumerate() {
                        if !on {
                            continue;
                        }
                        let pr = &probs[r * v..(r + 1) * v];
                        let br = &mut buf[r * v..(r + 1) * v];
                        for (j, (b, &p)) in br.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *b += w * (p - onehot);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if self.wants(x) {
                    let n = self.val(x).numel();
                    let buf = acc_buf(grads, x, n);
                    for d in buf.iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn acc_buf<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, n: usize) -> &mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_copy<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        in_strides[a] = in_strides[a + 1] * shape[a + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            offset += strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            offset -= strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_scalar<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

fn normal_cdf<T: Real>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    normal_cdf(x) + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let b = tape.constant(t(&[2, 2], &[5., 6., 7., 8.])).unwrap();
        let ia = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(ia).unwrap().data(), &[1., 2., 3., 4.]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[0., 0.])).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[2f64.ln(), 0.])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).unwrap().data();
        assert!((d[0] - 2. / 3.).abs() < 1e-15 && (d[1] - 1. / 3.).abs() < 1e-15);

        let x = tape.constant(t(&[2], &[1000., 0.])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).unwrap().data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.).abs() < 1e-12 && d[1] < 1e-300);
    }

    #[test]
    fn softmax_bad_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(tape.softmax(x, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let one = tape.constant(t(&[2], &[1., 1.])).unwrap();
        let zero = tape.constant(t(&[2], &[0., 0.])).unwrap();

        let c = tape.constant(t(&[1, 2], &[3., 3.])).unwrap();
        let y = tape.layer_norm(c, one, zero, LN_EPS).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0., 0.]);

        let x = tape.constant(t(&[1, 2], &[1., 3.])).unwrap();
        let y = tape.layer_norm(x, one, zero, 1e-12).unwrap();
        let d = tape.value(y).unwrap().data();
        assert!((d[0] + 1.).abs() < 1e-9 && (d[1] - 1.).abs() < 1e-9);

        let g0 = tape.constant(t(&[2], &[0., 0.])).unwrap();
        let b = tape.constant(t(&[2], &[0.7, 0.7])).unwrap();
        let y = tape.layer_norm(x, g0, b, LN_EPS).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.7, 0.7]);
    }

    #[test]
    fn gelu_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0., 1., 10.])).unwrap();
        let y = tape.gelu(x).unwrap();
        let d = tape.value(y).unwrap().data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 0.841_344_746).abs() < 1e-6);
        assert!((d[2] - 10.).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        let l = tape.cross_entropy(z, &[2], &[true]).unwrap();
        assert!((tape.value(l).unwrap().item() - 4f64.ln()).abs() < 1e-15);

        let dom = tape.constant(t(&[1, 3], &[0., 1e6, 0.])).unwrap();
        let l = tape.cross_entropy(dom, &[1], &[true]).unwrap();
        assert!(tape.value(l).unwrap().item().abs() < 1e-12);

        // second row masked; first row: -log softmax([1,2,0])[0]
        let two = tape.constant(t(&[2, 3], &[1., 2., 0., 5., -5., 9.])).unwrap();
        let l = tape.cross_entropy(two, &[0, 1], &[true, false]).unwrap();
        let expect = -(1f64 - (1f64.exp() + 2f64.exp() + 1.0).ln());
        assert!((tape.value(l).unwrap().item() - expect).abs() < 1e-14);

        assert!(matches!(
            tape.cross_entropy(z, &[4], &[true]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn backward_bilinear_and_double_call() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1., 2., 3.])).unwrap();
        let y = tape.constant(t(&[3], &[4., 5., 6.])).unwrap();
        let p = tape.mul(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap(), &[4., 5., 6.]);
        assert!(tape.grad(y).unwrap().is_none());
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let mut other = Tape::<f64>::new();
        let z = other.param(Tensor::scalar(1.0)).unwrap();
        assert!(tape.backward(z).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 4], &data)).unwrap();
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y).unwrap(), &[4, 2, 3]);
        // y[k][i][j] = x[i][j][k]
        assert_eq!(tape.value(y).unwrap().data()[1 * 6 + 1 * 3 + 2], data[12 + 2 * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).unwrap().data(), &data[..]);
    }

    #[test]
    fn causal_mask_hides_future() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        let m = tape.causal_mask(x).unwrap();
        let s = tape.softmax(m, 1).unwrap();
        let d = tape.value(s).unwrap().data();
        assert_eq!(&d[..3], &[1., 0., 0.]);
        assert_eq!(&d[3..6], &[0.5, 0.5, 0.]);
    }
}
