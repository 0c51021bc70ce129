//! Reverse-mode automatic differentiation over a recorded forward pass.
//!
//! A [`Tape`] owns every intermediate tensor a forward computation produced
//! together with enough bookkeeping to replay the chain rule backwards.
//! Operations return [`Var`] handles; inputs of an operation always precede
//! its output on the tape, so a single reverse sweep visits nodes in a valid
//! order.  Gradient accumulation follows tape order and is therefore
//! deterministic.

use rand::Rng;

use crate::error::{Error, Result};

use super::kernels;
use super::scalar::{cast, Scalar};
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Matmul(usize, usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        /// Per row: mean and reciprocal standard deviation.
        stats: Vec<(S, S)>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        /// Saved softmax output, `heads * n_q * n_k` values.
        probs: Vec<S>,
    },
    SlotPairs {
        states: usize,
        left: usize,
        right: usize,
    },
    SumAll(usize),
    Dropout {
        x: usize,
        keep: Vec<bool>,
        inv_keep: S,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Attention { .. } => "attention",
            Op::SlotPairs { .. } => "slot_pairs",
            Op::SumAll(..) => "sum_all",
            Op::Dropout { .. } => "dropout",
        }
    }
}

/// Records a forward pass and differentiates it in reverse.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    /// Tape index and external parameter slot of every parameter leaf.
    param_leaves: Vec<(usize, usize)>,
    backward_fault: Option<S>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leaves: Vec::new(),
            backward_fault: None,
        }
    }

    /// Multiplies every matmul input-gradient by `scale` during backward.
    ///
    /// This exists to prove the gradient checker catches broken backward
    /// rules; it has no other use.
    pub fn inject_backward_fault(&mut self, scale: f64) {
        self.backward_fault = Some(cast(scale));
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a copy of a parameter tensor, remembering which external
    /// slot its gradient belongs to.
    pub fn param(&mut self, value: &Tensor<S>, slot: usize) -> Var {
        let var = self.push(value.clone(), Op::Leaf);
        self.param_leaves.push((var.0, slot));
        var
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    /// Gradient of the last `backward` root with respect to `var`, if the
    /// sweep reached it.
    pub fn grad(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Parameter slots paired with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[S])> + '_ {
        self.param_leaves
            .iter()
            .filter_map(move |&(node, slot)| self.grads[node].as_deref().map(|g| (slot, g)))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Errors if any recorded value is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(Error::NonFinite(format!(
                    "{context}: node {i} ({})",
                    node.op.name()
                )));
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a.0, b.0)))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.rows()?;
        if tb.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (y, &b) in row.iter_mut().zip(tb.data()) {
                *y = *y + b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x.0, bias.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(value, Op::Scale(x.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, ka) = ta.dims2()?;
        let (kb, n) = tb.dims2()?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(&mut out, ta.data(), tb.data(), m, ka, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::Matmul(a.0, b.0)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(value, Op::Relu(x.0))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.rows()?;
        if cols == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            softmax_row(row);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x.0)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.rows()?;
        if cols == 0 {
            return Err(Error::Contract("log_softmax over an empty axis".into()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter() {
                sum = sum + (*v - max).exp();
            }
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmax(x.0)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (_, cols) = tx.rows()?;
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let eps = cast::<S>(eps);
        let inv_cols = cast::<S>(1.0 / cols as f64);
        let mut data = tx.data().to_vec();
        let mut stats = Vec::with_capacity(data.len() / cols);
        let g = tg.data().to_vec();
        let b = tb.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let mean = row.iter().cloned().sum::<S>() * inv_cols;
            let mut var = S::zero();
            for v in row.iter() {
                let d = *v - mean;
                var = var + d * d;
            }
            var = var * inv_cols;
            let inv_std = (var + eps).sqrt().recip();
            stats.push((mean, inv_std));
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[j] * ((*v - mean) * inv_std) + b[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
        ))
    }

    /// Looks up rows of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "gather id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(&tt.data()[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[n_q, d]`, `[n_k, d]`, `[n_k, d]` with `d` divisible
    /// by `heads`.  Keys whose `key_pad` entry is true are masked out before
    /// the softmax.  There is no causal mask anywhere in this model: the
    /// decoder attends to its whole canvas.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_pad: Option<&[bool]>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (n_q, d) = tq.dims2()?;
        let (n_k, dk) = tk.dims2()?;
        let (n_v, dv) = tv.dims2()?;
        if dk != d || dv != d || n_v != n_k {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        if let Some(mask) = key_pad {
            if mask.len() != n_k {
                return Err(Error::Contract(format!(
                    "key padding mask length {} does not match {n_k} keys",
                    mask.len()
                )));
            }
        }
        let dh = d / heads;
        let scale = cast::<S>(1.0 / (dh as f64).sqrt());
        let neg_big = cast::<S>(-1e30);

        let mut out = vec![S::zero(); n_q * d];
        let mut probs = vec![S::zero(); heads * n_q * n_k];
        let mut qh = vec![S::zero(); n_q * dh];
        let mut kh = vec![S::zero(); n_k * dh];
        let mut vh = vec![S::zero(); n_k * dh];
        let mut ctx = vec![S::zero(); n_q * dh];

        for h in 0..heads {
            let off = h * dh;
            gather_head(&mut qh, tq.data(), d, off, dh);
            gather_head(&mut kh, tk.data(), d, off, dh);
            gather_head(&mut vh, tv.data(), d, off, dh);

            let scores = &mut probs[h * n_q * n_k..(h + 1) * n_q * n_k];
            kernels::matmul_nt(scores, &qh, &kh, n_q, dh, n_k);
            for s in scores.iter_mut() {
                *s = *s * scale;
            }
            if let Some(mask) = key_pad {
                for row in scores.chunks_exact_mut(n_k) {
                    for (s, &pad) in row.iter_mut().zip(mask) {
                        if pad {
                            *s = neg_big;
                        }
                    }
                }
            }
            for row in scores.chunks_exact_mut(n_k) {
                softmax_row(row);
            }

            ctx.fill(S::zero());
            kernels::matmul(&mut ctx, scores, &vh, n_q, n_k, dh);
            scatter_head(&mut out, &ctx, d, off, dh);
        }

        let value = Tensor::matrix(n_q, d, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
        ))
    }

    /// Builds slot representations from decoder states.
    ///
    /// For `n` states of width `d` this returns `n + 1` rows of width `2d`;
    /// row `i` concatenates the state left of slot `i` and the state right of
    /// it.  `left` and `right` are learned boundary vectors standing in for
    /// the missing neighbors of the outermost slots.
    pub fn slot_pairs(&mut self, states: Var, left: Var, right: Var) -> Result<Var> {
        let (ts, tl, tr) = (self.value(states), self.value(left), self.value(right));
        let (n, d) = ts.dims2()?;
        if tl.shape() != [d] || tr.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "slot_pairs",
                lhs: ts.shape().to_vec(),
                rhs: tl.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity((n + 1) * 2 * d);
        for i in 0..=n {
            if i == 0 {
                data.extend_from_slice(tl.data());
            } else {
                data.extend_from_slice(&ts.data()[(i - 1) * d..i * d]);
            }
            if i == n {
                data.extend_from_slice(tr.data());
            } else {
                data.extend_from_slice(&ts.data()[i * d..(i + 1) * d]);
            }
        }
        let value = Tensor::matrix(n + 1, 2 * d, data)?;
        Ok(self.push(
            value,
            Op::SlotPairs {
                states: states.0,
                left: left.0,
                right: right.0,
            },
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().cloned().sum::<S>();
        self.push(Tensor::scalar(total), Op::SumAll(x.0))
    }

    /// Inverted dropout.  A rate of zero is the identity and records nothing.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep_prob = 1.0 - rate;
        let tx = self.value(x);
        let keep: Vec<bool> = (0..tx.len()).map(|_| rng.gen::<f64>() < keep_prob).collect();
        let inv_keep = cast::<S>(1.0 / keep_prob);
        let data = tx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * inv_keep } else { S::zero() })
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        self.push(
            value,
            Op::Dropout {
                x: x.0,
                keep,
                inv_keep,
            },
        )
    }

    /// Runs the chain rule from `root` (a single-element tensor) back to the
    /// leaves, seeding the root gradient with `seed`.
    pub fn backward(&mut self, root: Var, seed: S) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must hold one element, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![seed]);

        let fault = self.backward_fault;
        for idx in (0..=root.0).rev() {
            let (before, rest) = self.grads.split_at_mut(idx);
            let Some(dout) = rest[0].as_deref() else {
                continue;
            };
            let nodes = &self.nodes;
            let value = &nodes[idx].value;
            match &nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(grad_slot(before, *a, nodes), dout);
                    add_into(grad_slot(before, *b, nodes), dout);
                }
                Op::AddBias(x, bias) => {
                    add_into(grad_slot(before, *x, nodes), dout);
                    let db = grad_slot(before, *bias, nodes);
                    let cols = db.len();
                    for row in dout.chunks_exact(cols) {
                        add_into(db, row);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    {
                        let da = grad_slot(before, *a, nodes);
                        for ((g, &d), &y) in da.iter_mut().zip(dout).zip(vb) {
                            *g = *g + d * y;
                        }
                    }
                    let db = grad_slot(before, *b, nodes);
                    for ((g, &d), &x) in db.iter_mut().zip(dout).zip(va) {
                        *g = *g + d * x;
                    }
                }
                Op::Scale(x, c) => {
                    let dx = grad_slot(before, *x, nodes);
                    for (g, &d) in dx.iter_mut().zip(dout) {
                        *g = *g + d * *c;
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = nodes[*a].value.dims2().unwrap();
                    let (_, n) = nodes[*b].value.dims2().unwrap();
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    if let Some(f) = fault {
                        let mut da = vec![S::zero(); m * k];
                        kernels::matmul_nt(&mut da, dout, vb, m, n, k);
                        let slot = grad_slot(before, *a, nodes);
                        for (g, d) in slot.iter_mut().zip(da) {
                            *g = *g + d * f;
                        }
                    } else {
                        kernels::matmul_nt(grad_slot(before, *a, nodes), dout, vb, m, n, k);
                    }
                    kernels::matmul_tn(grad_slot(before, *b, nodes), va, dout, m, k, n);
                }
                Op::Relu(x) => {
                    let vx = nodes[*x].value.data();
                    let dx = grad_slot(before, *x, nodes);
                    for ((g, &d), &v) in dx.iter_mut().zip(dout).zip(vx) {
                        if v > S::zero() {
                            *g = *g + d;
                        }
                    }
                }
                Op::Softmax(x) => {
                    let y = value.data();
                    let (_, cols) = value.rows().unwrap();
                    let dx = grad_slot(before, *x, nodes);
                    softmax_backward_rows(dx, dout, y, cols);
                }
                Op::LogSoftmax(x) => {
                    let y = value.data();
                    let (_, cols) = value.rows().unwrap();
                    let dx = grad_slot(before, *x, nodes);
                    for ((dx_row, d_row), y_row) in dx
                        .chunks_exact_mut(cols)
                        .zip(dout.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dsum = d_row.iter().cloned().sum::<S>();
                        for ((g, &d), &ly) in dx_row.iter_mut().zip(d_row).zip(y_row) {
                            *g = *g + d - ly.exp() * dsum;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let vx = nodes[*x].value.data();
                    let vg = nodes[*gain].value.data();
                    let cols = vg.len();
                    let inv_cols = cast::<S>(1.0 / cols as f64);
                    {
                        let dg = grad_slot(before, *gain, nodes);
                        for (r, d_row) in dout.chunks_exact(cols).enumerate() {
                            let (mean, inv_std) = stats[r];
                            let x_row = &vx[r * cols..(r + 1) * cols];
                            for ((g, &d), &xv) in dg.iter_mut().zip(d_row).zip(x_row) {
                                *g = *g + d * ((xv - mean) * inv_std);
                            }
                        }
                    }
                    {
                        let db = grad_slot(before, *bias, nodes);
                        for d_row in dout.chunks_exact(cols) {
                            add_into(db, d_row);
                        }
                    }
                    let dx = grad_slot(before, *x, nodes);
                    for (r, (dx_row, d_row)) in dx
                        .chunks_exact_mut(cols)
                        .zip(dout.chunks_exact(cols))
                        .enumerate()
                    {
                        let (mean, inv_std) = stats[r];
                        let x_row = &vx[r * cols..(r + 1) * cols];
                        let mut c1 = S::zero();
                        let mut c2 = S::zero();
                        for (j, &d) in d_row.iter().enumerate() {
                            let dxh = d * vg[j];
                            let xh = (x_row[j] - mean) * inv_std;
                            c1 = c1 + dxh;
                            c2 = c2 + dxh * xh;
                        }
                        c1 = c1 * inv_cols;
                        c2 = c2 * inv_cols;
                        for (j, g) in dx_row.iter_mut().enumerate() {
                            let dxh = d_row[j] * vg[j];
                            let xh = (x_row[j] - mean) * inv_std;
                            *g = *g + inv_std * (dxh - c1 - xh * c2);
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let (_, cols) = nodes[*table].value.dims2().unwrap();
                    let dt = grad_slot(before, *table, nodes);
                    for (r, &id) in ids.iter().enumerate() {
                        let d_row = &dout[r * cols..(r + 1) * cols];
                        add_into(&mut dt[id * cols..(id + 1) * cols], d_row);
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (n_q, d) = nodes[*q].value.dims2().unwrap();
                    let (n_k, _) = nodes[*k].value.dims2().unwrap();
                    let dh = d / heads;
                    let scale = cast::<S>(1.0 / (dh as f64).sqrt());
                    let vq = nodes[*q].value.data();
                    let vk = nodes[*k].value.data();
                    let vv = nodes[*v].value.data();

                    let mut qh = vec![S::zero(); n_q * dh];
                    let mut kh = vec![S::zero(); n_k * dh];
                    let mut vh = vec![S::zero(); n_k * dh];
                    let mut dctx = vec![S::zero(); n_q * dh];
                    let mut ds = vec![S::zero(); n_q * n_k];
                    let mut dqh = vec![S::zero(); n_q * dh];
                    let mut dkh = vec![S::zero(); n_k * dh];
                    let mut dvh = vec![S::zero(); n_k * dh];

                    let mut dq_all = vec![S::zero(); n_q * d];
                    let mut dk_all = vec![S::zero(); n_k * d];
                    let mut dv_all = vec![S::zero(); n_k * d];

                    for h in 0..*heads {
                        let off = h * dh;
                        gather_head(&mut qh, vq, d, off, dh);
                        gather_head(&mut kh, vk, d, off, dh);
                        gather_head(&mut vh, vv, d, off, dh);
                        gather_head(&mut dctx, dout, d, off, dh);
                        let p = &probs[h * n_q * n_k..(h + 1) * n_q * n_k];

                        ds.fill(S::zero());
                        kernels::matmul_nt(&mut ds, &dctx, &vh, n_q, dh, n_k);
                        softmax_backward_rows_into(&mut ds, p, n_k);
                        for s in ds.iter_mut() {
                            *s = *s * scale;
                        }

                        dqh.fill(S::zero());
                        kernels::matmul(&mut dqh, &ds, &kh, n_q, n_k, dh);
                        dkh.fill(S::zero());
                        kernels::matmul_tn(&mut dkh, &ds, &qh, n_q, n_k, dh);
                        dvh.fill(S::zero());
                        kernels::matmul_tn(&mut dvh, p, &dctx, n_q, n_k, dh);

                        scatter_head(&mut dq_all, &dqh, d, off, dh);
                        scatter_head(&mut dk_all, &dkh, d, off, dh);
                        scatter_head(&mut dv_all, &dvh, d, off, dh);
                    }

                    add_into(grad_slot(before, *q, nodes), &dq_all);
                    add_into(grad_slot(before, *k, nodes), &dk_all);
                    add_into(grad_slot(before, *v, nodes), &dv_all);
                }
                Op::SlotPairs { states, left, right } => {
                    let (n, d) = nodes[*states].value.dims2().unwrap();
                    {
                        let dl = grad_slot(before, *left, nodes);
                        add_into(dl, &dout[0..d]);
                    }
                    {
                        let dr = grad_slot(before, *right, nodes);
                        add_into(dr, &dout[n * 2 * d + d..(n + 1) * 2 * d]);
                    }
                    let dstates = grad_slot(before, *states, nodes);
                    for i in 0..n {
                        let as_right = &dout[i * 2 * d + d..(i + 1) * 2 * d];
                        add_into(&mut dstates[i * d..(i + 1) * d], as_right);
                        let as_left = &dout[(i + 1) * 2 * d..(i + 1) * 2 * d + d];
                        add_into(&mut dstates[i * d..(i + 1) * d], as_left);
                    }
                }
                Op::SumAll(x) => {
                    let d = dout[0];
                    let dx = grad_slot(before, *x, nodes);
                    for g in dx.iter_mut() {
                        *g = *g + d;
                    }
                }
                Op::Dropout { x, keep, inv_keep } => {
                    let dx = grad_slot(before, *x, nodes);
                    for ((g, &d), &kept) in dx.iter_mut().zip(dout).zip(keep) {
                        if kept {
                            *g = *g + d * *inv_keep;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<'g, S: Scalar>(
    grads: &'g mut [Option<Vec<S>>],
    node: usize,
    nodes: &[Node<S>],
) -> &'g mut [S] {
    grads[node].get_or_insert_with(|| vec![S::zero(); nodes[node].value.len()])
}

#[inline]
fn add_into<S: Scalar>(acc: &mut [S], src: &[S]) {
    for (g, &d) in acc.iter_mut().zip(src) {
        *g = *g + d;
    }
}

#[inline]
fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// dx += y * (dy - sum(dy * y)) per row.
fn softmax_backward_rows<S: Scalar>(dx: &mut [S], dy: &[S], y: &[S], cols: usize) {
    for ((dx_row, dy_row), y_row) in dx
        .chunks_exact_mut(cols)
        .zip(dy.chunks_exact(cols))
        .zip(y.chunks_exact(cols))
    {
        let mut dot = S::zero();
        for (&d, &p) in dy_row.iter().zip(y_row) {
            dot = dot + d * p;
        }
        for ((g, &d), &p) in dx_row.iter_mut().zip(dy_row).zip(y_row) {
            *g = *g + p * (d - dot);
        }
    }
}

/// In-place variant: rewrites `dy` rows into softmax input gradients.
fn softmax_backward_rows_into<S: Scalar>(dy: &mut [S], y: &[S], cols: usize) {
    for (dy_row, y_row) in dy.chunks_exact_mut(cols).zip(y.chunks_exact(cols)) {
        let mut dot = S::zero();
        for (&d, &p) in dy_row.iter().zip(y_row) {
            dot = dot + d * p;
        }
        for (d, &p) in dy_row.iter_mut().zip(y_row) {
            *d = p * (*d - dot);
        }
    }
}

/// Copies head columns `[off, off + dh)` of a `[rows, d]` matrix into a
/// contiguous `[rows, dh]` buffer.
fn gather_head<S: Scalar>(dst: &mut [S], src: &[S], d: usize, off: usize, dh: usize) {
    for (dst_row, src_row) in dst.chunks_exact_mut(dh).zip(src.chunks_exact(d)) {
        dst_row.copy_from_slice(&src_row[off..off + dh]);
    }
}

/// Adds a contiguous `[rows, dh]` buffer into head columns of `[rows, d]`.
fn scatter_head<S: Scalar>(dst: &mut [S], src: &[S], d: usize, off: usize, dh: usize) {
    for (dst_row, src_row) in dst.chunks_exact_mut(d).zip(src.chunks_exact(dh)) {
        add_into(&mut dst_row[off..off + dh], src_row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Weights the output elementwise with a fixed pattern and sums, so a
    /// backward rule that permutes or drops coordinates cannot pass.
    fn weighted_loss(tape: &mut Tape<f64>, out: Var) -> Var {
        let n = tape.value(out).len();
        let shape = tape.value(out).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * (i as f64 % 7.0)).collect();
        let wv = tape.constant(Tensor::new(shape, w).unwrap());
        let prod = tape.mul(out, wv).unwrap();
        tape.sum_all(prod)
    }

    /// Checks every input coordinate of `build` against a central difference.
    fn fd_check<B>(inputs: &[Tensor<f64>], build: B)
    where
        B: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let run = |inputs: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&mut tape, &vars);
            let loss = weighted_loss(&mut tape, out);
            tape.backward(loss, 1.0).unwrap();
            let grads = vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
                })
                .collect();
            (tape.value(loss).item(), grads)
        };

        let (_, analytic) = run(inputs);
        let h = 1e-5;
        for (ti, t) in inputs.iter().enumerate() {
            for i in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[i] -= h;
                let numeric = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let a = analytic[ti][i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0),
                    "input {ti} coord {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(vec![3, 3], 1));
        let eye = tape.constant(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let y = tape.matmul(x, eye).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(crate::error::Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_known_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 3.0f64.ln()]));
        let y = tape.softmax(x).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 0.25).abs() < 1e-12);
        assert!((got[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(vec![4, 5], 2));
        let shift = tape.constant(Tensor::new(vec![4, 5], vec![123.456; 20]).unwrap());
        let xs = tape.add(x, shift).unwrap();
        let y1 = tape.softmax(x).unwrap();
        let y2 = tape.softmax(xs).unwrap();
        for (a, b) in tape.value(y1).data().iter().zip(tape.value(y2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in tape.value(y1).data().chunks_exact(5) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_extreme_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![1e9, -1e9, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert!(tape.value(y).all_finite());
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(vec![3, 6], 3));
        let ls = tape.log_softmax(x).unwrap();
        let s = tape.softmax(x).unwrap();
        for (a, b) in tape.value(ls).data().iter().zip(tape.value(s).data()) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_yields_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 4], vec![7.0; 8]).unwrap());
        let gain = tape.constant(Tensor::vector(vec![2.0, 3.0, 4.0, 5.0]));
        let bias = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y = tape.layer_norm(x, gain, bias, 1e-6).unwrap();
        for row in tape.value(y).data().chunks_exact(4) {
            for (got, want) in row.iter().zip(&[0.1, 0.2, 0.3, 0.4]) {
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(vec![3, 8], 4));
        let gain = tape.constant(Tensor::vector(vec![1.0; 8]));
        let bias = tape.constant(Tensor::vector(vec![0.0; 8]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        for row in tape.value(y).data().chunks_exact(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gather_repeats_rows() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = tape.gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(tape.gather(table, &[3]).is_err());
    }

    #[test]
    fn attention_masked_keys_get_zero_weight() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(rand_tensor(vec![3, 4], 5));
        let k = tape.constant(rand_tensor(vec![4, 4], 6));
        let v = tape.constant(rand_tensor(vec![4, 4], 7));
        let mask = vec![false, true, false, true];
        let out = tape.attention(q, k, v, 2, Some(&mask)).unwrap();

        let mut tape2 = Tape::<f64>::new();
        let vq = tape.value(q).clone();
        let keep_rows =
            |t: &Tensor<f64>| -> Tensor<f64> {
                let d = t.dims2().unwrap().1;
                let mut data = Vec::new();
                data.extend_from_slice(&t.data()[0..d]);
                data.extend_from_slice(&t.data()[2 * d..3 * d]);
                Tensor::matrix(2, d, data).unwrap()
            };
        let q2 = tape2.constant(vq);
        let k2 = tape2.constant(keep_rows(tape.value(k)));
        let v2 = tape2.constant(keep_rows(tape.value(v)));
        let out2 = tape2.attention(q2, k2, v2, 2, None).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape2.value(out2).data()) {
            assert!((a - b).abs() < 1e-12, "mask should equal removing keys");
        }
    }

    #[test]
    fn slot_pairs_layout() {
        let mut tape = Tape::<f64>::new();
        let states = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let left = tape.constant(Tensor::vector(vec![-1.0, -2.0]));
        let right = tape.constant(Tensor::vector(vec![-3.0, -4.0]));
        let out = tape.slot_pairs(states, left, right).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 4]);
        assert_eq!(
            tape.value(out).data(),
            &[-1.0, -2.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, -3.0, -4.0]
        );

        let empty = tape.constant(Tensor::zeros(vec![0, 2]));
        let out0 = tape.slot_pairs(empty, left, right).unwrap();
        assert_eq!(tape.value(out0).shape(), &[1, 4]);
        assert_eq!(tape.value(out0).data(), &[-1.0, -2.0, -3.0, -4.0]);
    }

    #[test]
    fn backward_add_mul_scale() {
        fd_check(&[rand_tensor(vec![3, 4], 10), rand_tensor(vec![3, 4], 11)], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let p = t.mul(s, v[0]).unwrap();
            t.scale(p, -1.7)
        });
    }

    #[test]
    fn backward_add_bias() {
        fd_check(&[rand_tensor(vec![4, 3], 12), rand_tensor(vec![3], 13)], |t, v| {
            t.add_bias(v[0], v[1]).unwrap()
        });
    }

    #[test]
    fn backward_matmul() {
        fd_check(&[rand_tensor(vec![3, 4], 14), rand_tensor(vec![4, 2], 15)], |t, v| {
            t.matmul(v[0], v[1]).unwrap()
        });
    }

    #[test]
    fn backward_relu() {
        // Inputs are sampled away from the kink at zero.
        let mut x = rand_tensor(vec![4, 4], 16);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        fd_check(&[x], |t, v| t.relu(v[0]));
    }

    #[test]
    fn backward_softmax_and_log_softmax() {
        fd_check(&[rand_tensor(vec![3, 5], 17)], |t, v| t.softmax(v[0]).unwrap());
        fd_check(&[rand_tensor(vec![3, 5], 18)], |t, v| t.log_softmax(v[0]).unwrap());
    }

    #[test]
    fn backward_layer_norm() {
        fd_check(
            &[
                rand_tensor(vec![3, 6], 19),
                rand_tensor(vec![6], 20),
                rand_tensor(vec![6], 21),
            ],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
        );
    }

    #[test]
    fn backward_gather_accumulates_repeats() {
        fd_check(&[rand_tensor(vec![4, 3], 22)], |t, v| {
            t.gather(v[0], &[1, 3, 1, 0, 1]).unwrap()
        });
    }

    #[test]
    fn backward_attention() {
        fd_check(
            &[
                rand_tensor(vec![3, 4], 23),
                rand_tensor(vec![5, 4], 24),
                rand_tensor(vec![5, 4], 25),
            ],
            |t, v| t.attention(v[0], v[1], v[2], 2, None).unwrap(),
        );
    }

    #[test]
    fn backward_attention_masked() {
        let mask = vec![false, true, false, false, true];
        fd_check(
            &[
                rand_tensor(vec![3, 4], 26),
                rand_tensor(vec![5, 4], 27),
                rand_tensor(vec![5, 4], 28),
            ],
            |t, v| t.attention(v[0], v[1], v[2], 2, Some(&mask)).unwrap(),
        );
    }

    #[test]
    fn backward_slot_pairs() {
        fd_check(
            &[
                rand_tensor(vec![3, 4], 29),
                rand_tensor(vec![4], 30),
                rand_tensor(vec![4], 31),
            ],
            |t, v| t.slot_pairs(v[0], v[1], v[2]).unwrap(),
        );
        fd_check(
            &[
                rand_tensor(vec![0, 4], 32),
                rand_tensor(vec![4], 33),
                rand_tensor(vec![4], 34),
            ],
            |t, v| t.slot_pairs(v[0], v[1], v[2]).unwrap(),
        );
    }

    #[test]
    fn backward_dropout_applies_saved_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(vec![6, 6], 35));
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let y = tape.dropout(x, 0.5, &mut rng);
        let loss = tape.sum_all(y);
        tape.backward(loss, 1.0).unwrap();
        let dx = tape.grad(x).unwrap();
        let vx = tape.value(x).data();
        let vy = tape.value(y).data();
        for i in 0..vx.len() {
            if vy[i] == 0.0 && vx[i] != 0.0 {
                assert_eq!(dx[i], 0.0);
            } else {
                assert!((dx[i] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_tensor(vec![2, 3], 36));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = tape.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }

    #[test]
    fn ensure_finite_reports_bad_node() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(vec![1.0, f64::NAN]));
        let _ = tape.relu(x);
        assert!(tape.ensure_finite("test").is_err());
    }

    #[test]
    fn injected_fault_corrupts_matmul_gradient() {
        let a_t = rand_tensor(vec![2, 3], 37);
        let b_t = rand_tensor(vec![3, 2], 38);
        let grads = |fault: Option<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            if let Some(f) = fault {
                tape.inject_backward_fault(f);
            }
            let a = tape.constant(a_t.clone());
            let b = tape.constant(b_t.clone());
            let c = tape.matmul(a, b).unwrap();
            let loss = tape.sum_all(c);
            tape.backward(loss, 1.0).unwrap();
            tape.grad(a).unwrap().to_vec()
        };
        let clean = grads(None);
        let faulty = grads(Some(1.5));
        for (c, f) in clean.iter().zip(&faulty) {
            assert!((c * 1.5 - f).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_through_shared_inputs() {
        // f(x) = sum(x*x + x) has gradient 2x + 1.
        let x_t = rand_tensor(vec![5], 39);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss, 1.0).unwrap();
        for (g, &v) in tape.grad(x).unwrap().iter().zip(x_t.data()) {
            assert!((g - (2.0 * v + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_seed_scales_gradients() {
        let x_t = rand_tensor(vec![4], 40);
        let mut t1 = Tape::new();
        let x1 = t1.constant(x_t.clone());
        let l1 = t1.sum_all(x1);
        t1.backward(l1, 1.0).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(x_t);
        let l2 = t2.sum_all(x2);
        t2.backward(l2, 0.25).unwrap();
        for (a, b) in t1.grad(x1).unwrap().iter().zip(t2.grad(x2).unwrap()) {
            assert!((a * 0.25 - b).abs() < 1e-15);
        }
    }
}
