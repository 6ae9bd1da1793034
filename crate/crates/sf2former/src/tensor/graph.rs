//! Eager-forward, recorded-backward computation graph.
//!
//! Every operation validates shapes, computes its result immediately, and
//! appends a node describing how to push gradients to its parents. Nodes only
//! ever reference earlier nodes, so a reverse index sweep is a valid
//! topological order for backpropagation. Backward recomputes cheap
//! statistics (means, softmax outputs are the node values themselves) instead
//! of carrying dedicated caches.

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::spectral;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x [..., D] + bias [D]`, broadcast over leading axes.
    AddBias(Var, Var),
    /// Rank-2 or rank-3 (equal leading batch) matrix product.
    MatMul(Var, Var),
    /// Swap the trailing two axes.
    TransposeLast(Var),
    Reshape(Var),
    /// `[N, h*d] -> [h, N, d]`.
    SplitHeads(Var, usize),
    /// `[h, N, d] -> [N, h*d]`.
    MergeHeads(Var),
    /// Rank-1 concatenation.
    ConcatVec(Var, Var),
    /// Rank-2 concatenation along axis 0 (equal column count).
    ConcatRows(Var, Var),
    /// k vectors `[D]` stacked into `[k, D]`.
    StackRows(Vec<Var>),
    /// `[N, D] -> [D]`, row `row`.
    TakeRow(Var, usize),
    /// `[N, D] -> [D]`, arithmetic mean over rows.
    MeanRows(Var),
    SumAll(Var),
    Gelu(Var),
    Softmax(Var, usize),
    /// Last-axis layer norm with affine scale/shift.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// Mean over rows of `-log softmax(logits)[label]`.
    CrossEntropy { logits: Var, labels: Vec<usize> },
    /// `real(ifft2(fft2(x) . K))` per channel; K = k_re + i k_im.
    GlobalFilter { x: Var, k_re: Var, k_im: Var },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass; consumed by a single [`Graph::backward`] call.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward pass w.r.t. `v`, if one was computed.
    pub fn grad_of(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite value {bad} produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a constant or externally supplied tensor as a leaf.
    pub fn input(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, t.requires_grad)
    }

    /// Leases a parameter's current value into the graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let t = &store.get(id).tensor;
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let data: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), needs)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::shape(format!(
                "add_bias: x {:?} needs bias [{d}], got {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let bv = self.value(bias).to_vec();
        let data: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        self.push(self.shape(x).to_vec(), data, Op::AddBias(x, bias), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (None, *m, *k1, *n),
            ([b1, m, k1], [b2, k2, n]) if k1 == k2 && b1 == b2 => (Some(*b1), *m, *k1, *n),
            _ => {
                return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
            }
        };
        let reps = batch.unwrap_or(1);
        let mut out = vec![T::zero(); reps * m * n];
        for r in 0..reps {
            matmul_nn(
                &self.value(a)[r * m * k..(r + 1) * m * k],
                &self.value(b)[r * k * n..(r + 1) * k * n],
                m,
                k,
                n,
                &mut out[r * m * n..(r + 1) * m * n],
            );
        }
        let shape = match batch {
            Some(b0) => vec![b0, m, n],
            None => vec![m, n],
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, out, Op::MatMul(a, b), needs)
    }

    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("transpose_last: rank-{} input", s.len())));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let reps: usize = s[..s.len() - 2].iter().product();
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..reps {
            let base = r * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = src[base + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let needs = self.needs(x);
        self.push(shape, out, Op::TransposeLast(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let expect: usize = shape.iter().product();
        if expect != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} to {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, data, Op::Reshape(x), needs)
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, dm] = match s.as_slice() {
            [n, dm] => [*n, *dm],
            _ => return Err(Error::shape(format!("split_heads: rank-{} input", s.len()))),
        };
        if heads == 0 || dm % heads != 0 {
            return Err(Error::shape(format!("split_heads: width {dm} not divisible by {heads} heads")));
        }
        let d = dm / heads;
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for i in 0..n {
            for h in 0..heads {
                for j in 0..d {
                    out[h * n * d + i * d + j] = src[i * dm + h * d + j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(vec![heads, n, d], out, Op::SplitHeads(x, heads), needs)
    }

    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [heads, n, d] = match s.as_slice() {
            [h, n, d] => [*h, *n, *d],
            _ => return Err(Error::shape(format!("merge_heads: rank-{} input", s.len()))),
        };
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for h in 0..heads {
            for i in 0..n {
                for j in 0..d {
                    out[i * heads * d + h * d + j] = src[h * n * d + i * d + j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(vec![n, heads * d], out, Op::MergeHeads(x), needs)
    }

    pub fn concat_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(Error::shape(format!(
                "concat_vec: {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut data = self.value(a).to_vec();
        data.extend_from_slice(self.value(b));
        let shape = vec![data.len()];
        let needs = self.needs(a) || self.needs(b);
        self.push(shape, data, Op::ConcatVec(a, b), needs)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match (sa.as_slice(), sb.as_slice()) {
            ([ra, ca], [rb, cb]) if ca == cb => {
                let mut data = self.value(a).to_vec();
                data.extend_from_slice(self.value(b));
                let needs = self.needs(a) || self.needs(b);
                self.push(vec![ra + rb, *ca], data, Op::ConcatRows(a, b), needs)
            }
            _ => Err(Error::shape(format!("concat_rows: {sa:?} and {sb:?}"))),
        }
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::shape("stack_rows: empty row list".to_string()));
        }
        let d = self.shape(rows[0]).to_vec();
        if d.len() != 1 {
            return Err(Error::shape(format!("stack_rows: rank-{} row", d.len())));
        }
        let mut data = Vec::with_capacity(rows.len() * d[0]);
        let mut needs = false;
        for &r in rows {
            if self.shape(r) != d.as_slice() {
                return Err(Error::shape(format!(
                    "stack_rows: {:?} vs {:?}",
                    self.shape(r),
                    d
                )));
            }
            data.extend_from_slice(self.value(r));
            needs |= self.needs(r);
        }
        self.push(vec![rows.len(), d[0]], data, Op::StackRows(rows.to_vec()), needs)
    }

    pub fn take_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, d] = match s.as_slice() {
            [n, d] => [*n, *d],
            _ => return Err(Error::shape(format!("take_row: rank-{} input", s.len()))),
        };
        if row >= n {
            return Err(Error::shape(format!("take_row: row {row} of {n}")));
        }
        let data = self.value(x)[row * d..(row + 1) * d].to_vec();
        let needs = self.needs(x);
        self.push(vec![d], data, Op::TakeRow(x, row), needs)
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, d] = match s.as_slice() {
            [n, d] => [*n, *d],
            _ => return Err(Error::shape(format!("mean_rows: rank-{} input", s.len()))),
        };
        let src = self.value(x);
        let inv = T::one() / T::from_f64(n as f64);
        let mut out = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                out[j] += src[i * d + j];
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let needs = self.needs(x);
        self.push(vec![d], out, Op::MeanRows(x), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(x) {
            acc += v;
        }
        let needs = self.needs(x);
        self.push(vec![1], vec![acc], Op::SumAll(x), needs)
    }

    /// Elementwise `x * Phi(x)` with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<T> = self.value(x).iter().map(|&v| v * gauss_cdf(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), needs)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(format!("softmax: axis {axis} of {s:?}")));
        }
        let mut data = self.value(x).to_vec();
        for_each_lane(&s, axis, |lane| {
            softmax_lane(&mut data, lane);
        });
        let needs = self.needs(x);
        self.push(s, data, Op::Softmax(x, axis), needs)
    }

    /// Last-axis normalization to zero mean / unit variance, then `gamma*x+beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm: rank-0 input"))?;
        if d == 0 || eps <= 0.0 {
            return Err(Error::usage(format!("layer_norm: D={d}, eps={eps}")));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm: x {:?} needs gamma/beta [{d}], got {:?}/{:?}",
                s,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).len() / d;
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let (mean, inv_std) = row_moments(row, eps);
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(s, out, Op::LayerNorm { x, gamma, beta, eps }, needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, c] = match s.as_slice() {
            [b, c] => [*b, *c],
            _ => return Err(Error::shape(format!("cross_entropy: logits {s:?}"))),
        };
        if labels.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: {b} logit rows vs {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::usage(format!("cross_entropy: label {bad} out of range 0..{c}")));
        }
        let src = self.value(logits);
        let mut loss = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            loss += neg_log_softmax_at(row, label);
        }
        loss = loss / T::from_f64(b as f64);
        let needs = self.needs(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Learnable frequency-domain filter: `real(ifft2(fft2(x) . K))`.
    pub fn global_filter(&mut self, x: Var, k_re: Var, k_im: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [h, w, d] = match s.as_slice() {
            [h, w, d] => [*h, *w, *d],
            _ => return Err(Error::shape(format!("global_filter: token grid {s:?}"))),
        };
        if self.shape(k_re) != s.as_slice() || self.shape(k_im) != s.as_slice() {
            return Err(Error::shape(format!(
                "global_filter: x {:?} vs filter {:?}/{:?}",
                s,
                self.shape(k_re),
                self.shape(k_im)
            )));
        }
        let out = spectral::filter_real_grid(self.value(x), h, w, d, self.value(k_re), self.value(k_im));
        let needs = self.needs(x) || self.needs(k_re) || self.needs(k_im);
        self.push(s, out, Op::GlobalFilter { x, k_re, k_im }, needs)
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every parameter
    /// of `store` (zeros for parameters the loss does not reach).
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(Error::usage(
                "backward called twice on the same recorded graph",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        store.zero_grads();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads[idx] {
                    let dst = store.get_mut(pid).tensor.grad.as_mut().unwrap();
                    for (d, &s) in dst.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut accum = |var: Var, contrib: Vec<T>| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(dst) => {
                    for (d, s) in dst.iter_mut().zip(contrib) {
                        *d += s;
                    }
                }
                slot => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                accum(*a, g.to_vec());
                accum(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                accum(*a, g.iter().zip(vb).map(|(&gi, &bi)| gi * bi).collect());
                accum(*b, g.iter().zip(va).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::Scale(x, c) => {
                accum(*x, g.iter().map(|&gi| gi * *c).collect());
            }
            Op::AddBias(x, bias) => {
                accum(*x, g.to_vec());
                let d = self.value(*bias).len();
                let mut db = vec![T::zero(); d];
                for (i, &gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
                accum(*bias, db);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (reps, m, k, n) = if sa.len() == 3 {
                    (sa[0], sa[1], sa[2], sb[2])
                } else {
                    (1, sa[0], sa[1], sb[1])
                };
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = vec![T::zero(); va.len()];
                let mut db = vec![T::zero(); vb.len()];
                for r in 0..reps {
                    let (ab, bb, gb) = (r * m * k, r * k * n, r * m * n);
                    matmul_nt(
                        &g[gb..gb + m * n],
                        &vb[bb..bb + k * n],
                        m,
                        n,
                        k,
                        &mut da[ab..ab + m * k],
                    );
                    matmul_tn(
                        &va[ab..ab + m * k],
                        &g[gb..gb + m * n],
                        m,
                        k,
                        n,
                        &mut db[bb..bb + k * n],
                    );
                }
                accum(*a, da);
                accum(*b, db);
            }
            Op::TransposeLast(x) => {
                let s = &node.shape;
                let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                let reps: usize = s[..s.len() - 2].iter().product();
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..reps {
                    let base = r * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[base + j * rows + i] = g[base + i * cols + j];
                        }
                    }
                }
                accum(*x, dx);
            }
            Op::Reshape(x) => accum(*x, g.to_vec()),
            Op::SplitHeads(x, heads) => {
                let [h, n, d] = [node.shape[0], node.shape[1], node.shape[2]];
                debug_assert_eq!(h, *heads);
                let dm = h * d;
                let mut dx = vec![T::zero(); g.len()];
                for hh in 0..h {
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * dm + hh * d + j] = g[hh * n * d + i * d + j];
                        }
                    }
                }
                accum(*x, dx);
            }
            Op::MergeHeads(x) => {
                let sx = self.shape(*x);
                let [h, n, d] = [sx[0], sx[1], sx[2]];
                let dm = h * d;
                let mut dx = vec![T::zero(); g.len()];
                for hh in 0..h {
                    for i in 0..n {
                        for j in 0..d {
                            dx[hh * n * d + i * d + j] = g[i * dm + hh * d + j];
                        }
                    }
                }
                accum(*x, dx);
            }
            Op::ConcatVec(a, b) => {
                let na = self.value(*a).len();
                accum(*a, g[..na].to_vec());
                accum(*b, g[na..].to_vec());
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                accum(*a, g[..na].to_vec());
                accum(*b, g[na..].to_vec());
            }
            Op::StackRows(rows) => {
                let d = node.shape[1];
                for (i, &r) in rows.iter().enumerate() {
                    accum(r, g[i * d..(i + 1) * d].to_vec());
                }
            }
            Op::TakeRow(x, row) => {
                let d = node.shape[0];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                dx[row * d..(row + 1) * d].copy_from_slice(g);
                accum(*x, dx);
            }
            Op::MeanRows(x) => {
                let d = node.shape[0];
                let n = self.value(*x).len() / d;
                let inv = T::one() / T::from_f64(n as f64);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for i in 0..n {
                    for j in 0..d {
                        dx[i * d + j] = g[j] * inv;
                    }
                }
                accum(*x, dx);
            }
            Op::SumAll(x) => {
                accum(*x, vec![g[0]; self.value(*x).len()]);
            }
            Op::Gelu(x) => {
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| gi * (gauss_cdf(v) + v * gauss_pdf(v)))
                    .collect();
                accum(*x, dx);
            }
            Op::Softmax(x, axis) => {
                // dx = y . (g - sum(g . y)) per lane, using the stored output y.
                let y = &node.data;
                let mut dx = vec![T::zero(); y.len()];
                for_each_lane(&node.shape, *axis, |lane| {
                    let mut dot = T::zero();
                    for &i in &lane {
                        dot += g[i] * y[i];
                    }
                    for &i in &lane {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                });
                accum(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *node.shape.last().unwrap();
                let rows = node.data.len() / d;
                let src = self.value(*x);
                let gv = self.value(*gamma);
                let mut dx = vec![T::zero(); src.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let inv_d = T::one() / T::from_f64(d as f64);
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mean, inv_std) = row_moments(row, *eps);
                    // dxhat, plus the two projection terms of the LN jacobian.
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = grow[j] * gv[j];
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for j in 0..d {
                        let xh = (row[j] - mean) * inv_std;
                        let dxh = grow[j] * gv[j];
                        dx[r * d + j] = inv_std * (dxh - sum_dxh * inv_d - xh * sum_dxh_xh * inv_d);
                    }
                }
                accum(*x, dx);
                accum(*gamma, dgamma);
                accum(*beta, dbeta);
            }
            Op::CrossEntropy { logits, labels } => {
                let s = self.shape(*logits);
                let (b, c) = (s[0], s[1]);
                let src = self.value(*logits);
                let scale = g[0] / T::from_f64(b as f64);
                let mut dl = vec![T::zero(); src.len()];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &src[i * c..(i + 1) * c];
                    let probs = softmax_row(row);
                    for j in 0..c {
                        let ind = if j == label { T::one() } else { T::zero() };
                        dl[i * c + j] = (probs[j] - ind) * scale;
                    }
                }
                accum(*logits, dl);
            }
            Op::GlobalFilter { x, k_re, k_im } => {
                let s = self.shape(*x);
                let [h, w, d] = [s[0], s[1], s[2]];
                let grads3 = spectral::filter_backward(
                    self.value(*x),
                    h,
                    w,
                    d,
                    self.value(*k_re),
                    self.value(*k_im),
                    g,
                );
                accum(*x, grads3.dx);
                accum(*k_re, grads3.dk_re);
                accum(*k_im, grads3.dk_im);
            }
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias(..) => "add_bias",
        Op::MatMul(..) => "matmul",
        Op::TransposeLast(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::SplitHeads(..) => "split_heads",
        Op::MergeHeads(_) => "merge_heads",
        Op::ConcatVec(..) => "concat_vec",
        Op::ConcatRows(..) => "concat_rows",
        Op::StackRows(_) => "stack_rows",
        Op::TakeRow(..) => "take_row",
        Op::MeanRows(_) => "mean_rows",
        Op::SumAll(_) => "sum_all",
        Op::Gelu(_) => "gelu",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::GlobalFilter { .. } => "global_filter",
    }
}

fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T` (rows of both operands are contiguous).
fn matmul_nt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc += *gv * *bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`.
fn matmul_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn gauss_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + (x * inv_sqrt2).erf())
}

fn gauss_pdf<T: Scalar>(x: T) -> T {
    let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64(0.5)).exp()
}

fn row_moments<T: Scalar>(row: &[T], eps: f64) -> (T, T) {
    let inv_d = T::one() / T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &v in row {
        mean += v;
    }
    mean *= inv_d;
    let mut var = T::zero();
    for &v in row {
        let c = v - mean;
        var += c * c;
    }
    var *= inv_d;
    (mean, T::one() / (var + T::from_f64(eps)).sqrt())
}

fn softmax_lane<T: Scalar>(data: &mut [T], lane: Vec<usize>) {
    let mut max = data[lane[0]];
    for &i in &lane[1..] {
        if data[i] > max {
            max = data[i];
        }
    }
    let mut sum = T::zero();
    for &i in &lane {
        data[i] = (data[i] - max).exp();
        sum += data[i];
    }
    for &i in &lane {
        data[i] = data[i] / sum;
    }
}

fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut out: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let mut sum = T::zero();
    for &v in &out {
        sum += v;
    }
    for v in &mut out {
        *v = *v / sum;
    }
    out
}

fn neg_log_softmax_at<T: Scalar>(row: &[T], label: usize) -> T {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    sum.ln() - (row[label] - max)
}

/// Invokes `f` with the flat indices of every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Vec<usize>)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let lane: Vec<usize> = (0..len).map(|k| base + k * inner).collect();
            f(lane);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, vals).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i2 = g.input(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.input(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&t64(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = g.input(&t64(&[2, 1], &[3.0, 4.0])).unwrap();
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(&t64(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.input(&t64(&[2, 2], &[0.0; 4])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Random 5x7 . 7x3, exact in 64-bit against the naive triple loop.
        let mut seed = 0x2545F4914F6CDD1Du64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a: Vec<f64> = (0..35).map(|_| next()).collect();
        let b: Vec<f64> = (0..21).map(|_| next()).collect();
        let mut expect = vec![0.0; 15];
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..7 {
                    acc += a[i * 7 + p] * b[p * 3 + j];
                }
                expect[i * 3 + j] = acc;
            }
        }
        let mut g = Graph::<f64>::new();
        let av = g.input(&t64(&[5, 7], &a)).unwrap();
        let bv = g.input(&t64(&[7, 3], &b)).unwrap();
        let out = g.matmul(av, bv).unwrap();
        assert_eq!(g.value(out), expect.as_slice());
    }

    #[test]
    fn gelu_known_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t64(&[3], &[0.0, 10.0, 1.0])).unwrap();
        let y = g.gelu(x).unwrap();
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6, "gelu(10)={}", v[1]);
        // 1 * Phi(1) with Phi from an erf oracle.
        assert!((v[2] - 0.8413447460685429).abs() < 1e-9, "gelu(1)={}", v[2]);
    }

    #[test]
    fn softmax_known_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t64(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        let x = g.input(&t64(&[2], &[1000.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);

        let x = g.input(&t64(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        let expect = [0.0900305731703804, 0.2447284710547976, 0.665240955774822];
        for (got, want) in v.iter().zip(expect) {
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let vals = [0.3, -1.2, 4.0, 2.2, 0.0];
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let mut g = Graph::<f64>::new();
        let a = g.input(&t64(&[5], &vals)).unwrap();
        let b = g.input(&t64(&[5], &shifted)).unwrap();
        let ya = g.softmax(a, 0).unwrap();
        let yb = g.softmax(b, 0).unwrap();
        let (va, vb) = (g.value(ya).to_vec(), g.value(yb).to_vec());
        let sum: f64 = va.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_known_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t64(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let gamma = g.input(&t64(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let beta = g.input(&t64(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for &v in g.value(y) {
            assert!(v.abs() < 1e-9, "constant input must normalize to zero, got {v}");
        }

        let x = g.input(&t64(&[2], &[0.0, 2.0])).unwrap();
        let gamma = g.input(&t64(&[2], &[1.0, 1.0])).unwrap();
        let beta = g.input(&t64(&[2], &[5.0, 5.0])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-9).unwrap();
        let v = g.value(y);
        assert!((v[0] - 4.0).abs() < 1e-4 && (v[1] - 6.0).abs() < 1e-4, "{v:?}");
    }

    #[test]
    fn layer_norm_output_moments() {
        // Per-row mean ~ 0 and variance ~ 1 before the affine part.
        let vals: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.5).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(&t64(&[4, 6], &vals)).unwrap();
        let gamma = g.input(&t64(&[6], &[1.0; 6])).unwrap();
        let beta = g.input(&t64(&[6], &[0.0; 6])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-9).unwrap();
        let v = g.value(y);
        for r in 0..4 {
            let row = &v[r * 6..(r + 1) * 6];
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn layer_norm_affine_rescale_invariance() {
        // LN(a*x + b) == LN(x) for a > 0 when gamma/beta are identity.
        let vals = [0.4, -1.0, 2.5, 0.9, -0.3, 1.1];
        let rescaled: Vec<f64> = vals.iter().map(|v| 3.7 * v + 11.0).collect();
        let mut g = Graph::<f64>::new();
        let gamma = g.input(&t64(&[6], &[1.0; 6])).unwrap();
        let beta = g.input(&t64(&[6], &[0.0; 6])).unwrap();
        let a = g.input(&t64(&[6], &vals)).unwrap();
        let b = g.input(&t64(&[6], &rescaled)).unwrap();
        let ya = g.layer_norm(a, gamma, beta, 1e-12).unwrap();
        let yb = g.layer_norm(b, gamma, beta, 1e-12).unwrap();
        for (x, y) in g.value(ya).iter().zip(g.value(yb)) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut g = Graph::<f64>::new();
        let l = g.input(&t64(&[1, 2], &[0.0, 0.0])).unwrap();
        let loss = g.cross_entropy(l, &[0]).unwrap();
        assert!((g.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let l = g.input(&t64(&[1, 2], &[100.0, 0.0])).unwrap();
        let loss = g.cross_entropy(l, &[0]).unwrap();
        assert!(g.value(loss)[0] < 1e-9);

        let l = g.input(&t64(&[1, 2], &[1.0, 3.0])).unwrap();
        let loss = g.cross_entropy(l, &[1]).unwrap();
        assert!((g.value(loss)[0] - 0.12692801104297263).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let l = g.input(&t64(&[1, 2], &[0.0, 0.0])).unwrap();
        let err = g.cross_entropy(l, &[2]).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn backward_quadratic() {
        // loss = sum(x . x), x = [3] -> grad 2x = [6].
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", t64(&[1], &[3.0])).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x).unwrap();
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).tensor.grad.as_deref(), Some([6.0].as_slice()));
    }

    #[test]
    fn backward_unreachable_param_gets_zero_grad() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", t64(&[2], &[1.0, 2.0])).unwrap();
        let unused = store.add("unused", t64(&[3], &[7.0, 8.0, 9.0])).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x).unwrap();
        let loss = g.sum_all(xv).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(
            store.get(unused).tensor.grad.as_deref(),
            Some([0.0, 0.0, 0.0].as_slice())
        );
        assert_eq!(store.get(x).tensor.grad.as_deref(), Some([1.0, 1.0].as_slice()));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", t64(&[1], &[2.0])).unwrap();
        let mut g = Graph::new();
        let xv = g.param(&store, x).unwrap();
        let loss = g.sum_all(xv).unwrap();
        g.backward(loss, &mut store).unwrap();
        let err = g.backward(loss, &mut store).unwrap_err();
        assert!(err.to_string().contains("twice"));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&t64(&[2], &[1e308, 1e308])).unwrap();
        let err = g.add(x, x).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn movement_ops_roundtrip() {
        let vals: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(&t64(&[3, 4], &vals)).unwrap();
        let split = g.split_heads(x, 2).unwrap();
        assert_eq!(g.shape(split), &[2, 3, 2]);
        let merged = g.merge_heads(split).unwrap();
        assert_eq!(g.value(merged), vals.as_slice());

        let t = g.transpose_last(x).unwrap();
        let tt = g.transpose_last(t).unwrap();
        assert_eq!(g.value(tt), vals.as_slice());
    }
}
