//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] records one forward pass; `backward` walks the tape in reverse
//! and accumulates gradients. Attention is a fused op that recomputes its
//! softmax in the backward pass instead of keeping [N, N] buffers alive, which
//! keeps training memory flat in sequence length.
//!
//! Videos travel through graphs as `[T*H*W, 3]` matrices; token sequences as
//! `[N, hidden]`. Gather-style ops (`reindex`) cover patchify, pixel-shuffle
//! and im2col so convolutions reduce to gather + matmul.

use crate::tensor::{Real, Tensor};
use std::sync::Arc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Sentinel in a `reindex` map meaning "emit zero" (used by padded im2col).
pub const REINDEX_ZERO: usize = usize::MAX;

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddConst(Var, T),
    /// [N, D] + row vector ([D] or [1, D])
    AddRow(Var, Var),
    /// [N, D] * row vector
    MulRow(Var, Var),
    /// [N, D] * column vector [N, 1]
    MulCol(Var, Var),
    /// [1, D] (or [D]) replicated to [n, D]
    BroadcastRow(Var, usize),
    Matmul(Var, Var),
    /// a . b^T
    MatmulNT(Var, Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Sqrt(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
    },
    ConcatRows(Var, Var),
    SliceRows(Var, usize, usize),
    /// out[r, :] = x[rows[r], :]
    IndexRows(Var, Arc<Vec<usize>>),
    /// out[i] = x[map[i]] (or 0 at REINDEX_ZERO)
    Reindex(Var, Arc<Vec<usize>>),
    /// [N, M] -> [N, 1]
    RowSum(Var),
    /// [N, M] -> [N, 1] with saved argmax (first index on ties)
    RowMax(Var, Vec<usize>),
    RowMin(Var, Vec<usize>),
    MeanAll(Var),
    SumAll(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// One recorded forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bound: std::collections::HashMap<usize, (Var, bool)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: std::collections::HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input: gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    /// Differentiable leaf without a parameter binding (for input-grad tests).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true, None)
    }

    /// Differentiable leaf bound to an external parameter slot. Binding the
    /// same slot twice returns the first var, so shared weights accumulate
    /// one gradient.
    pub fn leaf_param(&mut self, value: Tensor<T>, param_id: usize) -> Var {
        self.bind(value, param_id, true)
    }

    /// Parameter bound as a constant (frozen: no gradient, no update).
    pub fn frozen_param(&mut self, value: Tensor<T>, param_id: usize) -> Var {
        self.bind(value, param_id, false)
    }

    fn bind(&mut self, value: Tensor<T>, param_id: usize, trainable: bool) -> Var {
        if let Some(&(var, was_trainable)) = self.bound.get(&param_id) {
            assert_eq!(
                was_trainable, trainable,
                "parameter bound both trainable and frozen in one graph"
            );
            return var;
        }
        let var = self.push_node(value, Op::Leaf, trainable, trainable.then_some(param_id));
        self.bound.insert(param_id, (var, trainable));
        var
    }

    /// (param_id, var) bindings recorded in this graph.
    pub fn param_bindings(&self) -> Vec<(usize, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect()
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs = match &op {
            Op::Leaf => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulNT(a, b)
            | Op::ConcatRows(a, b) => self.needs_grad(*a) || self.needs_grad(*b),
            Op::Scale(a, _)
            | Op::AddConst(a, _)
            | Op::BroadcastRow(a, _)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::SliceRows(a, _, _)
            | Op::IndexRows(a, _)
            | Op::Reindex(a, _)
            | Op::RowSum(a)
            | Op::RowMax(a, _)
            | Op::RowMin(a, _)
            | Op::MeanAll(a)
            | Op::SumAll(a) => self.needs_grad(*a),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.needs_grad(*x) || self.needs_grad(*gain) || self.needs_grad(*bias)
            }
            Op::Attention { q, k, v, .. } => {
                self.needs_grad(*q) || self.needs_grad(*k) || self.needs_grad(*v)
            }
        };
        self.push_node(value, op, needs, None)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a, c))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let d = *av.shape().last().unwrap();
        assert_eq!(bv.numel(), d, "add_row: row vector length");
        let n = av.numel() / d;
        let mut out = av.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = out[r * d + c] + bv.data()[c];
            }
        }
        let v = Tensor::new(av.shape().to_vec(), out);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let d = *av.shape().last().unwrap();
        assert_eq!(bv.numel(), d, "mul_row: row vector length");
        let n = av.numel() / d;
        let mut out = av.data().to_vec();
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = out[r * d + c] * bv.data()[c];
            }
        }
        let v = Tensor::new(av.shape().to_vec(), out);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = (av.rows(), av.cols());
        assert_eq!(bv.numel(), n, "mul_col: column vector length");
        let mut out = av.data().to_vec();
        for r in 0..n {
            let s = bv.data()[r];
            for c in 0..d {
                out[r * d + c] = out[r * d + c] * s;
            }
        }
        let v = Tensor::new(av.shape().to_vec(), out);
        self.push(v, Op::MulCol(a, b))
    }

    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let d = av.numel();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(av.data());
        }
        let v = Tensor::new(vec![n, d], out);
        self.push(v, Op::BroadcastRow(a, n))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatmulNT(a, b))
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        self.push(v, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(silu_fwd);
        self.push(v, Op::Silu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    /// Callers are responsible for keeping the argument strictly positive
    /// (typically via `add_const` with an epsilon) so the derivative is finite.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    // ---- normalization / attention ----

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(self.value(gain).numel(), d);
        assert_eq!(self.value(bias).numel(), d);
        let mut xhat = vec![T::ZERO; n * d];
        let mut rstd = vec![T::ZERO; n];
        let mut out = vec![T::ZERO; n * d];
        let inv_d = T::from_f64(1.0 / d as f64);
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        for r in 0..n {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::ZERO, |s, &x| s + x) * inv_d;
            let var = row
                .iter()
                .fold(T::ZERO, |s, &x| s + (x - mean) * (x - mean))
                * inv_d;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * gv[c] + bv[c];
            }
        }
        let value = Tensor::new(vec![n, d], out);
        let xhat = Tensor::new(vec![n, d], xhat);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head self-attention core: inputs are already projected q/k/v of
    /// shape [N, n_heads*head_dim]; output has the same shape. Softmax buffers
    /// are recomputed in backward rather than stored.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize) -> Var {
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        assert_eq!(self.value(k).shape(), &[n, d]);
        assert_eq!(self.value(v).shape(), &[n, d]);
        assert_eq!(d % n_heads, 0, "hidden dim not divisible by heads");
        let dh = d / n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::ZERO; n * d];
        let mut scores = vec![T::ZERO; n * n];
        let qd = self.value(q).data().to_vec();
        let kd = self.value(k).data().to_vec();
        let vd = self.value(v).data().to_vec();
        for h in 0..n_heads {
            let off = h * dh;
            unsafe {
                // S = scale * Qh . Kh^T
                T::gemm(
                    n,
                    dh,
                    n,
                    scale,
                    qd.as_ptr().add(off),
                    d as isize,
                    1,
                    kd.as_ptr().add(off),
                    1,
                    d as isize,
                    T::ZERO,
                    scores.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            softmax_rows(&mut scores, n, n);
            unsafe {
                // Oh = P . Vh
                T::gemm(
                    n,
                    n,
                    dh,
                    T::ONE,
                    scores.as_ptr(),
                    n as isize,
                    1,
                    vd.as_ptr().add(off),
                    d as isize,
                    1,
                    T::ZERO,
                    out.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
            }
        }
        let value = Tensor::new(vec![n, d], out);
        self.push(value, Op::Attention { q, k, v, n_heads })
    }

    // ---- shape ops ----

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "concat_rows: column mismatch");
        let d = av.cols();
        let mut out = Vec::with_capacity(av.numel() + bv.numel());
        out.extend_from_slice(av.data());
        out.extend_from_slice(bv.data());
        let v = Tensor::new(vec![av.rows() + bv.rows(), d], out);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_rows_all(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.concat_rows(acc, p);
        }
        acc
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        let (n, d) = (av.rows(), av.cols());
        assert!(start <= end && end <= n, "slice_rows bounds");
        let v = Tensor::new(
            vec![end - start, d],
            av.data()[start * d..end * d].to_vec(),
        );
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn index_rows(&mut self, a: Var, rows: Arc<Vec<usize>>) -> Var {
        let av = self.value(a);
        let (n, d) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows.iter() {
            assert!(r < n, "index_rows out of bounds");
            out.extend_from_slice(&av.data()[r * d..(r + 1) * d]);
        }
        let v = Tensor::new(vec![rows.len(), d], out);
        self.push(v, Op::IndexRows(a, rows))
    }

    /// Gather arbitrary elements of `a` (flattened) into `out_shape`.
    /// `REINDEX_ZERO` entries emit zero; everything else must be in bounds.
    pub fn reindex(&mut self, a: Var, map: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Var {
        let av = self.value(a);
        assert_eq!(map.len(), out_shape.iter().product::<usize>());
        let src = av.data();
        let out: Vec<T> = map
            .iter()
            .map(|&i| if i == REINDEX_ZERO { T::ZERO } else { src[i] })
            .collect();
        let v = Tensor::new(out_shape, out);
        self.push(v, Op::Reindex(a, map))
    }

    // ---- reductions ----

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = (av.rows(), av.cols());
        let mut out = vec![T::ZERO; n];
        for r in 0..n {
            out[r] = av.data()[r * d..(r + 1) * d].iter().fold(T::ZERO, |s, &x| s + x);
        }
        let v = Tensor::new(vec![n, 1], out);
        self.push(v, Op::RowSum(a))
    }

    pub fn row_max(&mut self, a: Var) -> Var {
        let (v, arg) = row_extreme(self.value(a), true);
        self.push(v, Op::RowMax(a, arg))
    }

    pub fn row_min(&mut self, a: Var) -> Var {
        let (v, arg) = row_extreme(self.value(a), false);
        self.push(v, Op::RowMin(a, arg))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let inv = T::from_f64(1.0 / av.numel() as f64);
        let s = av.data().iter().fold(T::ZERO, |s, &x| s + x) * inv;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::ZERO, |s, &x| s + x);
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    // ---- conveniences ----

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, T::ZERO - T::ONE)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Mean squared error between two same-shape vars.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean_all(s)
    }

    /// Value copied out of the graph, cutting the gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads);
            // Only leaf gradients are observable after backward; dropping
            // intermediate buffers here keeps peak memory near the tape size.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| T::ZERO - x));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |gg, y| gg * y));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |gg, x| gg * x));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    self.acc(grads, *a, g.zip_map(bv, |gg, y| gg / y));
                }
                if self.needs_grad(*b) {
                    let mut d = vec![T::ZERO; g.numel()];
                    for (idx, dv) in d.iter_mut().enumerate() {
                        let y = bv.data()[idx];
                        *dv = T::ZERO - g.data()[idx] * av.data()[idx] / (y * y);
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * *c)),
            Op::AddConst(a, _) => self.acc(grads, *a, g.clone()),
            Op::AddRow(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, g.clone());
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, col_sum_into_shape(g, self.value(*b).shape()));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = bv.numel();
                let n = av.numel() / d;
                if self.needs_grad(*a) {
                    let mut out = g.data().to_vec();
                    for r in 0..n {
                        for c in 0..d {
                            out[r * d + c] = out[r * d + c] * bv.data()[c];
                        }
                    }
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), out));
                }
                if self.needs_grad(*b) {
                    let mut out = vec![T::ZERO; d];
                    for r in 0..n {
                        for c in 0..d {
                            out[c] = out[c] + g.data()[r * d + c] * av.data()[r * d + c];
                        }
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), out));
                }
            }
            Op::MulCol(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d) = (av.rows(), av.cols());
                if self.needs_grad(*a) {
                    let mut out = g.data().to_vec();
                    for r in 0..n {
                        let s = bv.data()[r];
                        for c in 0..d {
                            out[r * d + c] = out[r * d + c] * s;
                        }
                    }
                    self.acc(grads, *a, Tensor::new(av.shape().to_vec(), out));
                }
                if self.needs_grad(*b) {
                    let mut out = vec![T::ZERO; n];
                    for r in 0..n {
                        for c in 0..d {
                            out[r] = out[r] + g.data()[r * d + c] * av.data()[r * d + c];
                        }
                    }
                    self.acc(grads, *b, Tensor::new(bv.shape().to_vec(), out));
                }
            }
            Op::BroadcastRow(a, n) => {
                let av = self.value(*a);
                let d = av.numel();
                let mut out = vec![T::ZERO; d];
                for r in 0..*n {
                    for c in 0..d {
                        out[c] = out[c] + g.data()[r * d + c];
                    }
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), out));
            }
            Op::Matmul(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatmulNT(a, b) => {
                if self.needs_grad(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.needs_grad(*b) {
                    self.acc(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Gelu(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gg, x| gg * gelu_bwd(x)));
            }
            Op::Silu(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gg, x| gg * silu_bwd(x)));
            }
            Op::Exp(a) => {
                self.acc(grads, *a, g.zip_map(&node.value, |gg, y| gg * y));
            }
            Op::Sqrt(a) => {
                let half = T::from_f64(0.5);
                self.acc(
                    grads,
                    *a,
                    g.zip_map(&node.value, |gg, y| gg * half / y),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (n, d) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gain).data();
                if self.needs_grad(*bias) {
                    self.acc(grads, *bias, col_sum_into_shape(g, self.value(*bias).shape()));
                }
                if self.needs_grad(*gain) {
                    let gx = g.zip_map(xhat, |gg, xh| gg * xh);
                    self.acc(grads, *gain, col_sum_into_shape(&gx, self.value(*gain).shape()));
                }
                if self.needs_grad(*x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let mut out = vec![T::ZERO; n * d];
                    for r in 0..n {
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for c in 0..d {
                            let dxh = g.data()[r * d + c] * gv[c];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xhat.data()[r * d + c];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        for c in 0..d {
                            let dxh = g.data()[r * d + c] * gv[c];
                            out[r * d + c] =
                                rstd[r] * (dxh - m1 - xhat.data()[r * d + c] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(vec![n, d], out));
                }
            }
            Op::Attention { q, k, v, n_heads } => {
                self.attention_backward(*q, *k, *v, *n_heads, g, grads);
            }
            Op::ConcatRows(a, b) => {
                let (na, d) = (self.value(*a).rows(), self.value(*a).cols());
                let nb = self.value(*b).rows();
                if self.needs_grad(*a) {
                    self.acc(
                        grads,
                        *a,
                        Tensor::new(vec![na, d], g.data()[..na * d].to_vec()),
                    );
                }
                if self.needs_grad(*b) {
                    self.acc(
                        grads,
                        *b,
                        Tensor::new(vec![nb, d], g.data()[na * d..].to_vec()),
                    );
                }
            }
            Op::SliceRows(a, start, end) => {
                let av = self.value(*a);
                let (n, d) = (av.rows(), av.cols());
                let mut out = vec![T::ZERO; n * d];
                out[start * d..end * d].copy_from_slice(g.data());
                self.acc(grads, *a, Tensor::new(vec![n, d], out));
            }
            Op::IndexRows(a, rows) => {
                let av = self.value(*a);
                let (n, d) = (av.rows(), av.cols());
                let mut out = vec![T::ZERO; n * d];
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..d {
                        out[src * d + c] = out[src * d + c] + g.data()[r * d + c];
                    }
                }
                self.acc(grads, *a, Tensor::new(vec![n, d], out));
            }
            Op::Reindex(a, map) => {
                let av = self.value(*a);
                let mut out = vec![T::ZERO; av.numel()];
                for (o, &src) in map.iter().enumerate() {
                    if src != REINDEX_ZERO {
                        out[src] = out[src] + g.data()[o];
                    }
                }
                self.acc(grads, *a, Tensor::new(av.shape().to_vec(), out));
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let (n, d) = (av.rows(), av.cols());
                let mut out = vec![T::ZERO; n * d];
                for r in 0..n {
                    for c in 0..d {
                        out[r * d + c] = g.data()[r];
                    }
                }
                self.acc(grads, *a, Tensor::new(vec![n, d], out));
            }
            Op::RowMax(a, arg) | Op::RowMin(a, arg) => {
                let av = self.value(*a);
                let (n, d) = (av.rows(), av.cols());
                let mut out = vec![T::ZERO; n * d];
                for r in 0..n {
                    out[r * d + arg[r]] = g.data()[r];
                }
                self.acc(grads, *a, Tensor::new(vec![n, d], out));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let c = g.item() * T::from_f64(1.0 / av.numel() as f64);
                self.acc(grads, *a, Tensor::full(av.shape().to_vec(), c));
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, Tensor::full(av.shape().to_vec(), g.item()));
            }
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, d) = (self.value(q).rows(), self.value(q).cols());
        let dh = d / n_heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![T::ZERO; n * d];
        let mut gk = vec![T::ZERO; n * d];
        let mut gv = vec![T::ZERO; n * d];
        let mut p = vec![T::ZERO; n * n];
        let mut gp = vec![T::ZERO; n * n];
        for h in 0..n_heads {
            let off = h * dh;
            unsafe {
                // Recompute P = softmax(scale * Qh Kh^T).
                T::gemm(
                    n,
                    dh,
                    n,
                    scale,
                    qd.as_ptr().add(off),
                    d as isize,
                    1,
                    kd.as_ptr().add(off),
                    1,
                    d as isize,
                    T::ZERO,
                    p.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            softmax_rows(&mut p, n, n);
            unsafe {
                // gVh += P^T gOh
                T::gemm(
                    n,
                    n,
                    dh,
                    T::ONE,
                    p.as_ptr(),
                    1,
                    n as isize,
                    g.data().as_ptr().add(off),
                    d as isize,
                    1,
                    T::ONE,
                    gv.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
                // gP = gOh Vh^T
                T::gemm(
                    n,
                    dh,
                    n,
                    T::ONE,
                    g.data().as_ptr().add(off),
                    d as isize,
                    1,
                    vd.as_ptr().add(off),
                    1,
                    d as isize,
                    T::ZERO,
                    gp.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            // gS = P * (gP - rowdot(gP, P)), reusing the gp buffer.
            for r in 0..n {
                let row = r * n;
                let mut dot = T::ZERO;
                for c in 0..n {
                    dot = dot + gp[row + c] * p[row + c];
                }
                for c in 0..n {
                    gp[row + c] = p[row + c] * (gp[row + c] - dot);
                }
            }
            unsafe {
                // gQh += scale * gS Kh
                T::gemm(
                    n,
                    n,
                    dh,
                    scale,
                    gp.as_ptr(),
                    n as isize,
                    1,
                    kd.as_ptr().add(off),
                    d as isize,
                    1,
                    T::ONE,
                    gq.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
                // gKh += scale * gS^T Qh
                T::gemm(
                    n,
                    n,
                    dh,
                    scale,
                    gp.as_ptr(),
                    1,
                    n as isize,
                    qd.as_ptr().add(off),
                    d as isize,
                    1,
                    T::ONE,
                    gk.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
            }
        }
        if self.needs_grad(q) {
            self.acc(grads, q, Tensor::new(vec![n, d], gq));
        }
        if self.needs_grad(k) {
            self.acc(grads, k, Tensor::new(vec![n, d], gk));
        }
        if self.needs_grad(v) {
            self.acc(grads, v, Tensor::new(vec![n, d], gv));
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], target: Var, delta: Tensor<T>) {
        if !self.needs_grad(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                let data = existing.make_mut();
                for (d, s) in data.iter_mut().zip(delta.data()) {
                    *d = *d + *s;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

fn row_extreme<T: Real>(a: &Tensor<T>, want_max: bool) -> (Tensor<T>, Vec<usize>) {
    let (n, d) = (a.rows(), a.cols());
    assert!(d > 0);
    let mut vals = vec![T::ZERO; n];
    let mut args = vec![0usize; n];
    for r in 0..n {
        let row = &a.data()[r * d..(r + 1) * d];
        let mut best = row[0];
        let mut bi = 0;
        for (c, &x) in row.iter().enumerate().skip(1) {
            let better = if want_max { x > best } else { x < best };
            if better {
                best = x;
                bi = c;
            }
        }
        vals[r] = best;
        args[r] = bi;
    }
    (Tensor::new(vec![n, 1], vals), args)
}

fn col_sum_into_shape<T: Real>(g: &Tensor<T>, target_shape: &[usize]) -> Tensor<T> {
    let d = *g.shape().last().unwrap();
    let n = g.numel() / d;
    let mut out = vec![T::ZERO; d];
    for r in 0..n {
        for c in 0..d {
            out[c] = out[c] + g.data()[r * d + c];
        }
    }
    Tensor::new(target_shape.to_vec(), out)
}

fn softmax_rows<T: Real>(buf: &mut [T], n: usize, m: usize) {
    for r in 0..n {
        let row = &mut buf[r * m..(r + 1) * m];
        let mut mx = row[0];
        for &x in row.iter() {
            if x > mx {
                mx = x;
            }
        }
        let mut sum = T::ZERO;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum = sum + *x;
        }
        let inv = T::ONE / sum;
        for x in row.iter_mut() {
            *x = *x * inv;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let xf = x.to_f64();
    let inner = GELU_C * (xf + GELU_A * xf * xf * xf);
    T::from_f64(0.5 * xf * (1.0 + inner.tanh()))
}

fn gelu_bwd<T: Real>(x: T) -> T {
    let xf = x.to_f64();
    let inner = GELU_C * (xf + GELU_A * xf * xf * xf);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * xf * xf);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * d_inner)
}

fn silu_fwd<T: Real>(x: T) -> T {
    let xf = x.to_f64();
    let s = 1.0 / (1.0 + (-xf).exp());
    T::from_f64(xf * s)
}

fn silu_bwd<T: Real>(x: T) -> T {
    let xf = x.to_f64();
    let s = 1.0 / (1.0 + (-xf).exp());
    T::from_f64(s * (1.0 + xf * (1.0 - s)))
}

/// Central-difference gradient checking, shared by unit tests and the
/// acceptance suite.
pub mod fdcheck {
    use super::*;

    /// Central difference of `eval` w.r.t. one element of a leaf tensor.
    pub fn central_diff<F>(base: &Tensor<f64>, idx: usize, h: f64, mut eval: F) -> f64
    where
        F: FnMut(&Tensor<f64>) -> f64,
    {
        let mut plus = base.clone();
        plus.make_mut()[idx] += h;
        let mut minus = base.clone();
        minus.make_mut()[idx] -= h;
        (eval(&plus) - eval(&minus)) / (2.0 * h)
    }

    /// Max relative error between analytic and numeric gradients over every
    /// element of a leaf input, for a scalar-valued graph builder.
    pub fn max_rel_err<F>(input: &Tensor<f64>, h: f64, build: F) -> f64
    where
        F: Fn(&mut Graph<f64>, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).expect("input participates in loss").clone();
        let mut worst = 0.0f64;
        for idx in 0..input.numel() {
            let numeric = central_diff(input, idx, h, |t| {
                let mut g = Graph::new();
                let x = g.leaf(t.clone());
                let loss = build(&mut g, x);
                g.value(loss).item()
            });
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::fdcheck::max_rel_err;
    use super::*;
    use crate::rng::SeedRng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut SeedRng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = SeedRng::from_seed(1);
        let x = rand_tensor(vec![3, 4], &mut rng);
        let other = rand_tensor(vec![3, 4], &mut rng);
        let cases: Vec<Box<dyn Fn(&mut Graph<f64>, Var) -> Var>> = vec![
            Box::new({
                let o = other.clone();
                move |g, x| {
                    let c = g.constant(o.clone());
                    let y = g.add(x, c);
                    g.mean_all(y)
                }
            }),
            Box::new({
                let o = other.clone();
                move |g, x| {
                    let c = g.constant(o.clone());
                    let y = g.sub(c, x);
                    let y = g.square(y);
                    g.mean_all(y)
                }
            }),
            Box::new({
                let o = other.clone();
                move |g, x| {
                    let c = g.constant(o.clone());
                    let y = g.mul(x, c);
                    g.sum_all(y)
                }
            }),
            Box::new(|g, x| {
                let y = g.scale(x, -1.7);
                let y = g.add_const(y, 0.3);
                let y = g.gelu(y);
                g.mean_all(y)
            }),
            Box::new(|g, x| {
                let y = g.silu(x);
                g.mean_all(y)
            }),
            Box::new(|g, x| {
                let y = g.exp(x);
                g.mean_all(y)
            }),
            Box::new(|g, x| {
                let y = g.square(x);
                let y = g.add_const(y, 0.5);
                let y = g.sqrt(y);
                g.mean_all(y)
            }),
        ];
        for (i, case) in cases.iter().enumerate() {
            let err = max_rel_err(&x, 1e-6, case);
            assert!(err < TOL, "case {i}: rel err {err}");
        }
    }

    #[test]
    fn grad_div() {
        let mut rng = SeedRng::from_seed(2);
        let x = rand_tensor(vec![2, 3], &mut rng).map(|v| v + 3.0);
        let num = rand_tensor(vec![2, 3], &mut rng);
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let n = g.constant(num.clone());
            let y = g.div(n, x);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        // and w.r.t. the numerator
        let err2 = max_rel_err(&num, 1e-6, |g, n| {
            let d = g.constant(x.clone());
            let y = g.div(n, d);
            g.mean_all(y)
        });
        assert!(err2 < TOL, "{err2}");
    }

    #[test]
    fn grad_broadcast_and_row_ops() {
        let mut rng = SeedRng::from_seed(3);
        let x = rand_tensor(vec![4, 3], &mut rng);
        let row = rand_tensor(vec![3], &mut rng);
        let col = rand_tensor(vec![4, 1], &mut rng);
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let r = g.constant(row.clone());
            let y = g.add_row(x, r);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&row, 1e-6, |g, r| {
            let x = g.constant(x.clone());
            let y = g.mul_row(x, r);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&col, 1e-6, |g, c| {
            let x = g.constant(x.clone());
            let y = g.mul_col(x, c);
            let y = g.gelu(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&row, 1e-6, |g, r| {
            let y = g.broadcast_row(r, 5);
            let y = g.square(y);
            g.sum_all(y)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_matmul_variants() {
        let mut rng = SeedRng::from_seed(4);
        let a = rand_tensor(vec![3, 4], &mut rng);
        let b = rand_tensor(vec![4, 2], &mut rng);
        let bt = rand_tensor(vec![2, 4], &mut rng);
        let err = max_rel_err(&a, 1e-6, |g, a| {
            let b = g.constant(b.clone());
            let y = g.matmul(a, b);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&b, 1e-6, |g, b| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, b);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&bt, 1e-6, |g, bt| {
            let a = g.constant(a.clone());
            let y = g.matmul_nt(a, bt);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&a, 1e-6, |g, a| {
            let bt = g.constant(bt.clone());
            let y = g.matmul_nt(a, bt);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = SeedRng::from_seed(5);
        let x = rand_tensor(vec![3, 6], &mut rng);
        let gain = rand_tensor(vec![6], &mut rng);
        let bias = rand_tensor(vec![6], &mut rng);
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let ga = g.constant(gain.clone());
            let bi = g.constant(bias.clone());
            let y = g.layer_norm(x, ga, bi, 1e-6);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < 1e-5, "x grad: {err}");
        let err = max_rel_err(&gain, 1e-6, |g, ga| {
            let x = g.constant(x.clone());
            let bi = g.constant(bias.clone());
            let y = g.layer_norm(x, ga, bi, 1e-6);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "gain grad: {err}");
        let err = max_rel_err(&bias, 1e-6, |g, bi| {
            let x = g.constant(x.clone());
            let ga = g.constant(gain.clone());
            let y = g.layer_norm(x, ga, bi, 1e-6);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "bias grad: {err}");
    }

    #[test]
    fn grad_attention() {
        let mut rng = SeedRng::from_seed(6);
        let q = rand_tensor(vec![5, 8], &mut rng);
        let k = rand_tensor(vec![5, 8], &mut rng);
        let v = rand_tensor(vec![5, 8], &mut rng);
        for heads in [1usize, 2, 4] {
            let err = max_rel_err(&q, 1e-6, |g, q| {
                let k = g.constant(k.clone());
                let v = g.constant(v.clone());
                let y = g.attention(q, k, v, heads);
                let y = g.square(y);
                g.mean_all(y)
            });
            assert!(err < 1e-5, "q grad heads={heads}: {err}");
            let err = max_rel_err(&k, 1e-6, |g, k| {
                let q = g.constant(q.clone());
                let v = g.constant(v.clone());
                let y = g.attention(q, k, v, heads);
                let y = g.square(y);
                g.mean_all(y)
            });
            assert!(err < 1e-5, "k grad heads={heads}: {err}");
            let err = max_rel_err(&v, 1e-6, |g, v| {
                let q = g.constant(q.clone());
                let k = g.constant(k.clone());
                let y = g.attention(q, k, v, heads);
                let y = g.square(y);
                g.mean_all(y)
            });
            assert!(err < 1e-5, "v grad heads={heads}: {err}");
        }
    }

    #[test]
    fn grad_shape_ops() {
        let mut rng = SeedRng::from_seed(7);
        let x = rand_tensor(vec![4, 3], &mut rng);
        let other = rand_tensor(vec![2, 3], &mut rng);
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let o = g.constant(other.clone());
            let y = g.concat_rows(x, o);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let y = g.slice_rows(x, 1, 3);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let rows = Arc::new(vec![2usize, 0, 2, 1]);
        let err = max_rel_err(&x, 1e-6, move |g, x| {
            let y = g.index_rows(x, rows.clone());
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let map = Arc::new(vec![5usize, 0, REINDEX_ZERO, 11, 3, 3]);
        let err = max_rel_err(&x, 1e-6, move |g, x| {
            let y = g.reindex(x, map.clone(), vec![3, 2]);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn grad_reductions() {
        let mut rng = SeedRng::from_seed(8);
        let x = rand_tensor(vec![4, 5], &mut rng);
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let y = g.row_sum(x);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let y = g.row_max(x);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
        let err = max_rel_err(&x, 1e-6, |g, x| {
            let y = g.row_min(x);
            let y = g.square(y);
            g.mean_all(y)
        });
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn row_extreme_breaks_ties_by_lowest_index() {
        let t = Tensor::<f64>::new(vec![1, 4], vec![2.0, 7.0, 7.0, 1.0]);
        let (_, arg) = row_extreme(&t, true);
        assert_eq!(arg, vec![1]);
        let t = Tensor::<f64>::new(vec![1, 4], vec![3.0, 1.0, 1.0, 5.0]);
        let (_, arg) = row_extreme(&t, false);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn mul_accumulates_grad_when_input_repeated() {
        // d/dx mean(x*x) = 2x/n
        let x = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = g.mul(xv, xv);
        let loss = g.mean_all(y);
        let grads = g.backward(loss);
        let gx = grads.get(xv).unwrap();
        for (i, &v) in x.data().iter().enumerate() {
            assert!((gx.data()[i] - 2.0 * v / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(c, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }
}
