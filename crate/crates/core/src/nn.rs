//! Parameter store, transformer building blocks, sinusoidal embeddings and
//! the AdamW optimizer used by every trainable model in this crate.

use crate::graph::{Gradients, Graph, Var};
use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};
use std::collections::HashMap;

/// Handle into a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter store. Names are stable across runs and used as checkpoint
/// blob keys, so insertion order is the only thing allowed to vary.
#[derive(Clone)]
pub struct Params<T: Real> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter shape change"
        );
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.leaf_param(self.get(id).clone(), id.0)
    }

    pub fn bind_frozen(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.frozen_param(self.get(id).clone(), id.0)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn get_element(&self, id: ParamId, idx: usize) -> T {
        self.entries[id.0].value.data()[idx]
    }

    pub fn nudge_element(&mut self, id: ParamId, idx: usize, delta: f64) {
        let t = &mut self.entries[id.0].value;
        let d = t.make_mut();
        d[idx] = T::from_f64(d[idx].to_f64() + delta);
    }
}

// ---- initializers ----

pub fn normal_init<T: Real>(shape: Vec<usize>, std: f64, rng: &mut SeedRng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape, data)
}

pub fn lecun_init<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut SeedRng) -> Tensor<T> {
    normal_init(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

// ---- gradient accumulation ----

/// Per-parameter gradient accumulator; micro-batches add into it in a fixed
/// order so training is deterministic.
pub struct GradStore<T: Real> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> GradStore<T> {
    pub fn new(n_params: usize) -> Self {
        GradStore {
            slots: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn clear(&mut self) {
        for s in &mut self.slots {
            *s = None;
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    /// Add every parameter gradient recorded in `graph` into this store.
    pub fn add_from_graph(&mut self, graph: &Graph<T>, grads: &Gradients<T>) {
        for (pid, var) in graph.param_bindings() {
            if let Some(g) = grads.get(var) {
                match &mut self.slots[pid] {
                    Some(acc) => {
                        let d = acc.make_mut();
                        for (a, b) in d.iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for s in self.slots.iter_mut().flatten() {
            for x in s.make_mut() {
                *x = *x * c;
            }
        }
    }

    /// L2 norm over the concatenation of all gradients, in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for s in self.slots.iter().flatten() {
            for x in s.data() {
                let v = x.to_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Scale gradients so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(T::from_f64(max_norm / norm));
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|t| t.all_finite())
    }
}

// ---- optimizer ----

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay and bias correction.
pub struct AdamW<T: Real> {
    pub cfg: AdamConfig,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    step_count: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        AdamW {
            cfg,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter that has a gradient and is enabled in
    /// `trainable` (None = all trainable).
    pub fn step(&mut self, params: &mut Params<T>, grads: &GradStore<T>, trainable: Option<&[bool]>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let bc1 = T::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(t)));
        let bc2 = T::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(t)));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.lr * self.cfg.weight_decay);
        for i in 0..params.len() {
            if let Some(mask) = trainable {
                if !mask[i] {
                    continue;
                }
            }
            let Some(g) = grads.get(ParamId(i)) else {
                continue;
            };
            let id = ParamId(i);
            if self.m[i].is_none() {
                self.m[i] = Some(Tensor::zeros(g.shape().to_vec()));
                self.v[i] = Some(Tensor::zeros(g.shape().to_vec()));
            }
            let m = self.m[i].as_mut().unwrap().make_mut();
            let v = self.v[i].as_mut().unwrap().make_mut();
            let mut p = params.get(id).clone();
            let pd = p.make_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = b1 * m[j] + one_m_b1 * gj;
                v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                let mhat = m[j] * bc1;
                let vhat = v[j] * bc2;
                pd[j] = pd[j] - lr * mhat / (vhat.sqrt() + eps) - wd * pd[j];
            }
            params.set(id, p);
        }
    }

    pub fn moment_blobs(&self, params: &Params<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for i in 0..self.m.len() {
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                let name = params.name(ParamId(i));
                out.push((format!("adam.m.{name}"), m.clone()));
                out.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        out
    }

    pub fn restore_moment(&mut self, params: &Params<T>, blob_name: &str, value: Tensor<T>) -> bool {
        let (which, pname) = if let Some(rest) = blob_name.strip_prefix("adam.m.") {
            (0, rest)
        } else if let Some(rest) = blob_name.strip_prefix("adam.v.") {
            (1, rest)
        } else {
            return false;
        };
        let Some(id) = params.id_of(pname) else {
            return false;
        };
        if which == 0 {
            self.m[id.0] = Some(value);
        } else {
            self.v[id.0] = Some(value);
        }
        true
    }

    pub fn restore_step_count(&mut self, t: u64) {
        self.step_count = t;
    }
}

// ---- layers ----

#[derive(Clone, Copy)]
pub enum Init {
    /// N(0, 1/sqrt(fan_in))
    Lecun,
    /// N(0, std)
    Std(f64),
    Zero,
}

pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut SeedRng,
    ) -> Self {
        let w = match init {
            Init::Lecun => lecun_init(vec![d_in, d_out], d_in, rng),
            Init::Std(s) => normal_init(vec![d_in, d_out], s, rng),
            Init::Zero => Tensor::zeros(vec![d_in, d_out]),
        };
        let w = params.add(format!("{name}.w"), w);
        let b = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, params: &Params<T>, x: Var, frozen: bool) -> Var {
        let w = if frozen {
            params.bind_frozen(g, self.w)
        } else {
            params.bind(g, self.w)
        };
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bv = if frozen {
                    params.bind_frozen(g, b)
                } else {
                    params.bind(g, b)
                };
                g.add_row(y, bv)
            }
            None => y,
        }
    }
}

pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init<T: Real>(params: &mut Params<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.g"), Tensor::full(vec![dim], T::ONE)),
            bias: params.add(format!("{name}.b"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, params: &Params<T>, x: Var, frozen: bool) -> Var {
        let (ga, bi) = if frozen {
            (
                params.bind_frozen(g, self.gain),
                params.bind_frozen(g, self.bias),
            )
        } else {
            (params.bind(g, self.gain), params.bind(g, self.bias))
        };
        g.layer_norm(x, ga, bi, T::from_f64(1e-6))
    }
}

pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl Mha {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut SeedRng,
    ) -> Self {
        Mha {
            wq: Linear::init(params, &format!("{name}.q"), dim, dim, true, Init::Lecun, rng),
            wk: Linear::init(params, &format!("{name}.k"), dim, dim, true, Init::Lecun, rng),
            wv: Linear::init(params, &format!("{name}.v"), dim, dim, true, Init::Lecun, rng),
            wo: Linear::init(params, &format!("{name}.o"), dim, dim, true, Init::Lecun, rng),
            n_heads,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, params: &Params<T>, x: Var, frozen: bool) -> Var {
        let q = self.wq.apply(g, params, x, frozen);
        let k = self.wk.apply(g, params, x, frozen);
        let v = self.wv.apply(g, params, x, frozen);
        let a = g.attention(q, k, v, self.n_heads);
        self.wo.apply(g, params, a, frozen)
    }
}

pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<T: Real>(params: &mut Params<T>, name: &str, dim: usize, rng: &mut SeedRng) -> Self {
        Mlp {
            fc1: Linear::init(params, &format!("{name}.fc1"), dim, 4 * dim, true, Init::Lecun, rng),
            fc2: Linear::init(params, &format!("{name}.fc2"), 4 * dim, dim, true, Init::Lecun, rng),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, params: &Params<T>, x: Var, frozen: bool) -> Var {
        let h = self.fc1.apply(g, params, x, frozen);
        let h = g.gelu(h);
        self.fc2.apply(g, params, h, frozen)
    }
}

/// Plain pre-norm transformer block (encoder side).
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut SeedRng,
    ) -> Self {
        Block {
            ln1: LayerNorm::init(params, &format!("{name}.ln1"), dim),
            attn: Mha::init(params, &format!("{name}.attn"), dim, n_heads, rng),
            ln2: LayerNorm::init(params, &format!("{name}.ln2"), dim),
            mlp: Mlp::init(params, &format!("{name}.mlp"), dim, rng),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, params: &Params<T>, x: Var, frozen: bool) -> Var {
        let h = self.ln1.apply(g, params, x, frozen);
        let h = self.attn.apply(g, params, h, frozen);
        let x = g.add(x, h);
        let h = self.ln2.apply(g, params, x, frozen);
        let h = self.mlp.apply(g, params, h, frozen);
        g.add(x, h)
    }
}

/// Pre-norm block with zero-initialized shift/scale/gate modulation driven by
/// a conditioning vector. Rows `[mod_start, N)` are modulated and gated; rows
/// before `mod_start` take the plain pre-norm path through the same attention.
pub struct ModulatedBlock {
    pub ln1: LayerNorm,
    pub attn: Mha,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub mod_head: Linear,
}

impl ModulatedBlock {
    pub fn init<T: Real>(
        params: &mut Params<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut SeedRng,
    ) -> Self {
        ModulatedBlock {
            ln1: LayerNorm::init(params, &format!("{name}.ln1"), dim),
            attn: Mha::init(params, &format!("{name}.attn"), dim, n_heads, rng),
            ln2: LayerNorm::init(params, &format!("{name}.ln2"), dim),
            mlp: Mlp::init(params, &format!("{name}.mlp"), dim, rng),
            mod_head: Linear::init(params, &format!("{name}.mod"), dim, 6 * dim, true, Init::Zero, rng),
        }
    }

    /// `t_emb` is a [1, dim] conditioning vector (already embedded timestep).
    pub fn apply<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        x: Var,
        t_emb: Var,
        mod_start: usize,
        frozen: bool,
    ) -> Var {
        let dim = self.ln1_dim(g, x);
        let n = g.value(x).rows();
        assert!(mod_start <= n);
        let act = g.silu(t_emb);
        let chunks = self.mod_head.apply(g, params, act, frozen);
        let chunks = chunks.reshaped(g, vec![6, dim]);
        let shift1 = g.slice_rows(chunks, 0, 1);
        let scale1 = g.slice_rows(chunks, 1, 2);
        let gate1 = g.slice_rows(chunks, 2, 3);
        let shift2 = g.slice_rows(chunks, 3, 4);
        let scale2 = g.slice_rows(chunks, 4, 5);
        let gate2 = g.slice_rows(chunks, 5, 6);

        let x = self.half(g, params, x, |g, p, h| self.attn.apply(g, p, h, frozen), &self.ln1, shift1, scale1, gate1, mod_start, frozen);
        self.half(g, params, x, |g, p, h| self.mlp.apply(g, p, h, frozen), &self.ln2, shift2, scale2, gate2, mod_start, frozen)
    }

    fn ln1_dim<T: Real>(&self, g: &Graph<T>, x: Var) -> usize {
        g.value(x).cols()
    }

    #[allow(clippy::too_many_arguments)]
    fn half<T: Real, F>(
        &self,
        g: &mut Graph<T>,
        params: &Params<T>,
        x: Var,
        f: F,
        ln: &LayerNorm,
        shift: Var,
        scale: Var,
        gate: Var,
        mod_start: usize,
        frozen: bool,
    ) -> Var
    where
        F: Fn(&mut Graph<T>, &Params<T>, Var) -> Var,
    {
        let n = g.value(x).rows();
        let h = ln.apply(g, params, x, frozen);
        let seq = if mod_start == 0 {
            let sc = g.add_const(scale, T::ONE);
            let m = g.mul_row(h, sc);
            g.add_row(m, shift)
        } else if mod_start == n {
            h
        } else {
            let plain = g.slice_rows(h, 0, mod_start);
            let tail = g.slice_rows(h, mod_start, n);
            let sc = g.add_const(scale, T::ONE);
            let m = g.mul_row(tail, sc);
            let m = g.add_row(m, shift);
            g.concat_rows(plain, m)
        };
        let out = f(g, params, seq);
        let gated = if mod_start == 0 {
            g.mul_row(out, gate)
        } else if mod_start == n {
            out
        } else {
            let plain = g.slice_rows(out, 0, mod_start);
            let tail = g.slice_rows(out, mod_start, n);
            let gt = g.mul_row(tail, gate);
            g.concat_rows(plain, gt)
        };
        g.add(x, gated)
    }
}

impl Var {
    /// Reshape helper that routes through the graph (shares storage).
    pub fn reshaped<T: Real>(self, g: &mut Graph<T>, shape: Vec<usize>) -> Var {
        let v = g.value(self).reshape(shape);
        // A reshape is an identity for autodiff purposes: represent it as
        // adding zero so gradients flow with the new shape recorded.
        let n: usize = v.numel();
        let map: Vec<usize> = (0..n).collect();
        g.reindex(self, std::sync::Arc::new(map), v.shape().to_vec())
    }
}

// ---- sinusoidal embeddings ----

/// Sin/cos features of a scalar position: first half sines, second half
/// cosines, geometric frequencies with max period `max_period`.
pub fn sincos_features(pos: f64, dim: usize, max_period: f64) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "sincos dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Timestep embedding for t in [0, 1]: the scalar is stretched by 1000 so the
/// frequency bank covers it well. Shape [1, dim].
pub fn timestep_embedding<T: Real>(t: f64, dim: usize) -> Tensor<T> {
    let v = sincos_features(t * 1000.0, dim, 10_000.0);
    Tensor::new(vec![1, dim], v.iter().map(|&x| T::from_f64(x)).collect())
}

/// Fixed positional table over a (nt, nh, nw) grid, row-major t→h→w ordering.
/// The feature dim is split into three even chunks, one per axis.
pub fn pos_embedding_3d<T: Real>(dim: usize, nt: usize, nh: usize, nw: usize) -> Tensor<T> {
    let d_axis = (dim / 3) & !1;
    let d_t = dim - 2 * d_axis;
    assert!(d_t >= 2 && d_t % 2 == 0, "pos dim split");
    let n = nt * nh * nw;
    let mut data = Vec::with_capacity(n * dim);
    for it in 0..nt {
        let et = sincos_features(it as f64, d_t, 10_000.0);
        for ih in 0..nh {
            let eh = sincos_features(ih as f64, d_axis, 10_000.0);
            for iw in 0..nw {
                let ew = sincos_features(iw as f64, d_axis, 10_000.0);
                data.extend(et.iter().map(|&x| T::from_f64(x)));
                data.extend(eh.iter().map(|&x| T::from_f64(x)));
                data.extend(ew.iter().map(|&x| T::from_f64(x)));
            }
        }
    }
    Tensor::new(vec![n, dim], data)
}

/// Fixed 1D positional table for sequence slots. Shape [n, dim].
pub fn pos_embedding_1d<T: Real>(dim: usize, n: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend(
            sincos_features(i as f64, dim, 10_000.0)
                .iter()
                .map(|&x| T::from_f64(x)),
        );
    }
    Tensor::new(vec![n, dim], data)
}
