//! Parameter storage and the small layer library the networks are built from.
//!
//! Parameters live in a flat, name-indexed `ParamSet`; layers hold `ParamId`
//! handles plus hyperparameters and build their forward computation on a
//! `Tape`. Initialization draws from a single seeded stream in allocation
//! order, so a `(config, seed)` pair always produces bit-identical weights.

use crate::real::Real;
use crate::tape::{ConvGeom, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Handle to one named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

struct Entry<T: Real> {
    name: String,
    value: Arc<ArrayD<T>>,
}

/// Flat store of all learnable tensors of a model.
pub struct ParamSet<T: Real> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.id_by_name(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn arc(&self, id: ParamId) -> Arc<ArrayD<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replace a parameter tensor wholesale (shape must match).
    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "parameter shape change for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value);
    }

    /// In-place mutation; clones only if a tape still holds the tensor.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut ArrayD<T>)) {
        f(Arc::make_mut(&mut self.entries[id.0].value));
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Seeded initializer that allocates parameters into a `ParamSet`.
pub struct ParamBuilder<'a, T: Real> {
    set: &'a mut ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, seed: u64) -> Self {
        ParamBuilder {
            set,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// U(-bound, bound) with bound = sqrt(1 / fan_in).
    pub fn fan_in_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = T::from_f((1.0 / fan_in as f64).sqrt());
        let rng = &mut self.rng;
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || T::uniform(rng, -bound, bound));
        self.set.add(name, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let s = T::from_f(std);
        let rng = &mut self.rng;
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || T::standard_normal(rng) * s);
        self.set.add(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.set.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.set.add(name, ArrayD::ones(IxDyn(shape)))
    }
}

/// Overwrite every parameter with N(0, std) noise; gradient-check harnesses
/// use this so zero-initialized tensors do not hide wiring mistakes.
pub fn randomize_params<T: Real>(params: &mut ParamSet<T>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = T::from_f(std);
    for id in params.ids().collect::<Vec<_>>() {
        params.update(id, |v| {
            v.mapv_inplace(|_| T::standard_normal(&mut rng) * s);
        });
    }
}

const NORM_EPS: f64 = 1e-5;

/// Fully connected layer: `[N, in] -> [N, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = pb.fan_in_uniform(&format!("{name}.weight"), &[out_dim, in_dim], in_dim);
        let b = pb.zeros(&format!("{name}.bias"), &[out_dim]);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialized variant for the tail of residual branches.
    pub fn new_zero<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let w = pb.zeros(&format!("{name}.weight"), &[out_dim, in_dim]);
        let b = pb.zeros(&format!("{name}.bias"), &[out_dim]);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Var {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let y = tape.matmul(x, w, false, true);
        tape.add_row_bias(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// 2-D convolution over a single `[C, H, W]` sample.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = pb.fan_in_uniform(
            &format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            fan_in,
        );
        let b = pb.zeros(&format!("{name}.bias"), &[cout]);
        Conv2d {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_zero<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Self {
        let w = pb.zeros(&format!("{name}.weight"), &[cout, cin, kernel, kernel]);
        let b = pb.zeros(&format!("{name}.bias"), &[cout]);
        Conv2d {
            w,
            b,
            cin,
            cout,
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Var {
        let xsh = tape.shape(x);
        assert_eq!(xsh.len(), 3, "conv expects [C,H,W]");
        assert_eq!(xsh[0], self.cin, "conv input channels mismatch");
        let geom = ConvGeom {
            in_ch: self.cin,
            in_h: xsh[1],
            in_w: xsh[2],
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            dilation: self.dilation,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cols = tape.im2col(x, geom);
        let w = tape.param(params, self.w);
        let wflat = tape.reshape(w, &[self.cout, self.cin * self.kernel * self.kernel]);
        let out = tape.matmul(wflat, cols, false, false);
        let b = tape.param(params, self.b);
        let out = tape.add_col_bias(out, b);
        tape.reshape(out, &[self.cout, oh, ow])
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel + self.cout
    }
}

/// Group normalization over `[C, H, W]`.
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        groups: usize,
    ) -> Self {
        assert_eq!(channels % groups, 0, "groups must divide channels");
        let gamma = pb.ones(&format!("{name}.gamma"), &[channels]);
        let beta = pb.zeros(&format!("{name}.beta"), &[channels]);
        GroupNorm {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Var {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.group_norm(x, gamma, beta, self.groups, T::from_f(NORM_EPS))
    }
}

/// Per-token layer normalization over `[N, D]`.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let gamma = pb.ones(&format!("{name}.gamma"), &[dim]);
        let beta = pb.zeros(&format!("{name}.beta"), &[dim]);
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Var {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.layer_norm(x, gamma, beta, T::from_f(NORM_EPS))
    }
}

/// Multi-head attention over token matrices `[N, D]`.
///
/// Queries come from the first argument, keys and values from the second;
/// self-attention passes the same tokens twice.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// `zero_out` zero-initializes the output projection, which makes a
    /// residual attention block start as the identity.
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        assert_eq!(dim % heads, 0, "heads must divide channel dim");
        let wq = Linear::new(pb, &format!("{name}.wq"), dim, dim);
        let wk = Linear::new(pb, &format!("{name}.wk"), dim, dim);
        let wv = Linear::new(pb, &format!("{name}.wv"), dim, dim);
        let wo = if zero_out {
            Linear::new_zero(pb, &format!("{name}.wo"), dim, dim)
        } else {
            Linear::new(pb, &format!("{name}.wo"), dim, dim)
        };
        MultiHeadAttention {
            wq,
            wk,
            wv,
            wo,
            heads,
            dim,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        q_tokens: Var,
        kv_tokens: Var,
    ) -> Var {
        self.forward_with_probs(tape, params, q_tokens, kv_tokens).0
    }

    /// Also returns the per-head attention matrices (rows sum to one).
    pub fn forward_with_probs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        q_tokens: Var,
        kv_tokens: Var,
    ) -> (Var, Vec<Var>) {
        let d_head = self.dim / self.heads;
        let scale = T::from_f(1.0 / (d_head as f64).sqrt());
        let q = self.wq.forward(tape, params, q_tokens);
        let k = self.wk.forward(tape, params, kv_tokens);
        let v = self.wv.forward(tape, params, kv_tokens);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, 1, h * d_head, d_head);
            let kh = tape.slice(k, 1, h * d_head, d_head);
            let vh = tape.slice(v, 1, h * d_head, d_head);
            let scores = tape.matmul(qh, kh, false, true);
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax(scaled);
            probs.push(attn);
            outs.push(tape.matmul(attn, vh, false, false));
        }
        let merged = tape.concat(&outs, 1);
        (self.wo.forward(tape, params, merged), probs)
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count()
            + self.wk.param_count()
            + self.wv.param_count()
            + self.wo.param_count()
    }
}

/// Seeded RNG for weight noise in tests and warm starts.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw a `[C, H, W]` tensor of standard normal noise.
pub fn normal_array<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::standard_normal(rng))
}

/// Draw a `[C, H, W]` tensor uniform in [lo, hi).
pub fn uniform_array<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> ArrayD<T> {
    let (lo, hi) = (T::from_f(lo), T::from_f(hi));
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::uniform(rng, lo, hi))
}
