//! Network building blocks: linear layers, multi-head attention,
//! pre-norm transformer blocks, time embeddings and the convolutional
//! silhouette encoder. Every block registers its parameters in a
//! [`ParamStore`] under a hierarchical name and runs its forward pass on a
//! [`Session`] tape.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, NodeId, Session};
use crate::scalar::{s, Scalar};
use crate::store::{ParamId, ParamStore};

/// Xavier-uniform initialization.
pub fn xavier<S: Scalar>(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Array2<S> {
    let limit = (6.0 / (d_in + d_out) as f64).sqrt();
    Array2::from_shape_fn((d_in, d_out), |_| s((rng.gen::<f64>() * 2.0 - 1.0) * limit))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(rng, d_in, d_out));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, d_out)));
        Linear { w, b }
    }

    /// Zero-initialized variant used where the block must start as an exact
    /// no-op (adapter output projections, velocity heads).
    pub fn zeroed<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), Array2::zeros((d_in, d_out)));
        let b = store.add(format!("{name}.b"), Array2::zeros((1, d_out)));
        Linear { w, b }
    }

    pub fn fwd<S: Scalar>(&self, sess: &mut Session<S>, x: NodeId) -> NodeId {
        let w = sess.p(self.w);
        let b = sess.p(self.b);
        let h = sess.tape.matmul(x, w);
        sess.tape.add_row(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::from_elem((1, d), S::one()));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, d)));
        LayerNorm { gain, bias }
    }

    pub fn fwd<S: Scalar>(&self, sess: &mut Session<S>, x: NodeId) -> NodeId {
        let g = sess.p(self.gain);
        let b = sess.p(self.bias);
        sess.tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention. Queries come from the first
/// argument, keys/values from the second; pass the same node for
/// self-attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        zero_out: bool,
    ) -> Self {
        assert!(d % heads == 0, "width {d} not divisible by heads {heads}");
        let wq = Linear::new(store, rng, &format!("{name}.wq"), d, d);
        let wk = Linear::new(store, rng, &format!("{name}.wk"), d, d);
        let wv = Linear::new(store, rng, &format!("{name}.wv"), d, d);
        let wo = if zero_out {
            Linear::zeroed(store, &format!("{name}.wo"), d, d)
        } else {
            Linear::new(store, rng, &format!("{name}.wo"), d, d)
        };
        Attention { wq, wk, wv, wo, heads, d }
    }

    pub fn fwd<S: Scalar>(&self, sess: &mut Session<S>, q_in: NodeId, kv_in: NodeId) -> NodeId {
        let q = self.wq.fwd(sess, q_in);
        let k = self.wk.fwd(sess, kv_in);
        let v = self.wv.fwd(sess, kv_in);
        let dh = self.d / self.heads;
        let scale = s::<S>(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = sess.tape.slice_cols(q, h * dh, dh);
            let kh = sess.tape.slice_cols(k, h * dh, dh);
            let vh = sess.tape.slice_cols(v, h * dh, dh);
            let kt = sess.tape.transpose(kh);
            let scores = sess.tape.matmul(qh, kt);
            let scaled = sess.tape.scale(scores, scale);
            let attn = sess.tape.softmax(scaled);
            outs.push(sess.tape.matmul(attn, vh));
        }
        let cat = sess.tape.concat_cols(&outs);
        self.wo.fwd(sess, cat)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn fwd<S: Scalar>(&self, sess: &mut Session<S>, x: NodeId) -> NodeId {
        let h = self.fc1.fwd(sess, x);
        let a = sess.tape.gelu(h);
        self.fc2.fwd(sess, a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
/// With a `kv` argument the attention is cross-attention from `x` to `kv`.
#[derive(Debug, Clone)]
pub struct Block {
    pub n1: LayerNorm,
    pub attn: Attention,
    pub n2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        Block {
            n1: LayerNorm::new(store, &format!("{name}.n1"), d),
            attn: Attention::new(store, rng, &format!("{name}.attn"), d, heads, false),
            n2: LayerNorm::new(store, &format!("{name}.n2"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, 4 * d),
        }
    }

    pub fn fwd_self<S: Scalar>(&self, sess: &mut Session<S>, x: NodeId) -> NodeId {
        let nx = self.n1.fwd(sess, x);
        let a = self.attn.fwd(sess, nx, nx);
        let x = sess.tape.add(x, a);
        let nx = self.n2.fwd(sess, x);
        let m = self.mlp.fwd(sess, nx);
        sess.tape.add(x, m)
    }

    pub fn fwd_cross<S: Scalar>(&self, sess: &mut Session<S>, x: NodeId, kv: NodeId) -> NodeId {
        let nx = self.n1.fwd(sess, x);
        let a = self.attn.fwd(sess, nx, kv);
        let x = sess.tape.add(x, a);
        let nx = self.n2.fwd(sess, x);
        let m = self.mlp.fwd(sess, nx);
        sess.tape.add(x, m)
    }
}

/// Sinusoidal features of a scalar time followed by a two-layer MLP, added
/// to every token of a branch.
#[derive(Debug, Clone)]
pub struct TimeEmbed {
    pub fc1: Linear,
    pub fc2: Linear,
    pub frequencies: usize,
}

impl TimeEmbed {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        frequencies: usize,
        d: usize,
    ) -> Self {
        TimeEmbed {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), 2 * frequencies, d),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), d, d),
            frequencies,
        }
    }

    pub fn features<S: Scalar>(&self, t: f64) -> Array2<S> {
        let mut row = Array2::zeros((1, 2 * self.frequencies));
        for k in 0..self.frequencies {
            let w = std::f64::consts::PI * (1u64 << k) as f64;
            row[(0, 2 * k)] = s((w * t).sin());
            row[(0, 2 * k + 1)] = s((w * t).cos());
        }
        row
    }

    pub fn fwd<S: Scalar>(&self, sess: &mut Session<S>, t: f64) -> NodeId {
        let feats = sess.tape.constant(self.features(t));
        let h = self.fc1.fwd(sess, feats);
        let a = sess.tape.gelu(h);
        self.fc2.fwd(sess, a)
    }
}

/// Four-layer strided convolutional encoder turning a 64x64 silhouette into
/// a fixed number of condition tokens (4x4 spatial cells).
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    layers: Vec<(ParamId, ParamId, ConvSpec)>,
    pub tokens: usize,
    pub d: usize,
}

impl ConvEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        image_hw: usize,
        d: usize,
    ) -> Self {
        assert!(image_hw % 16 == 0, "image side must be divisible by 16");
        let channels = [1usize, 8, 16, 32, d];
        let mut layers = Vec::new();
        let mut hw = image_hw;
        for i in 0..4 {
            let spec = ConvSpec {
                c_in: channels[i],
                h: hw,
                w: hw,
                c_out: channels[i + 1],
                k: 3,
                stride: 2,
                pad: 1,
            };
            let fan_in = spec.c_in * 9;
            let w = store.add(format!("{name}.conv{i}.w"), xavier(rng, spec.c_out, fan_in));
            let b = store.add(format!("{name}.conv{i}.b"), Array2::zeros((1, spec.c_out)));
            layers.push((w, b, spec));
            hw /= 2;
        }
        ConvEncoder { layers, tokens: hw * hw, d }
    }

    /// `image` is a (1, hw*hw) occupancy row; returns (tokens, d).
    pub fn fwd<S: Scalar>(&self, sess: &mut Session<S>, image: &Array2<S>) -> NodeId {
        let mut x = sess.tape.constant(image.clone());
        for (i, (w, b, spec)) in self.layers.iter().enumerate() {
            let wn = sess.p(*w);
            let bn = sess.p(*b);
            x = sess.tape.conv2d(x, wn, bn, *spec);
            if i + 1 < self.layers.len() {
                x = sess.tape.gelu(x);
            }
        }
        sess.tape.transpose(x)
    }
}

/// (n_groups x total_rows) matrix averaging each group of consecutive rows.
pub fn group_mean_matrix<S: Scalar>(group_sizes: &[usize]) -> Array2<S> {
    let total: usize = group_sizes.iter().sum();
    let mut m = Array2::zeros((group_sizes.len(), total));
    let mut offset = 0;
    for (g, &size) in group_sizes.iter().enumerate() {
        let w = s::<S>(1.0 / size as f64);
        for j in 0..size {
            m[(g, offset + j)] = w;
        }
        offset += size;
    }
    m
}

/// (total_rows x n_groups) matrix copying each group's row to its members.
pub fn group_broadcast_matrix<S: Scalar>(group_sizes: &[usize]) -> Array2<S> {
    let total: usize = group_sizes.iter().sum();
    let mut m = Array2::zeros((total, group_sizes.len()));
    let mut offset = 0;
    for (g, &size) in group_sizes.iter().enumerate() {
        for j in 0..size {
            m[(offset + j, g)] = S::one();
        }
        offset += size;
    }
    m
}

/// Cosine-decay learning rate: `base` at step 0 shrinking to 0 at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step as f64 / total as f64).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}
