//! Building blocks shared by the backbones.

use kgpl_tensor::nn::{Conv3d, InstanceNorm, LayerNorm, Linear, PatchConvTranspose3d};
use kgpl_tensor::{Array, Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Wrap-around padding of the three trailing axes by `p`.
pub fn circular_pad<'g>(x: Var<'g>, p: usize) -> Var<'g> {
    let mut x = x;
    for axis in 2..5 {
        let len = x.shape()[axis];
        x = Var::concat(&[x.narrow(axis, len - p, p), x, x.narrow(axis, 0, p)], axis);
    }
    x
}

/// `3x3x3` convolution with zero or circular "same" padding.
#[derive(Clone, Debug)]
pub struct PaddedConv {
    conv: Conv3d,
    circular: bool,
}

impl PaddedConv {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, circular: bool, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv3d::new(store, prefix, c_in, c_out, 3, rng), circular }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        if self.circular {
            let (w, b) = (g.param(store, self.conv.weight), g.param(store, self.conv.bias));
            circular_pad(x, self.conv.padding).conv3d(w, Some(b), 0)
        } else {
            self.conv.forward(g, store, x)
        }
    }
}

/// Two `3x3x3` convolutions, each followed by instance norm and leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv1: PaddedConv,
    norm1: InstanceNorm,
    conv2: PaddedConv,
    norm2: InstanceNorm,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, circular: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: PaddedConv::new(store, &format!("{}.conv1", prefix), c_in, c_out, circular, rng),
            norm1: InstanceNorm::new(store, &format!("{}.norm1", prefix), c_out),
            conv2: PaddedConv::new(store, &format!("{}.conv2", prefix), c_out, c_out, circular, rng),
            norm2: InstanceNorm::new(store, &format!("{}.norm2", prefix), c_out),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        let x = self.norm1.forward(g, store, self.conv1.forward(g, store, x)).leaky_relu(LEAKY_SLOPE);
        self.norm2.forward(g, store, self.conv2.forward(g, store, x)).leaky_relu(LEAKY_SLOPE)
    }
}

/// One conv + norm + activation; used as a full-resolution stem.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    conv: PaddedConv,
    norm: InstanceNorm,
}

impl ConvUnit {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, circular: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: PaddedConv::new(store, &format!("{}.conv", prefix), c_in, c_out, circular, rng),
            norm: InstanceNorm::new(store, &format!("{}.norm", prefix), c_out),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        self.norm.forward(g, store, self.conv.forward(g, store, x)).leaky_relu(LEAKY_SLOPE)
    }
}

/// Upsample by 2, concatenate the skip, then a [`ConvBlock`].
#[derive(Clone, Debug)]
pub struct UpBlock {
    up: PatchConvTranspose3d,
    conv: ConvBlock,
}

impl UpBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_skip: usize,
        c_out: usize,
        circular: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            up: PatchConvTranspose3d::new(store, &format!("{}.up", prefix), c_in, c_out, 2, rng),
            conv: ConvBlock::new(store, &format!("{}.block", prefix), c_out + c_skip, c_out, circular, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>, skip: Var<'g>) -> Var<'g> {
        let up = self.up.forward(g, store, x);
        self.conv.forward(g, store, Var::concat(&[up, skip], 1))
    }
}

/// `1x1x1` convolution to class logits.
#[derive(Clone, Debug)]
pub struct Head {
    conv: Conv3d,
}

impl Head {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv3d::new(store, prefix, c_in, classes, 1, rng) }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        self.conv.forward(g, store, x)
    }
}

/// Multi-head attention on `(B, T, C)` with optional extra key/value tokens and
/// an additive mask.
#[derive(Clone, Debug)]
pub struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{}.qkv", prefix), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{}.proj", prefix), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    fn split_heads<'g>(&self, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.heads, self.dim / self.heads]).permute(&[0, 2, 1, 3])
    }

    /// Keys/values are `extra` (if any, `(B, N, C)`, already normalized) followed
    /// by `x` itself. `mask` broadcasts against `(B, heads, T, N + T)` scores
    /// after a reshape to `(B / groups, groups, heads, T, N + T)`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        extra: Option<Var<'g>>,
        mask: Option<(&Array, usize)>,
    ) -> Var<'g> {
        let s = x.shape();
        let (b, t, c) = (s[0], s[1], s[2]);
        let qkv = self.qkv.forward(g, store, x);
        let q = self.split_heads(qkv.narrow(2, 0, c));
        let mut k = qkv.narrow(2, c, c);
        let mut v = qkv.narrow(2, 2 * c, c);
        if let Some(e) = extra {
            let ekv = e.linear(
                g.param(store, self.qkv.weight).narrow(0, c, 2 * c),
                self.qkv.bias.map(|bias| g.param(store, bias).narrow(0, c, 2 * c)),
            );
            k = Var::concat(&[ekv.narrow(2, 0, c), k], 1);
            v = Var::concat(&[ekv.narrow(2, c, c), v], 1);
        }
        let (k, v) = (self.split_heads(k), self.split_heads(v));
        let dh = (c / self.heads) as f64;
        let mut scores = q.matmul(k.transpose(2, 3)).scale(1.0 / dh.sqrt());
        if let Some((m, groups)) = mask {
            let kn = scores.shape()[3];
            scores = scores
                .reshape(&[b / groups, groups, self.heads, t, kn])
                .add(g.constant(m.clone()))
                .reshape(&[b, self.heads, t, kn]);
        }
        let out = scores.softmax(3).matmul(v).permute(&[0, 2, 1, 3]).reshape(&[b, t, c]);
        self.proj.forward(g, store, out)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{}.fc1", prefix), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{}.fc2", prefix), hidden, dim, true, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        self.fc2.forward(g, store, self.fc1.forward(g, store, x).gelu())
    }
}

/// Pre-norm transformer block on `(B, T, C)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{}.norm1", prefix), dim),
            attn: Attention::new(store, &format!("{}.attn", prefix), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{}.norm2", prefix), dim),
            mlp: Mlp::new(store, &format!("{}.mlp", prefix), dim, 2 * dim, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        let x = x.add(self.attn.forward(g, store, self.norm1.forward(g, store, x), None, None));
        x.add(self.mlp.forward(g, store, self.norm2.forward(g, store, x)))
    }
}

/// `(B, L, W, H, C)` → `(B · windows, w³, C)`.
pub fn window_partition<'g>(x: Var<'g>, w: usize) -> Var<'g> {
    let s = x.shape();
    let (b, l, wd, h, c) = (s[0], s[1], s[2], s[3], s[4]);
    x.reshape(&[b, l / w, w, wd / w, w, h / w, w, c])
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])
        .reshape(&[b * (l / w) * (wd / w) * (h / w), w * w * w, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'g>(x: Var<'g>, w: usize, b: usize, dims: [usize; 3]) -> Var<'g> {
    let [l, wd, h] = dims;
    let c = *x.shape().last().unwrap();
    x.reshape(&[b, l / w, wd / w, h / w, w, w, w, c])
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])
        .reshape(&[b, l, wd, h, c])
}

/// Additive attention mask `(windows, 1, w³, n + w³)` for a grid cyclically
/// shifted by `shift`: image tokens only attend within their original region,
/// the `n` leading prompt columns are always visible.
pub fn shift_mask(dims: [usize; 3], w: usize, shift: usize, n: usize) -> Array {
    let region = |i: usize, len: usize| -> usize {
        if shift == 0 || i < len - w {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let [l, wd, h] = dims;
    let mut ids = vec![0usize; l * wd * h];
    for i in 0..l {
        for j in 0..wd {
            for k in 0..h {
                ids[(i * wd + j) * h + k] = region(i, l) * 9 + region(j, wd) * 3 + region(k, h);
            }
        }
    }
    let (nl, nw, nh) = (l / w, wd / w, h / w);
    let t = w * w * w;
    let windows = nl * nw * nh;
    let mut mask = Array::zeros(&[windows, 1, t, n + t]);
    let md = mask.data_mut();
    for wi in 0..nl {
        for wj in 0..nw {
            for wk in 0..nh {
                let win = (wi * nw + wj) * nh + wk;
                let mut local = Vec::with_capacity(t);
                for a in 0..w {
                    for bb in 0..w {
                        for c in 0..w {
                            local.push(ids[((wi * w + a) * wd + wj * w + bb) * h + wk * w + c]);
                        }
                    }
                }
                for p in 0..t {
                    for q in 0..t {
                        if local[p] != local[q] {
                            md[(win * t + p) * (n + t) + n + q] = -1e9;
                        }
                    }
                }
            }
        }
    }
    mask
}
