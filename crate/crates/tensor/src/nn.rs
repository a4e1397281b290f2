//! Parameterized layers. Each layer registers its tensors in a [`ParamStore`]
//! under a dotted prefix and reads them back through the graph at forward time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::array::Array;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Uniform samples in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = crate::array::numel(shape);
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{}.{}", prefix, name)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(join(prefix, "weight"), uniform_fan_in(&[d_out, d_in], d_in, rng));
        let bias = bias.then(|| store.add(join(prefix, "bias"), Array::zeros(&[d_out])));
        Self { weight, bias }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.linear(g.param(store, self.weight), self.bias.map(|b| g.param(store, b)))
    }
}

/// Stride-1 cubic-kernel convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv3d {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * k * k * k;
        let weight = store.add(join(prefix, "weight"), uniform_fan_in(&[c_out, c_in, k, k, k], fan_in, rng));
        let bias = store.add(join(prefix, "bias"), Array::zeros(&[c_out]));
        Self { weight, bias, padding: k / 2 }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.conv3d(g.param(store, self.weight), Some(g.param(store, self.bias)), self.padding)
    }
}

/// Kernel = stride = `patch` convolution.
#[derive(Clone, Debug)]
pub struct PatchConv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub patch: usize,
}

impl PatchConv3d {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, patch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * patch.pow(3);
        let weight = store.add(join(prefix, "weight"), uniform_fan_in(&[c_out, fan_in], fan_in, rng));
        let bias = store.add(join(prefix, "bias"), Array::zeros(&[c_out]));
        Self { weight, bias, patch }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.patch_conv3d(g.param(store, self.weight), Some(g.param(store, self.bias)), self.patch)
    }
}

/// Kernel = stride = `patch` transposed convolution (upsampling by `patch`).
#[derive(Clone, Debug)]
pub struct PatchConvTranspose3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub patch: usize,
}

impl PatchConvTranspose3d {
    pub fn new(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, patch: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(join(prefix, "weight"), uniform_fan_in(&[c_out * patch.pow(3), c_in], c_in, rng));
        let bias = store.add(join(prefix, "bias"), Array::zeros(&[c_out]));
        Self { weight, bias, patch }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        x.patch_conv_transpose3d(g.param(store, self.weight), Some(g.param(store, self.bias)), self.patch)
    }
}

/// Instance normalization with a per-channel affine on `(B, C, ...)`.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        let gamma = store.add(join(prefix, "gamma"), Array::ones(&[channels]));
        let beta = store.add(join(prefix, "beta"), Array::zeros(&[channels]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let block: usize = s[2..].iter().product();
        x.standardize(block, self.eps)
            .channel_affine(g.param(store, self.gamma), g.param(store, self.beta))
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        let gamma = store.add(join(prefix, "gamma"), Array::ones(&[dim]));
        let beta = store.add(join(prefix, "beta"), Array::zeros(&[dim]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Var<'g> {
        let d = *x.shape().last().expect("layer norm on scalar");
        x.standardize(d, self.eps)
            .mul(g.param(store, self.gamma))
            .add(g.param(store, self.beta))
    }
}
