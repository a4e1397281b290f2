//! Learnable prompt tokens: zero initialization, knowledge pre-initialization,
//! projection to image channels, and per-layer inject/discard propagation.
//!
//! Every prompt tensor lives in the model's [`ParamStore`] under `prompt.<layer>.`
//! so the prompt partition is recognizable by name.

use kgpl_tensor::nn::{uniform_fan_in, Linear};
use kgpl_tensor::{Array, Graph, ParamId, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROMPT_PREFIX: &str = "prompt.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PromptError {
    #[error("invalid prompt config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: image has {image}, prompts have {prompt}")]
    ChannelMismatch { image: usize, prompt: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionPath {
    AapLinear,
    TransposeLinear,
}

/// A point in an encoder where prompts can be injected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HookPoint {
    pub id: String,
    pub channels: usize,
    /// Convolutional stages have no native sequence interaction and get a
    /// prompt-owned mixing block.
    pub needs_mixer: bool,
    /// Part of the default injection set.
    pub deep: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub n: usize,
    pub d: usize,
    pub path: ProjectionPath,
    /// Layer ids to inject at; `None` selects the encoder's deep layers.
    #[serde(default)]
    pub layers: Option<Vec<String>>,
    pub seed: u64,
}

impl PromptConfig {
    pub fn new(n: usize, d: usize, path: ProjectionPath) -> Self {
        Self { n, d, path, layers: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Residual attention from image positions onto the prompt slots, applied on
/// `(B, C, N + S)`; prompt slots pass through unchanged.
#[derive(Clone, Debug)]
pub struct ConvMixer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub channels: usize,
}

impl ConvMixer {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = |name: &str| Linear::new(store, &format!("{}.{}", prefix, name), channels, channels, true, rng);
        let (q, k, v, o) = (lin("q"), lin("k"), lin("v"), lin("o"));
        Self { q, k, v, o, channels }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, seq: Var<'g>, n: usize) -> Var<'g> {
        let s = seq.shape();
        let width = s[2];
        if n == 0 {
            return seq;
        }
        let prompts = seq.narrow(2, 0, n).transpose(1, 2);
        let image = seq.narrow(2, n, width - n).transpose(1, 2);
        let q = self.q.forward(g, store, image);
        let k = self.k.forward(g, store, prompts);
        let v = self.v.forward(g, store, prompts);
        let scores = q.matmul(k.transpose(1, 2)).scale(1.0 / (self.channels as f64).sqrt());
        let mixed = scores.softmax(2).matmul(v);
        let out = self.o.forward(g, store, mixed).transpose(1, 2);
        Var::concat(&[seq.narrow(2, 0, n), seq.narrow(2, n, width - n).add(out)], 2)
    }
}

#[derive(Clone, Debug)]
pub struct PromptLayer {
    pub id: String,
    pub channels: usize,
    pub tokens: ParamId,
    pub projection: Projection,
    pub mixer: Option<ConvMixer>,
}

#[derive(Clone, Debug)]
pub struct PromptState {
    pub n: usize,
    pub d: usize,
    pub path: ProjectionPath,
    pub layers: Vec<PromptLayer>,
}

/// Registers zero-valued `(N, D)` tokens and seeded projections for each
/// selected hook point.
pub fn init_prompts(store: &mut ParamStore, hooks: &[HookPoint], cfg: &PromptConfig) -> Result<PromptState, PromptError> {
    if cfg.n < 1 || cfg.d < 1 {
        return Err(PromptError::BadConfig(format!("N = {} and D = {} must be at least 1", cfg.n, cfg.d)));
    }
    let selected: Vec<&HookPoint> = match &cfg.layers {
        None => hooks.iter().filter(|h| h.deep).collect(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                hooks
                    .iter()
                    .find(|h| &h.id == id)
                    .ok_or_else(|| PromptError::BadConfig(format!("unknown injection layer {:?}", id)))
            })
            .collect::<Result<_, _>>()?,
    };
    if selected.is_empty() {
        return Err(PromptError::BadConfig("no injection layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut layers = Vec::with_capacity(selected.len());
    for hook in selected {
        let prefix = format!("{}{}", PROMPT_PREFIX, hook.id);
        let c = hook.channels;
        let tokens = store.add(format!("{}.tokens", prefix), Array::zeros(&[cfg.n, cfg.d]));
        let projection = match cfg.path {
            ProjectionPath::AapLinear => Projection {
                weight: store.add(format!("{}.proj.weight", prefix), uniform_fan_in(&[c, cfg.n], cfg.n, &mut rng)),
                bias: store.add(format!("{}.proj.bias", prefix), Array::zeros(&[c])),
            },
            ProjectionPath::TransposeLinear => Projection {
                weight: store.add(format!("{}.proj.weight", prefix), uniform_fan_in(&[c, cfg.d], cfg.d, &mut rng)),
                bias: store.add(format!("{}.proj.bias", prefix), Array::zeros(&[c])),
            },
        };
        let mixer = hook.needs_mixer.then(|| ConvMixer::new(store, &format!("{}.mixer", prefix), c, &mut rng));
        layers.push(PromptLayer { id: hook.id.clone(), channels: c, tokens, projection, mixer });
    }
    Ok(PromptState { n: cfg.n, d: cfg.d, path: cfg.path, layers })
}

impl PromptState {
    pub fn layer(&self, id: &str) -> Option<&PromptLayer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.id.as_str()).collect()
    }

    /// Adds `emb` (shape `(N, D)`) onto every layer's tokens.
    pub fn preinitialize(&self, store: &mut ParamStore, emb: &Array) -> Result<(), PromptError> {
        if emb.shape() != [self.n, self.d] {
            return Err(PromptError::ShapeMismatch(format!(
                "embedding {:?} vs prompt tokens {:?}",
                emb.shape(),
                [self.n, self.d]
            )));
        }
        for l in &self.layers {
            store.get_mut(l.tokens).add_assign(emb);
        }
        Ok(())
    }

    /// Overwrites every layer's tokens with seeded uniform values in `±1/sqrt(D)`.
    pub fn randomize_tokens(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &self.layers {
            store.set(l.tokens, uniform_fan_in(&[self.n, self.d], self.d, &mut rng));
        }
    }

    /// `(B, C, N)` prompt block for one layer, broadcast over the batch.
    pub fn project<'g>(&self, g: &'g Graph, store: &ParamStore, layer: &PromptLayer, batch: usize) -> Var<'g> {
        let tokens = g.param(store, layer.tokens).reshape(&[1, self.n, self.d]);
        let w = g.param(store, layer.projection.weight);
        let b = g.param(store, layer.projection.bias);
        let one = match self.path {
            ProjectionPath::AapLinear => project_aap(tokens, w, b),
            ProjectionPath::TransposeLinear => project_transpose(tokens, w, b),
        };
        if batch == 1 {
            one
        } else {
            one.add(g.constant(Array::zeros(&[batch, layer.channels, self.n])))
        }
    }
}

/// `(B, N, D)` → mean over D → `(B, N, 1)` → `out[b,c,n] = W[c,n]·pooled[b,n] + bias[c]`.
pub fn project_aap<'g>(tokens: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
    let s = tokens.shape();
    let (b, n) = (s[0], s[1]);
    let c = weight.shape()[0];
    let pooled = tokens.mean_axis(2).reshape(&[b, 1, n]);
    pooled.mul(weight).add(bias.reshape(&[c, 1]))
}

/// `(B, N, D)` → `(D, N, B)` → linear D→C on the leading axis → `(B, C, N)`.
pub fn project_transpose<'g>(tokens: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
    let s = tokens.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let c = weight.shape()[0];
    let t = tokens.permute(&[2, 1, 0]).reshape(&[d, n * b]);
    let y = weight.matmul(t).reshape(&[c, n, b]).add(bias.reshape(&[c, 1, 1]));
    y.permute(&[2, 0, 1])
}

/// Image embeddings flattened to `(B, C, S)` with their spatial extent.
#[derive(Clone, Copy, Debug)]
pub struct ImageTokenBlock<'g> {
    pub data: Var<'g>,
    pub spatial: [usize; 3],
}

impl<'g> ImageTokenBlock<'g> {
    /// From a `(B, C, L, W, H)` grid.
    pub fn from_grid(grid: Var<'g>) -> Result<Self, PromptError> {
        match grid.shape()[..] {
            [b, c, l, w, h] => Ok(Self { data: grid.reshape(&[b, c, l * w * h]), spatial: [l, w, h] }),
            ref other => Err(PromptError::ShapeMismatch(format!("{:?} is not (B, C, L, W, H)", other))),
        }
    }

    pub fn to_grid(&self) -> Var<'g> {
        let s = self.data.shape();
        let [l, w, h] = self.spatial;
        self.data.reshape(&[s[0], s[1], l, w, h])
    }

    pub fn seq_len(&self) -> usize {
        self.spatial.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionRecord {
    pub n: usize,
    pub s: usize,
    pub spatial: [usize; 3],
}

/// Concatenates prompts in front of the image tokens: `(B, C, N + S)`.
pub fn inject<'g>(image: &ImageTokenBlock<'g>, prompts: Option<Var<'g>>) -> Result<(Var<'g>, InjectionRecord), PromptError> {
    let si = image.data.shape();
    let s = image.seq_len();
    if si.len() != 3 || si[2] != s {
        return Err(PromptError::ShapeMismatch(format!("image block {:?} vs spatial {:?}", si, image.spatial)));
    }
    let Some(p) = prompts else {
        return Ok((image.data, InjectionRecord { n: 0, s, spatial: image.spatial }));
    };
    let sp = p.shape();
    if sp.len() != 3 || sp[1] != si[1] {
        return Err(PromptError::ChannelMismatch { image: si[1], prompt: sp.get(1).copied().unwrap_or(0) });
    }
    if sp[0] != si[0] {
        return Err(PromptError::ShapeMismatch(format!("batch {} vs {}", sp[0], si[0])));
    }
    let n = sp[2];
    let out = if n == 0 { image.data } else { Var::concat(&[p, image.data], 2) };
    Ok((out, InjectionRecord { n, s, spatial: image.spatial }))
}

/// Drops the prompt slots and restores the image block.
pub fn discard<'g>(output: Var<'g>, record: &InjectionRecord) -> Result<ImageTokenBlock<'g>, PromptError> {
    let s = output.shape();
    if s.len() != 3 || s[2] != record.n + record.s {
        return Err(PromptError::ShapeMismatch(format!(
            "output {:?} cannot hold {} prompts and {} image tokens",
            s, record.n, record.s
        )));
    }
    let data = if record.n == 0 { output } else { output.narrow(2, record.n, record.s) };
    Ok(ImageTokenBlock { data, spatial: record.spatial })
}

/// An encoder layer that prompts can be injected into.
pub trait PromptableLayer {
    fn id(&self) -> &str;

    /// Work done on the incoming grid before prompts are injected.
    fn prepare<'g>(&self, _g: &'g Graph, _store: &ParamStore, grid: Var<'g>) -> Var<'g> {
        grid
    }

    /// Native interaction over a `(B, C, N + S)` sequence whose first `n`
    /// slots are prompts. `None` means the layer has no sequence form and
    /// relies on the prompt layer's mixer.
    fn interact<'g>(&self, g: &'g Graph, store: &ParamStore, seq: Var<'g>, n: usize, spatial: [usize; 3]) -> Option<Var<'g>>;

    /// The rest of the layer on the restored `(B, C, L, W, H)` grid.
    fn finish<'g>(&self, g: &'g Graph, store: &ParamStore, grid: Var<'g>) -> Var<'g>;
}

/// Runs `layers` in order, injecting fresh prompts before every configured
/// layer and discarding their outputs after it. Returns each layer's output grid.
pub fn propagate<'g>(
    g: &'g Graph,
    store: &ParamStore,
    layers: &[&dyn PromptableLayer],
    prompts: Option<&PromptState>,
    x0: Var<'g>,
) -> Result<Vec<Var<'g>>, PromptError> {
    let mut x = x0;
    let mut outputs = Vec::with_capacity(layers.len());
    for layer in layers {
        let hook = prompts.and_then(|p| p.layer(layer.id()).map(|l| (p, l)));
        let block = ImageTokenBlock::from_grid(layer.prepare(g, store, x))?;
        let batch = block.data.shape()[0];
        let seq = match hook {
            Some((state, pl)) => {
                let p = state.project(g, store, pl, batch);
                let (seq, record) = inject(&block, Some(p))?;
                let mixed = match layer.interact(g, store, seq, record.n, record.spatial) {
                    Some(out) => out,
                    None => pl.mixer.as_ref().map_or(seq, |m| m.forward(g, store, seq, record.n)),
                };
                discard(mixed, &record)?
            }
            None => {
                let (seq, record) = inject(&block, None)?;
                let out = layer.interact(g, store, seq, 0, record.spatial).unwrap_or(seq);
                discard(out, &record)?
            }
        };
        x = layer.finish(g, store, seq.to_grid());
        outputs.push(x);
    }
    Ok(outputs)
}

/// `ceil(k / 2)` deepest of `k` stages.
pub fn deep_half(index: usize, count: usize) -> bool {
    index >= count - count.div_ceil(2)
}
