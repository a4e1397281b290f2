//! Toy-scale 3D encoder–decoder segmentation networks with prompt hook points.
//!
//! Parameters are partitioned by name: `encoder.*`, `decoder.*` and `prompt.*`.
//! Skip-path convolutions and full-resolution stems belong to the decoder.

pub mod blocks;
pub mod conv_unet;
pub mod patch_attention;
pub mod windowed_attention;

use std::collections::BTreeMap;

use kgpl_tensor::{Array, Graph, ParamId, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{init_prompts, HookPoint, ProjectionPath, PromptConfig, PromptError, PromptState, PROMPT_PREFIX};
use conv_unet::ConvUnet;
use patch_attention::PatchAttention;
use windowed_attention::{window_for, WindowedAttention};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ConvUnet,
    PatchAttention,
    WindowedAttention,
}

impl BackboneKind {
    /// Short names used on the command line.
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "unet" | "conv_unet" => Some(Self::ConvUnet),
            "unetr" | "patch_attention" => Some(Self::PatchAttention),
            "swin" | "windowed_attention" => Some(Self::WindowedAttention),
            _ => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Self::ConvUnet => "unet",
            Self::PatchAttention => "unetr",
            Self::WindowedAttention => "swin",
        }
    }

    pub fn default_path(self) -> ProjectionPath {
        match self {
            Self::PatchAttention => ProjectionPath::TransposeLinear,
            _ => ProjectionPath::AapLinear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_dims: [usize; 3],
    /// Widths at full, half and quarter resolution (conv: one entry per stage).
    pub stage_channels: Vec<usize>,
    pub patch_size: usize,
    pub window_size: usize,
    pub num_heads: usize,
    /// Transformer blocks in the encoder (attention kinds).
    pub depth: usize,
    /// Wrap-around instead of zero padding in the 3x3x3 convolutions.
    #[serde(default)]
    pub circular_padding: bool,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, in_channels: usize, num_classes: usize, edge: usize) -> Self {
        let (patch_size, window_size) = match kind {
            BackboneKind::ConvUnet => (2, 0),
            BackboneKind::PatchAttention => (4, 0),
            BackboneKind::WindowedAttention => (2, 4),
        };
        Self {
            kind,
            in_channels,
            num_classes,
            input_dims: [edge; 3],
            stage_channels: vec![8, 16, 32],
            patch_size,
            window_size,
            num_heads: 4,
            depth: 4,
            circular_padding: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let bad = |m: String| Err(BackboneError::BadConfig(m));
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad(format!("in_channels {} / num_classes {}", self.in_channels, self.num_classes));
        }
        let ch = &self.stage_channels;
        if ch.is_empty() || ch.contains(&0) || ch.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("stage_channels {:?} must be positive and non-decreasing", ch));
        }
        if ch.iter().any(|&c| c > 64) {
            return bad(format!("stage_channels {:?} exceed 64", ch));
        }
        let dims = self.input_dims;
        let divisible = |f: usize| dims.iter().all(|&d| d > 0 && d % f == 0);
        match self.kind {
            BackboneKind::ConvUnet => {
                let factor = 1 << (ch.len() - 1);
                if !divisible(factor) {
                    return bad(format!("input {:?} not divisible by {} for {} stages", dims, factor, ch.len()));
                }
            }
            BackboneKind::PatchAttention | BackboneKind::WindowedAttention => {
                let expected_patch = if self.kind == BackboneKind::PatchAttention { 4 } else { 2 };
                if ch.len() != 3 {
                    return bad(format!("attention backbones take 3 widths, got {:?}", ch));
                }
                if self.patch_size != expected_patch {
                    return bad(format!("patch size {} unsupported (use {})", self.patch_size, expected_patch));
                }
                if !divisible(self.patch_size * 2) {
                    return bad(format!("patch {} does not divide input {:?} twice", self.patch_size, dims));
                }
                if self.num_heads == 0 || ch[1..].iter().any(|c| c % self.num_heads != 0) {
                    return bad(format!("{} heads do not divide widths {:?}", self.num_heads, ch));
                }
                if self.depth == 0 {
                    return bad("depth must be at least 1".into());
                }
            }
        }
        if self.kind == BackboneKind::WindowedAttention {
            if self.depth % WindowedAttention::STAGES != 0 {
                return bad(format!("depth {} not a multiple of {} stages", self.depth, WindowedAttention::STAGES));
            }
            if self.window_size < 2 {
                return bad("window must be at least 2".into());
            }
            for stage in 0..WindowedAttention::STAGES {
                let grid = dims.map(|d| d / (self.patch_size << stage));
                let (w, _) = window_for(grid, self.window_size);
                if grid.iter().any(|g| g % w != 0) {
                    return bad(format!("window {} does not divide grid {:?}", self.window_size, grid));
                }
            }
        }
        Ok(())
    }

    /// Image tokens after patch embedding (attention kinds) or voxels (conv).
    pub fn token_count(&self) -> usize {
        let p = if self.kind == BackboneKind::ConvUnet { 1 } else { self.patch_size };
        self.input_dims.iter().map(|d| d / p).product()
    }
}

#[derive(Clone, Debug)]
enum Net {
    Conv(ConvUnet),
    Patch(PatchAttention),
    Windowed(WindowedAttention),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Decoder,
    Prompt,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Encoder, Part::Decoder, Part::Prompt];

    pub fn of(name: &str) -> Part {
        if name.starts_with(PROMPT_PREFIX) {
            Part::Prompt
        } else if name.starts_with("encoder.") {
            Part::Encoder
        } else {
            Part::Decoder
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
            Part::Prompt => "prompt",
        }
    }
}

/// Parameter ids grouped by partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub encoder: Vec<ParamId>,
    pub decoder: Vec<ParamId>,
    pub prompt: Vec<ParamId>,
}

impl Partition {
    pub fn get(&self, part: Part) -> &[ParamId] {
        match part {
            Part::Encoder => &self.encoder,
            Part::Decoder => &self.decoder,
            Part::Prompt => &self.prompt,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    config: BackboneConfig,
    store: ParamStore,
    net: Net,
    prompts: Option<PromptState>,
    prompt_config: Option<PromptConfig>,
}

impl SegmentationModel {
    pub fn build(config: BackboneConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = match config.kind {
            BackboneKind::ConvUnet => Net::Conv(ConvUnet::new(&mut store, &config, &mut rng)),
            BackboneKind::PatchAttention => Net::Patch(PatchAttention::new(&mut store, &config, &mut rng)),
            BackboneKind::WindowedAttention => Net::Windowed(WindowedAttention::new(&mut store, &config, &mut rng)),
        };
        Ok(Self { config, store, net, prompts: None, prompt_config: None })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn prompts(&self) -> Option<&PromptState> {
        self.prompts.as_ref()
    }

    pub fn prompt_config(&self) -> Option<&PromptConfig> {
        self.prompt_config.as_ref()
    }

    pub fn hook_points(&self) -> Vec<HookPoint> {
        match &self.net {
            Net::Conv(n) => n.hooks(&self.config),
            Net::Patch(n) => n.hooks(),
            Net::Windowed(n) => n.hooks(&self.config),
        }
    }

    /// Registers zero-initialized prompts at the configured hook points.
    pub fn attach_prompts(&mut self, cfg: PromptConfig) -> Result<&PromptState, BackboneError> {
        if self.prompts.is_some() {
            return Err(BackboneError::BadConfig("prompts already attached".into()));
        }
        let hooks = self.hook_points();
        let state = init_prompts(&mut self.store, &hooks, &cfg)?;
        self.prompt_config = Some(cfg);
        Ok(self.prompts.insert(state))
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), BackboneError> {
        let c = &self.config;
        if shape.len() != 5 || shape[1] != c.in_channels || shape[2..] != c.input_dims {
            return Err(BackboneError::ShapeMismatch(format!(
                "input {:?}, expected (B, {}, {:?})",
                shape, c.in_channels, c.input_dims
            )));
        }
        Ok(())
    }

    /// Logits `(B, num_classes, D, H, W)`, using attached prompts if any.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>, BackboneError> {
        self.forward_with(g, x, true)
    }

    pub fn forward_with<'g>(&self, g: &'g Graph, x: Var<'g>, use_prompts: bool) -> Result<Var<'g>, BackboneError> {
        self.check_input(&x.shape())?;
        let prompts = if use_prompts { self.prompts.as_ref() } else { None };
        let out = match &self.net {
            Net::Conv(n) => n.forward(g, &self.store, x, prompts)?,
            Net::Patch(n) => n.forward(g, &self.store, x, prompts)?,
            Net::Windowed(n) => n.forward(g, &self.store, x, prompts)?,
        };
        Ok(out)
    }

    /// Forward pass on a plain array, no tape kept.
    pub fn logits(&self, input: &Array) -> Result<Array, BackboneError> {
        let g = Graph::new();
        let out = self.forward(&g, g.constant(input.clone()))?;
        Ok(out.value().as_ref().clone())
    }

    pub fn partition(&self) -> Partition {
        let mut p = Partition::default();
        for (id, entry) in self.store.iter() {
            match Part::of(&entry.name) {
                Part::Encoder => p.encoder.push(id),
                Part::Decoder => p.decoder.push(id),
                Part::Prompt => p.prompt.push(id),
            }
        }
        p
    }

    pub fn set_trainable(&mut self, part: Part, trainable: bool) {
        self.store.set_trainable_where(|name| Part::of(name) == part, trainable);
    }

    /// Scalar count per partition.
    pub fn parameter_counts(&self) -> BTreeMap<Part, usize> {
        let mut counts: BTreeMap<Part, usize> = Part::ALL.iter().map(|&p| (p, 0)).collect();
        for (_, entry) in self.store.iter() {
            *counts.get_mut(&Part::of(&entry.name)).unwrap() += entry.value().len();
        }
        counts
    }

    pub fn trainable_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn total_parameters(&self) -> usize {
        self.store.num_total()
    }
}

#[cfg(test)]
mod tests;
