use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kgpl::backbones::{BackboneConfig, BackboneKind};
use kgpl::knowledge::{CommandEncoder, StubEncoder, Template, TextEncoder, DEFAULT_FIXED_N, DEFAULT_HIDDEN, DEFAULT_TEMPLATE};
use kgpl::prompt::{PromptConfig, ProjectionPath};
use kgpl::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Run configuration read from TOML. Every section is optional.
///
/// ```toml
/// data = "phantoms"        # directory holding manifest.json
/// out = "runs/unet_tissue" # checkpoint + log directory
/// input_size = 32          # cube edge fed to the network (default: volume edge)
/// with_image = false       # structure model also sees the image
///
/// [backbone]
/// stage_channels = [8, 16, 32]
///
/// [train]
/// lr = 1e-4
/// max_epochs = 1000
///
/// [prompt]
/// n = 32
///
/// [knowledge]
/// encoder = "stub"          # or "command"
/// hidden = 768
/// ```
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub input_size: Option<usize>,
    pub with_image: bool,
    pub backbone: BackboneSection,
    pub train: TrainConfig,
    pub prompt: PromptSection,
    pub knowledge: KnowledgeSection,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub stage_channels: Option<Vec<usize>>,
    pub patch_size: Option<usize>,
    pub window_size: Option<usize>,
    pub num_heads: Option<usize>,
    pub depth: Option<usize>,
    pub circular_padding: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub n: Option<usize>,
    /// Defaults to the text encoder's hidden size.
    pub d: Option<usize>,
    pub path: Option<ProjectionPath>,
    pub layers: Option<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSection {
    pub encoder: String,
    pub hidden: usize,
    pub seed: u64,
    /// Program and arguments for `encoder = "command"`.
    pub command: Vec<String>,
    pub template: String,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        Self {
            encoder: "stub".into(),
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            command: Vec::new(),
            template: DEFAULT_TEMPLATE.into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn backbone(&self, kind: BackboneKind, in_channels: usize, num_classes: usize, edge: usize) -> BackboneConfig {
        let b = &self.backbone;
        let mut cfg = BackboneConfig::new(kind, in_channels, num_classes, edge);
        if let Some(c) = &b.stage_channels {
            cfg.stage_channels = c.clone();
        }
        cfg.patch_size = b.patch_size.unwrap_or(cfg.patch_size);
        cfg.window_size = b.window_size.unwrap_or(cfg.window_size);
        cfg.num_heads = b.num_heads.unwrap_or(cfg.num_heads);
        cfg.depth = b.depth.unwrap_or(cfg.depth);
        cfg.circular_padding = b.circular_padding;
        cfg.seed = self.train.seed;
        cfg
    }

    pub fn prompt(&self, kind: BackboneKind) -> PromptConfig {
        let p = &self.prompt;
        let mut cfg = PromptConfig::new(
            p.n.unwrap_or(DEFAULT_FIXED_N),
            p.d.unwrap_or(self.knowledge.hidden),
            p.path.unwrap_or(kind.default_path()),
        );
        cfg.layers = p.layers.clone();
        cfg.seed = self.train.seed;
        cfg
    }

    pub fn encoder(&self) -> Result<Box<dyn TextEncoder>> {
        let k = &self.knowledge;
        match k.encoder.as_str() {
            "stub" => Ok(Box::new(StubEncoder::with_hidden(k.seed, k.hidden))),
            "command" => {
                let Some((program, args)) = k.command.split_first() else {
                    bail!("knowledge.command must name a program for encoder = \"command\"")
                };
                Ok(Box::new(CommandEncoder::new(program.clone(), args.to_vec(), k.hidden)))
            }
            other => bail!("unknown knowledge encoder {:?} (expected stub or command)", other),
        }
    }

    pub fn template(&self) -> Result<Template> {
        Ok(Template::new(self.knowledge.template.clone())?)
    }
}
