//! Convolutional U-Net: conv stages with patch-conv downsampling, transposed
//! patch-conv upsampling and concatenated skips.

use kgpl_tensor::nn::PatchConv3d;
use kgpl_tensor::{Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvBlock, Head, UpBlock};
use super::BackboneConfig;
use crate::prompt::{deep_half, propagate, HookPoint, PromptError, PromptState, PromptableLayer};

#[derive(Clone, Debug)]
pub struct EncoderStage {
    id: String,
    down: Option<PatchConv3d>,
    block: ConvBlock,
}

impl PromptableLayer for EncoderStage {
    fn id(&self) -> &str {
        &self.id
    }

    fn prepare<'g>(&self, g: &'g Graph, store: &ParamStore, grid: Var<'g>) -> Var<'g> {
        match &self.down {
            Some(d) => d.forward(g, store, grid),
            None => grid,
        }
    }

    fn interact<'g>(&self, _: &'g Graph, _: &ParamStore, _: Var<'g>, _: usize, _: [usize; 3]) -> Option<Var<'g>> {
        None
    }

    fn finish<'g>(&self, g: &'g Graph, store: &ParamStore, grid: Var<'g>) -> Var<'g> {
        self.block.forward(g, store, grid)
    }
}

#[derive(Clone, Debug)]
pub struct ConvUnet {
    stages: Vec<EncoderStage>,
    ups: Vec<UpBlock>,
    head: Head,
}

impl ConvUnet {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let ch = &cfg.stage_channels;
        let mut stages = Vec::with_capacity(ch.len());
        for (i, &c) in ch.iter().enumerate() {
            let prefix = format!("encoder.stage{}", i);
            let (down, c_in) = if i == 0 {
                (None, cfg.in_channels)
            } else {
                (Some(PatchConv3d::new(store, &format!("{}.down", prefix), ch[i - 1], c, 2, rng)), c)
            };
            let block = ConvBlock::new(store, &format!("{}.block", prefix), c_in, c, cfg.circular_padding, rng);
            stages.push(EncoderStage { id: format!("stage{}", i), down, block });
        }
        let mut ups = Vec::with_capacity(ch.len() - 1);
        for i in (0..ch.len() - 1).rev() {
            ups.push(UpBlock::new(store, &format!("decoder.up{}", i), ch[i + 1], ch[i], ch[i], cfg.circular_padding, rng));
        }
        let head = Head::new(store, "decoder.head", ch[0], cfg.num_classes, rng);
        Self { stages, ups, head }
    }

    pub fn hooks(&self, cfg: &BackboneConfig) -> Vec<HookPoint> {
        let k = cfg.stage_channels.len();
        cfg.stage_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| HookPoint { id: format!("stage{}", i), channels: c, needs_mixer: true, deep: deep_half(i, k) })
            .collect()
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        prompts: Option<&PromptState>,
    ) -> Result<Var<'g>, PromptError> {
        let layers: Vec<&dyn PromptableLayer> = self.stages.iter().map(|s| s as &dyn PromptableLayer).collect();
        let skips = propagate(g, store, &layers, prompts, x)?;
        let mut y = *skips.last().expect("at least one stage");
        for (up, skip) in self.ups.iter().zip(skips.iter().rev().skip(1)) {
            y = up.forward(g, store, y, *skip);
        }
        Ok(self.head.forward(g, store, y))
    }
}
