//! Patch-embedding transformer encoder with a convolutional decoder
//! (UNETR-style, reduced depth and width).

use kgpl_tensor::nn::{uniform_fan_in, PatchConv3d, PatchConvTranspose3d};
use kgpl_tensor::{Graph, ParamId, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use super::blocks::{ConvUnit, Head, TransformerBlock, UpBlock};
use super::BackboneConfig;
use crate::prompt::{propagate, HookPoint, PromptError, PromptState, PromptableLayer};

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    id: String,
    block: TransformerBlock,
}

impl PromptableLayer for AttentionLayer {
    fn id(&self) -> &str {
        &self.id
    }

    fn interact<'g>(&self, g: &'g Graph, store: &ParamStore, seq: Var<'g>, _: usize, _: [usize; 3]) -> Option<Var<'g>> {
        Some(self.block.forward(g, store, seq.transpose(1, 2)).transpose(1, 2))
    }

    fn finish<'g>(&self, _: &'g Graph, _: &ParamStore, grid: Var<'g>) -> Var<'g> {
        grid
    }
}

#[derive(Clone, Debug)]
pub struct PatchAttention {
    embed: PatchConv3d,
    pos: ParamId,
    blocks: Vec<AttentionLayer>,
    stem: ConvUnit,
    skip_up: PatchConvTranspose3d,
    up_mid: UpBlock,
    up_full: UpBlock,
    head: Head,
    hidden: usize,
}

impl PatchAttention {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let [c0, c1, hidden] = [cfg.stage_channels[0], cfg.stage_channels[1], cfg.stage_channels[2]];
        let p = cfg.patch_size;
        let grid: Vec<usize> = cfg.input_dims.iter().map(|d| d / p).collect();
        let tokens: usize = grid.iter().product();
        let embed = PatchConv3d::new(store, "encoder.embed", cfg.in_channels, hidden, p, rng);
        let pos = store.add("encoder.pos", uniform_fan_in(&[1, hidden, grid[0], grid[1], grid[2]], tokens, rng));
        let blocks = (0..cfg.depth)
            .map(|i| AttentionLayer {
                id: format!("block{}", i),
                block: TransformerBlock::new(store, &format!("encoder.block{}", i), hidden, cfg.num_heads, rng),
            })
            .collect();
        Self {
            embed,
            pos,
            blocks,
            stem: ConvUnit::new(store, "decoder.stem", cfg.in_channels, c0, cfg.circular_padding, rng),
            skip_up: PatchConvTranspose3d::new(store, "decoder.skip_up", hidden, c1, 2, rng),
            up_mid: UpBlock::new(store, "decoder.up1", hidden, c1, c1, cfg.circular_padding, rng),
            up_full: UpBlock::new(store, "decoder.up0", c1, c0, c0, cfg.circular_padding, rng),
            head: Head::new(store, "decoder.head", c0, cfg.num_classes, rng),
            hidden,
        }
    }

    pub fn hooks(&self) -> Vec<HookPoint> {
        let k = self.blocks.len();
        (0..k)
            .map(|i| HookPoint { id: format!("block{}", i), channels: self.hidden, needs_mixer: false, deep: i + 2 >= k })
            .collect()
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        prompts: Option<&PromptState>,
    ) -> Result<Var<'g>, PromptError> {
        let tokens = self.embed.forward(g, store, x).add(g.param(store, self.pos));
        let layers: Vec<&dyn PromptableLayer> = self.blocks.iter().map(|b| b as &dyn PromptableLayer).collect();
        let outs = propagate(g, store, &layers, prompts, tokens)?;
        let deep = *outs.last().expect("at least one block");
        let mid = outs[(outs.len() / 2).saturating_sub(1)];
        let skip_mid = self.skip_up.forward(g, store, mid);
        let y = self.up_mid.forward(g, store, deep, skip_mid);
        let y = self.up_full.forward(g, store, y, self.stem.forward(g, store, x));
        Ok(self.head.forward(g, store, y))
    }
}
