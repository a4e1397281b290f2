//! Shifted-window transformer encoder with a convolutional decoder
//! (Swin-UNETR-style, two stages of two blocks).

use kgpl_tensor::nn::{LayerNorm, PatchConv3d};
use kgpl_tensor::{Array, Graph, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use super::blocks::{shift_mask, window_partition, window_reverse, Attention, ConvUnit, Head, Mlp, UpBlock};
use super::BackboneConfig;
use crate::prompt::{propagate, HookPoint, PromptError, PromptState, PromptableLayer};

/// Effective window and shift for a grid, shrinking the window to the grid
/// (and disabling the shift) when the grid is no larger than the window.
pub fn window_for(dims: [usize; 3], window: usize) -> (usize, usize) {
    let smallest = *dims.iter().min().unwrap();
    if smallest <= window {
        (smallest, 0)
    } else {
        (window, window / 2)
    }
}

#[derive(Clone, Debug)]
pub struct WindowLayer {
    id: String,
    merge: Option<PatchConv3d>,
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shifted: bool,
}

impl WindowLayer {
    fn new(
        store: &mut ParamStore,
        id: String,
        merge: Option<PatchConv3d>,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let prefix = format!("encoder.{}", id);
        Self {
            norm1: LayerNorm::new(store, &format!("{}.norm1", prefix), dim),
            attn: Attention::new(store, &format!("{}.attn", prefix), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{}.norm2", prefix), dim),
            mlp: Mlp::new(store, &format!("{}.mlp", prefix), dim, 2 * dim, rng),
            id,
            merge,
            window,
            shifted,
        }
    }

    fn roll3<'g>(x: Var<'g>, shift: isize) -> Var<'g> {
        x.roll(1, shift).roll(2, shift).roll(3, shift)
    }
}

impl PromptableLayer for WindowLayer {
    fn id(&self) -> &str {
        &self.id
    }

    fn prepare<'g>(&self, g: &'g Graph, store: &ParamStore, grid: Var<'g>) -> Var<'g> {
        match &self.merge {
            Some(m) => m.forward(g, store, grid),
            None => grid,
        }
    }

    fn interact<'g>(&self, g: &'g Graph, store: &ParamStore, seq: Var<'g>, n: usize, spatial: [usize; 3]) -> Option<Var<'g>> {
        let s = seq.shape();
        let (b, c) = (s[0], s[1]);
        let len: usize = spatial.iter().product();
        let [l, w, h] = spatial;
        let (win, shift) = window_for(spatial, self.window);
        let shift = if self.shifted { shift } else { 0 };
        let image = seq.narrow(2, n, len).reshape(&[b, c, l, w, h]).permute(&[0, 2, 3, 4, 1]);

        let mut normed = self.norm1.forward(g, store, image);
        if shift > 0 {
            normed = Self::roll3(normed, -(shift as isize));
        }
        let windows = window_partition(normed, win);
        let count = windows.shape()[0] / b;
        let extra = (n > 0).then(|| {
            let p = self.norm1.forward(g, store, seq.narrow(2, 0, n).transpose(1, 2));
            p.reshape(&[b, 1, n, c])
                .add(g.constant(Array::zeros(&[b, count, n, c])))
                .reshape(&[b * count, n, c])
        });
        let mask = (shift > 0).then(|| shift_mask(spatial, win, shift, n));
        let attended = self.attn.forward(g, store, windows, extra, mask.as_ref().map(|m| (m, count)));
        let mut attended = window_reverse(attended, win, b, spatial);
        if shift > 0 {
            attended = Self::roll3(attended, shift as isize);
        }
        let x = image.add(attended);
        let x = x.add(self.mlp.forward(g, store, self.norm2.forward(g, store, x)));
        let out = x.permute(&[0, 4, 1, 2, 3]).reshape(&[b, c, len]);
        Some(if n > 0 { Var::concat(&[seq.narrow(2, 0, n), out], 2) } else { out })
    }

    fn finish<'g>(&self, _: &'g Graph, _: &ParamStore, grid: Var<'g>) -> Var<'g> {
        grid
    }
}

#[derive(Clone, Debug)]
pub struct WindowedAttention {
    embed: PatchConv3d,
    layers: Vec<WindowLayer>,
    per_stage: usize,
    stem: ConvUnit,
    up_mid: UpBlock,
    up_full: UpBlock,
    head: Head,
}

impl WindowedAttention {
    pub const STAGES: usize = 2;

    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let [c0, c1, c2] = [cfg.stage_channels[0], cfg.stage_channels[1], cfg.stage_channels[2]];
        let per_stage = cfg.depth / Self::STAGES;
        let embed = PatchConv3d::new(store, "encoder.embed", cfg.in_channels, c1, cfg.patch_size, rng);
        let mut layers = Vec::with_capacity(cfg.depth);
        for stage in 0..Self::STAGES {
            let dim = if stage == 0 { c1 } else { c2 };
            for blk in 0..per_stage {
                let id = format!("stage{}_block{}", stage, blk);
                let merge = (stage > 0 && blk == 0)
                    .then(|| PatchConv3d::new(store, &format!("encoder.merge{}", stage), c1, c2, 2, rng));
                layers.push(WindowLayer::new(store, id, merge, dim, cfg.num_heads, cfg.window_size, blk % 2 == 1, rng));
            }
        }
        Self {
            embed,
            layers,
            per_stage,
            stem: ConvUnit::new(store, "decoder.stem", cfg.in_channels, c0, cfg.circular_padding, rng),
            up_mid: UpBlock::new(store, "decoder.up1", c2, c1, c1, cfg.circular_padding, rng),
            up_full: UpBlock::new(store, "decoder.up0", c1, c0, c0, cfg.circular_padding, rng),
            head: Head::new(store, "decoder.head", c0, cfg.num_classes, rng),
        }
    }

    pub fn hooks(&self, cfg: &BackboneConfig) -> Vec<HookPoint> {
        let k = self.layers.len();
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| HookPoint {
                id: l.id.clone(),
                channels: if i < self.per_stage { cfg.stage_channels[1] } else { cfg.stage_channels[2] },
                needs_mixer: false,
                deep: i + 2 >= k,
            })
            .collect()
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        prompts: Option<&PromptState>,
    ) -> Result<Var<'g>, PromptError> {
        let tokens = self.embed.forward(g, store, x);
        let layers: Vec<&dyn PromptableLayer> = self.layers.iter().map(|l| l as &dyn PromptableLayer).collect();
        let outs = propagate(g, store, &layers, prompts, tokens)?;
        let stage0 = outs[self.per_stage - 1];
        let deep = *outs.last().expect("at least one block");
        let y = self.up_mid.forward(g, store, deep, stage0);
        let y = self.up_full.forward(g, store, y, self.stem.forward(g, store, x));
        Ok(self.head.forward(g, store, y))
    }
}
