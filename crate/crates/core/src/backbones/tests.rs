use super::*;
use crate::prompt::PromptConfig;
use rand::Rng;

fn randn(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn with_prompts(kind: BackboneKind, edge: usize) -> SegmentationModel {
    let mut m = SegmentationModel::build(BackboneConfig::new(kind, 1, 4, edge)).unwrap();
    m.attach_prompts(PromptConfig::new(4, 16, kind.default_path())).unwrap();
    let emb = randn(&[4, 16], 9).scale(0.5);
    let state = m.prompts().unwrap().clone();
    state.preinitialize(m.store_mut(), &emb).unwrap();
    m
}

#[test]
fn conv_unet_output_shape() {
    let m = SegmentationModel::build(BackboneConfig::new(BackboneKind::ConvUnet, 1, 4, 16)).unwrap();
    let out = m.logits(&randn(&[2, 1, 16, 16, 16], 1)).unwrap();
    assert_eq!(out.shape(), &[2, 4, 16, 16, 16]);
    assert!(out.all_finite());
}

#[test]
fn patch_attention_token_count() {
    let cfg = BackboneConfig::new(BackboneKind::PatchAttention, 1, 3, 16);
    assert_eq!(cfg.token_count(), 64);
    let m = SegmentationModel::build(cfg).unwrap();
    let out = m.logits(&randn(&[1, 1, 16, 16, 16], 2)).unwrap();
    assert_eq!(out.shape(), &[1, 3, 16, 16, 16]);
}

#[test]
fn indivisible_window_rejected() {
    let mut cfg = BackboneConfig::new(BackboneKind::WindowedAttention, 1, 3, 16);
    cfg.window_size = 5;
    assert!(matches!(SegmentationModel::build(cfg), Err(BackboneError::BadConfig(_))));
    let mut cfg = BackboneConfig::new(BackboneKind::PatchAttention, 1, 3, 18);
    cfg.patch_size = 4;
    assert!(matches!(SegmentationModel::build(cfg), Err(BackboneError::BadConfig(_))));
    let mut cfg = BackboneConfig::new(BackboneKind::ConvUnet, 1, 3, 16);
    cfg.stage_channels = vec![16, 8];
    assert!(matches!(SegmentationModel::build(cfg), Err(BackboneError::BadConfig(_))));
}

#[test]
fn input_shape_checked() {
    let m = SegmentationModel::build(BackboneConfig::new(BackboneKind::ConvUnet, 1, 4, 16)).unwrap();
    assert!(matches!(m.logits(&randn(&[1, 1, 8, 8, 8], 3)), Err(BackboneError::ShapeMismatch(_))));
}

#[test]
fn prompts_keep_output_shape_and_are_deterministic() {
    for kind in [BackboneKind::ConvUnet, BackboneKind::PatchAttention, BackboneKind::WindowedAttention] {
        let m = with_prompts(kind, 16);
        let x = randn(&[2, 1, 16, 16, 16], 4);
        let g = Graph::new();
        let with = m.forward_with(&g, g.constant(x.clone()), true).unwrap().value();
        let without = m.forward_with(&g, g.constant(x.clone()), false).unwrap().value();
        assert_eq!(with.shape(), without.shape(), "{:?}", kind);
        assert!(with.all_finite());
        assert!(!with.bit_eq(&without), "{:?}: prompts had no effect", kind);
        let again = m.logits(&x).unwrap();
        assert!(again.bit_eq(&with));
    }
}

#[test]
fn default_injection_layers() {
    let ids = |kind| {
        let m = with_prompts(kind, 16);
        m.prompts().unwrap().layer_ids().iter().map(|s| s.to_string()).collect::<Vec<_>>()
    };
    assert_eq!(ids(BackboneKind::ConvUnet), ["stage1", "stage2"]);
    assert_eq!(ids(BackboneKind::PatchAttention), ["block2", "block3"]);
    assert_eq!(ids(BackboneKind::WindowedAttention), ["stage1_block0", "stage1_block1"]);
}

#[test]
fn partition_is_exhaustive_and_disjoint() {
    for kind in [BackboneKind::ConvUnet, BackboneKind::PatchAttention, BackboneKind::WindowedAttention] {
        let bare = SegmentationModel::build(BackboneConfig::new(kind, 1, 4, 16)).unwrap();
        assert!(bare.partition().prompt.is_empty());
        let m = with_prompts(kind, 16);
        let p = m.partition();
        let mut all: Vec<ParamId> = p.encoder.iter().chain(&p.decoder).chain(&p.prompt).copied().collect();
        all.sort();
        let n = all.len();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, m.store().len());
        assert!(!p.encoder.is_empty() && !p.decoder.is_empty() && !p.prompt.is_empty());
        for id in &p.decoder {
            let name = m.store().name(*id);
            assert!(name.starts_with("decoder."), "{}", name);
        }
    }
}

#[test]
fn reference_parameter_count() {
    // Hand count for conv_unet, 1 input channel, 4 classes, widths [8, 16, 32]:
    //   stage0: conv 1->8 (224) + norm (16) + conv 8->8 (1736) + norm (16)          = 1992
    //   stage1: down 8->16 (1040) + 2 x (conv 16->16 (6928) + norm (32))             = 14960
    //   stage2: down 16->32 (4128) + 2 x (conv 32->32 (27680) + norm (64))           = 59616
    //   up1: transposed 32->16 (4112) + conv 32->16 (13840) + 32 + 6928 + 32         = 24944
    //   up0: transposed 16->8 (1032) + conv 16->8 (3464) + 16 + 1736 + 16            = 6264
    //   head: 8*4 + 4                                                                = 36
    let m = SegmentationModel::build(BackboneConfig::new(BackboneKind::ConvUnet, 1, 4, 16)).unwrap();
    let counts = m.parameter_counts();
    assert_eq!(counts[&Part::Encoder], 1992 + 14960 + 59616);
    assert_eq!(counts[&Part::Decoder], 24944 + 6264 + 36);
    assert_eq!(m.total_parameters(), 107_812);
}

#[test]
fn frozen_encoder_unchanged_after_step() {
    let mut m = with_prompts(BackboneKind::ConvUnet, 16);
    m.set_trainable(Part::Encoder, false);
    let before = m.store().clone();
    let g = Graph::new();
    let out = m.forward(&g, g.constant(randn(&[1, 1, 16, 16, 16], 5))).unwrap();
    let loss = out.mul(out).mean();
    let grads = g.backward(loss);
    for id in m.partition().encoder {
        assert!(grads.param(id).is_none());
    }
    assert!(m.partition().prompt.iter().any(|id| grads.param(*id).is_some_and(|a| a.max_abs() > 0.0)));
    let updates: Vec<(ParamId, Array)> = grads.param_ids().map(|id| (id, grads.param(id).unwrap().scale(-0.1))).collect();
    drop(g);
    for (id, delta) in updates {
        m.store_mut().get_mut(id).add_assign(&delta);
    }
    for id in m.partition().encoder {
        assert!(m.store().get(id).bit_eq(before.get(id)));
    }
    assert!(m.partition().decoder.iter().any(|&id| !m.store().get(id).bit_eq(before.get(id))));
}

fn roll_grid(a: &Array, shift: usize) -> Array {
    let s = a.shape().to_vec();
    let (lead, d) = (s[0] * s[1], s[2]);
    let mut out = Array::zeros(&s);
    let plane = s[3] * s[4];
    for c in 0..lead {
        for z in 0..d {
            let src = &a.data()[(c * d + z) * plane..(c * d + z + 1) * plane];
            let dz = (z + shift) % d;
            out.data_mut()[(c * d + dz) * plane..(c * d + dz + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

#[test]
fn circular_conv_is_shift_equivariant() {
    // One voxel for a single-stage net; with stride-2 downsampling the smallest
    // exact shift is the total downsampling factor.
    for (stages, shift) in [(vec![4], 1), (vec![4, 8, 8], 4)] {
        let mut cfg = BackboneConfig::new(BackboneKind::ConvUnet, 1, 3, 8);
        cfg.stage_channels = stages;
        cfg.circular_padding = true;
        let m = SegmentationModel::build(cfg).unwrap();
        let x = randn(&[1, 1, 8, 8, 8], 6);
        let shifted_out = m.logits(&roll_grid(&x, shift)).unwrap();
        let out_shifted = roll_grid(&m.logits(&x).unwrap(), shift);
        let err = shifted_out.zip_map(&out_shifted, |a, b| (a - b).abs()).max_abs();
        assert!(err < 1e-5, "shift {} error {}", shift, err);
    }
}
