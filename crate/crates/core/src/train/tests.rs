use super::*;
use crate::backbones::{BackboneConfig, BackboneKind};
use crate::data::{generate_dataset, PhantomSpec};
use crate::knowledge::StubEncoder;
use crate::knowledge::DEFAULT_TEMPLATE;

const EDGE: usize = 8;

fn samples(n: usize) -> Vec<Sample> {
    let spec = PhantomSpec { size: EDGE, ..Default::default() };
    generate_dataset(&spec, n).unwrap()
}

fn tissue_examples(n: usize) -> Vec<Example> {
    samples(n).iter().map(|s| Example::tissue(s, [EDGE; 3]).unwrap()).collect()
}

fn small_model(kind: BackboneKind) -> SegmentationModel {
    let mut cfg = BackboneConfig::new(kind, 1, 4, EDGE);
    cfg.stage_channels = vec![4, 8, 8];
    cfg.num_heads = 2;
    cfg.window_size = 2;
    SegmentationModel::build(cfg).unwrap()
}

fn quick(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig { lr: 1e-2, max_epochs: epochs, early_stop_patience: 100, warmup_epochs: 0, mode, ..Default::default() }
}

fn prompt_cfg(kind: BackboneKind) -> PromptConfig {
    PromptConfig::new(4, 16, kind.default_path())
}

fn template() -> Template {
    Template::new(DEFAULT_TEMPLATE).unwrap()
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { early_stop_patience: 0, ..Default::default() }.validate().is_err());
    let d = TrainConfig::default();
    assert_eq!((d.lr, d.weight_decay, d.grad_clip), (1e-4, 1e-5, 1.0));
}

#[test]
fn stage_losses() {
    assert_eq!(Stage::Tissue.loss(), LossKind::Dice);
    assert_eq!(Stage::Structure.loss(), LossKind::DiceFocal);
}

#[test]
fn flip_twice_is_identity() {
    let ex = &tissue_examples(1)[0];
    assert_eq!(&ex.flipped([true, false, true]).flipped([true, false, true]), ex);
    assert_ne!(&ex.flipped([true, true, true]), ex);
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let data = tissue_examples(4);
    let cfg = quick(TrainMode::PretrainFull, 4);
    let run = || pretrain(small_model(BackboneKind::ConvUnet), &data[..3], &data[3..], Stage::Tissue, &cfg, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.final_losses(), b.final_losses());
    assert_eq!(a.history.len(), 4);
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    assert_eq!(a.loss, LossKind::Dice);
}

#[test]
fn pretrain_rejects_finetune_mode() {
    let data = tissue_examples(2);
    let r = pretrain(small_model(BackboneKind::ConvUnet), &data, &data, Stage::Tissue, &quick(TrainMode::FinetuneKgpl, 1), |_| {});
    assert!(matches!(r, Err(TrainError::BadConfig(_))));
}

#[test]
fn early_stopping_triggers() {
    let data = tissue_examples(2);
    let cfg = TrainConfig { lr: 1e-300, max_epochs: 20, early_stop_patience: 2, warmup_epochs: 0, ..Default::default() };
    let out = fit(small_model(BackboneKind::ConvUnet), &data[..1], &data[1..], Stage::Tissue, &cfg, |_| {}).unwrap();
    assert!(out.stopped_early);
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.best_epoch, 0);
}

#[test]
fn divergence_detected() {
    let mut data = tissue_examples(1);
    data[0].input.data_mut()[0] = f64::NAN;
    let r = fit(small_model(BackboneKind::ConvUnet), &data, &[], Stage::Tissue, &quick(TrainMode::PretrainFull, 1), |_| {});
    assert!(matches!(r, Err(TrainError::Divergence { epoch: 0, step: 0, .. })));
}

#[test]
fn freeze_contract_and_prompt_updates() {
    let data = tissue_examples(2);
    let enc = StubEncoder::with_hidden(3, 16);
    let t = template();
    for kind in [BackboneKind::ConvUnet, BackboneKind::PatchAttention, BackboneKind::WindowedAttention] {
        for mode in [TrainMode::FinetuneKgpl, TrainMode::FinetuneRandomPrompts] {
            let mut model = small_model(kind);
            let pretrain_total = model.trainable_parameters();
            let init = match mode {
                TrainMode::FinetuneKgpl => Some(PromptInit::Knowledge { encoder: &enc, template: &t, cache: None }),
                _ => None,
            };
            prepare_finetune(&mut model, &data, mode, prompt_cfg(kind), init).unwrap();
            assert!(model.trainable_parameters() < pretrain_total + model.parameter_counts()[&Part::Prompt]);
            assert!(model.trainable_parameters() < model.total_parameters());
            let before = model.store().clone();
            let cfg = TrainConfig { batch_size: 1, augment: false, ..quick(mode, 1) };
            let out = fit(model, &data, &[], Stage::Tissue, &cfg, |_| {}).unwrap();
            let after = out.model;
            let p = after.partition();
            for &id in &p.encoder {
                assert!(after.store().get(id).bit_eq(before.get(id)), "{:?} {:?} {}", kind, mode, after.store().name(id));
            }
            for part in [&p.prompt, &p.decoder] {
                assert!(part.iter().any(|&id| !after.store().get(id).bit_eq(before.get(id))), "{:?} {:?}", kind, mode);
            }
            let tokens = after.prompts().unwrap().layers[0].tokens;
            assert!(!after.store().get(tokens).bit_eq(before.get(tokens)));
        }
    }
}

#[test]
fn frozen_partitions_receive_no_gradient() {
    let data = tissue_examples(1);
    let mut model = small_model(BackboneKind::ConvUnet);
    prepare_finetune(&mut model, &data, TrainMode::FinetuneRandomPrompts, prompt_cfg(BackboneKind::ConvUnet), None).unwrap();
    let g = Graph::new();
    let (x, target) = batch(&[&data[0]]);
    let logits = model.forward(&g, g.constant(x)).unwrap();
    let loss = loss_from_logits(logits, &target, LossKind::Dice, &LossConfig::default()).unwrap();
    let grads = g.backward(loss);
    for id in model.partition().encoder {
        assert!(grads.param(id).is_none());
    }
}

#[test]
fn prompt_initialisations_differ() {
    let data = tissue_examples(3);
    let enc = StubEncoder::with_hidden(3, 16);
    let t = template();
    let kind = BackboneKind::ConvUnet;
    let k = knowledge_init(&data, &enc, &t, 4, None).unwrap();
    assert_eq!(k.sentences.len(), 3);

    let mut kgpl = small_model(kind);
    let init = PromptInit::Knowledge { encoder: &enc, template: &t, cache: None };
    prepare_finetune(&mut kgpl, &data, TrainMode::FinetuneKgpl, prompt_cfg(kind), Some(init)).unwrap();
    let tokens = kgpl.prompts().unwrap().layers[0].tokens;
    assert!(kgpl.store().get(tokens).bit_eq(&k.mean));

    let mut random = small_model(kind);
    prepare_finetune(&mut random, &data, TrainMode::FinetuneRandomPrompts, prompt_cfg(kind), None).unwrap();
    let r = random.store().get(random.prompts().unwrap().layers[0].tokens);
    assert!(r.max_abs() > 0.0);
    assert!(!r.bit_eq(&k.mean));
    assert!(data.iter().all(|ex| {
        let (_, e) = subject_embedding(&enc, ex.attrs.as_ref().unwrap(), &t, 4, None).unwrap();
        !r.bit_eq(&e.to_array())
    }));
}

#[test]
fn missing_attributes_rejected() {
    let mut data = tissue_examples(2);
    data[1].attrs = None;
    let enc = StubEncoder::with_hidden(3, 16);
    let t = template();
    let mut model = small_model(BackboneKind::ConvUnet);
    let init = PromptInit::Knowledge { encoder: &enc, template: &t, cache: None };
    let r = prepare_finetune(&mut model, &data, TrainMode::FinetuneKgpl, prompt_cfg(BackboneKind::ConvUnet), Some(init));
    assert!(matches!(r, Err(TrainError::MissingAttributes(1))));
}

#[test]
fn full_finetune_trains_everything_without_prompts() {
    let data = tissue_examples(1);
    let mut model = small_model(BackboneKind::ConvUnet);
    model.set_trainable(Part::Encoder, false);
    prepare_finetune(&mut model, &data, TrainMode::FinetuneFull, prompt_cfg(BackboneKind::ConvUnet), None).unwrap();
    assert!(model.prompts().is_none());
    assert_eq!(model.trainable_parameters(), model.total_parameters());
}

#[test]
fn checkpoint_round_trip() {
    let data = tissue_examples(2);
    let kind = BackboneKind::WindowedAttention;
    let cfg = quick(TrainMode::FinetuneRandomPrompts, 1);
    let (out, _) =
        finetune(small_model(kind), &data[..1], &data[1..], Stage::Tissue, &cfg, prompt_cfg(kind), None, |_| {}).unwrap();
    let names = vec!["background".into(), "a".into(), "b".into(), "c".into()];
    let ckpt = Checkpoint::from_outcome(out, &cfg, names, false);
    assert_eq!(ckpt.manifest.frozen, vec![Part::Encoder]);
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.manifest, ckpt.manifest);
    assert_eq!(back.optimizer, ckpt.optimizer);
    let x = data[0].input.clone().reshape(&[1, 1, EDGE, EDGE, EDGE]);
    assert!(back.model.logits(&x).unwrap().bit_eq(&ckpt.model.logits(&x).unwrap()));
    assert_eq!(back.model.trainable_parameters(), ckpt.model.trainable_parameters());
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(TrainError::Checkpoint { .. })));
}

#[test]
fn cascade_contract() {
    let s = &samples(1)[0];
    let tissue = small_model(BackboneKind::ConvUnet);
    let mut cfg = BackboneConfig::new(BackboneKind::ConvUnet, 4, 10, EDGE);
    cfg.stage_channels = vec![4, 8];
    let structure = SegmentationModel::build(cfg).unwrap();
    assert_eq!(structure.config().in_channels, tissue.config().num_classes);
    let a = cascade_predict(&tissue, &structure, &s.volume).unwrap();
    let b = cascade_predict(&tissue, &structure, &s.volume).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.structure.num_classes(), 10);
    let wrong = small_model(BackboneKind::ConvUnet);
    assert!(matches!(cascade_predict(&tissue, &wrong, &s.volume), Err(TrainError::ShapeMismatch(_))));
}

#[test]
fn structure_input_channels() {
    let s = &samples(1)[0];
    let ex = Example::structure(s, [EDGE; 3], false).unwrap();
    assert_eq!(ex.input.shape(), &[4, EDGE, EDGE, EDGE]);
    let ex = Example::structure(s, [EDGE; 3], true).unwrap();
    assert_eq!(ex.input.shape(), &[5, EDGE, EDGE, EDGE]);
}
