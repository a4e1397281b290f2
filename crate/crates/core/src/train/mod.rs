//! Pretraining, prompt fine-tuning, checkpoints and the tissue→structure cascade.

mod cascade;
mod checkpoint;
mod optim;

use std::fmt;
use std::path::Path;

use kgpl_tensor::{Array, Graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{BackboneError, Part, SegmentationModel};
use crate::container::ContainerError;
use crate::data::{corrupt_boundary, flip_labels, preprocess, DataError, Sample};
use crate::domain::{Geometry, LabelMap, SubjectAttributes};
use crate::knowledge::{subject_embedding, EmbeddingCache, KnowledgeEmbedding, KnowledgeError, Template, TextEncoder};
use crate::losses::{loss_from_logits, LossConfig, LossError, LossKind};
use crate::metrics::dsc;
use crate::prompt::{PromptConfig, PromptError};

pub use cascade::{cascade_predict, structure_input, CascadeOutput};
pub use checkpoint::{config_hash, Checkpoint, CheckpointManifest};
pub use optim::{lr_at, AdamW};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("loss diverged at epoch {epoch}, step {step} (value {value})")]
    Divergence { epoch: usize, step: usize, value: f64 },
    #[error("sample {0} has no subject attributes")]
    MissingAttributes(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl From<ContainerError> for TrainError {
    fn from(e: ContainerError) -> Self {
        TrainError::Data(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PretrainFull,
    FinetuneKgpl,
    FinetuneFull,
    FinetuneRandomPrompts,
}

impl TrainMode {
    pub fn uses_prompts(self) -> bool {
        matches!(self, TrainMode::FinetuneKgpl | TrainMode::FinetuneRandomPrompts)
    }

    pub fn freezes_encoder(self) -> bool {
        self.uses_prompts()
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::PretrainFull => "pretrain_full",
            TrainMode::FinetuneKgpl => "finetune_kgpl",
            TrainMode::FinetuneFull => "finetune_full",
            TrainMode::FinetuneRandomPrompts => "finetune_random_prompts",
        })
    }
}

/// Which model of the cascade is trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Tissue,
    Structure,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tissue" => Some(Stage::Tissue),
            "structure" => Some(Stage::Structure),
            _ => None,
        }
    }

    /// Dice alone for tissue, Dice plus focal for structure.
    pub fn loss(self) -> LossKind {
        match self {
            Stage::Tissue => LossKind::Dice,
            Stage::Structure => LossKind::DiceFocal,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Tissue => "tissue",
            Stage::Structure => "structure",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub grad_clip: f64,
    /// Fraction of label-boundary voxels relabelled during pretraining.
    pub label_noise: f64,
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 1000,
            early_stop_patience: 10,
            warmup_epochs: 1,
            seed: 0,
            batch_size: 2,
            mode: TrainMode::PretrainFull,
            grad_clip: 1.0,
            label_noise: 0.05,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if self.early_stop_patience < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return bad("patience, batch_size and max_epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad(format!("label_noise {} outside [0, 1]", self.label_noise));
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One training or evaluation item: channels-first input and a label map on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `(C, D, H, W)`.
    pub input: Array,
    pub target: LabelMap,
    pub attrs: Option<SubjectAttributes>,
}

impl Example {
    /// Z-scored image cropped around its foreground to `dims`, with tissue labels cut alike.
    pub fn tissue(sample: &Sample, dims: [usize; 3]) -> Result<Self, TrainError> {
        let (volume, crop) = preprocess(&sample.volume, dims)?;
        let target = crop.apply_labels(&sample.tissue);
        let input = volume.to_array();
        Ok(Self { input, target, attrs: Some(sample.attrs.clone()) })
    }

    /// One-hot tissue map (optionally with the image appended) against structure labels.
    pub fn structure(sample: &Sample, dims: [usize; 3], with_image: bool) -> Result<Self, TrainError> {
        let (volume, crop) = preprocess(&sample.volume, dims)?;
        let tissue = crop.apply_labels(&sample.tissue);
        let target = crop.apply_labels(&sample.structure);
        let input = structure_input(&tissue, with_image.then_some(&volume));
        Ok(Self { input, target, attrs: Some(sample.attrs.clone()) })
    }

    pub fn geometry(&self) -> &Geometry {
        self.target.geometry()
    }

    pub fn with_noisy_target(&self, fraction: f64, rng: &mut impl Rng) -> Self {
        Self { target: corrupt_boundary(&self.target, fraction, rng), ..self.clone() }
    }

    pub fn flipped(&self, axes: [bool; 3]) -> Self {
        if axes == [false; 3] {
            return self.clone();
        }
        let g = *self.geometry();
        let c = self.input.shape()[0];
        let n = g.len();
        let mut data = vec![0.0; c * n];
        for idx in 0..n {
            let mut p = g.coords(idx);
            for a in 0..3 {
                if axes[a] {
                    p[a] = g.dims[a] - 1 - p[a];
                }
            }
            let to = g.index(p);
            for ch in 0..c {
                data[ch * n + to] = self.input.data()[ch * n + idx];
            }
        }
        Self {
            input: Array::from_vec(self.input.shape(), data),
            target: flip_labels(&self.target, axes),
            attrs: self.attrs.clone(),
        }
    }
}

fn batch(items: &[&Example]) -> (Array, Vec<usize>) {
    let shape = items[0].input.shape();
    let mut data = Vec::with_capacity(items.len() * items[0].input.len());
    let mut target = Vec::with_capacity(items.len() * items[0].target.len());
    for it in items {
        data.extend_from_slice(it.input.data());
        target.extend(it.target.iter());
    }
    let mut full = vec![items.len()];
    full.extend_from_slice(shape);
    (Array::from_vec(&full, data), target)
}

/// Argmax prediction of one example.
pub fn predict(model: &SegmentationModel, input: &Array, geometry: Geometry) -> Result<LabelMap, TrainError> {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let logits = model.logits(&input.clone().reshape(&shape))?;
    let k = model.config().num_classes;
    let scores = logits.reshape(&[k, geometry.dims[0], geometry.dims[1], geometry.dims[2]]);
    Ok(LabelMap::from_scores(&scores, geometry).map_err(DataError::from)?)
}

/// Mean over examples of the mean foreground-class DSC.
pub fn mean_foreground_dsc(model: &SegmentationModel, examples: &[Example]) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let k = model.config().num_classes;
    let mut total = 0.0;
    for ex in examples {
        let pred = predict(model, &ex.input, *ex.geometry())?;
        let per: f64 = (1..k).map(|c| dsc(&pred, &ex.target, c).expect("same grid")).sum();
        total += per / (k - 1) as f64;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: SegmentationModel,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub stopped_early: bool,
    pub loss: LossKind,
    pub mode: TrainMode,
    pub stage: Stage,
}

impl TrainOutcome {
    pub fn final_losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.train_loss).collect()
    }
}

/// Gradient descent over `train` with early stopping on validation DSC. Only parameters
/// marked trainable in `model` are updated.
pub fn fit(
    mut model: SegmentationModel,
    train: &[Example],
    val: &[Example],
    stage: Stage,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::BadConfig("empty training set".into()));
    }
    let kind = stage.loss();
    let k = model.config().num_classes;
    if train.iter().chain(val).any(|e| e.target.num_classes() > k) {
        return Err(TrainError::ShapeMismatch(format!("targets exceed the model's {} classes", k)));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut history = Vec::new();
    let mut best = (f64::NEG_INFINITY, 0usize, model.store().clone(), opt.clone());
    let mut stale = 0;
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<Example> = chunk
                .iter()
                .map(|&i| {
                    let axes = if cfg.augment { [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)] } else { [false; 3] };
                    train[i].flipped(axes)
                })
                .collect();
            let refs: Vec<&Example> = items.iter().collect();
            let (x, target) = batch(&refs);
            lr = lr_at(step, total_steps, warmup, cfg.lr);
            let mut grads = {
                let g = Graph::new();
                let logits = model.forward(&g, g.constant(x))?;
                let loss = loss_from_logits(logits, &target, kind, &cfg.loss)?;
                let value = loss.item();
                if !value.is_finite() {
                    return Err(TrainError::Divergence { epoch, step, value });
                }
                loss_sum += value;
                g.backward(loss)
            };
            grads.clip_global_norm(cfg.grad_clip);
            opt.update(model.store_mut(), &grads, lr);
            step += 1;
            batches += 1;
        }
        let val_dsc = mean_foreground_dsc(&model, val)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / batches as f64, val_dsc, lr };
        on_epoch(&record);
        history.push(record);
        if val_dsc > best.0 {
            best = (val_dsc, epoch, model.store().clone(), opt.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_dsc, best_epoch, store, optimizer) = best;
    *model.store_mut() = store;
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
        best_epoch,
        best_val_dsc,
        stopped_early,
        loss: kind,
        mode: cfg.mode,
        stage,
    })
}

/// Stage-1 training of every partition on boundary-corrupted labels.
pub fn pretrain(
    model: SegmentationModel,
    train: &[Example],
    val: &[Example],
    stage: Stage,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    if cfg.mode != TrainMode::PretrainFull {
        return Err(TrainError::BadConfig(format!("pretrain needs mode pretrain_full, got {}", cfg.mode)));
    }
    let mut model = model;
    for part in Part::ALL {
        model.set_trainable(part, true);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0bad_1abe);
    let noisy: Vec<Example> = train.iter().map(|e| e.with_noisy_target(cfg.label_noise, &mut rng)).collect();
    fit(model, &noisy, val, stage, cfg, on_epoch)
}

/// Knowledge embeddings for each training subject, plus their mean.
pub struct KnowledgeInit {
    pub sentences: Vec<String>,
    pub mean: Array,
}

pub fn knowledge_init(
    examples: &[Example],
    encoder: &dyn TextEncoder,
    template: &Template,
    n: usize,
    cache: Option<&EmbeddingCache>,
) -> Result<KnowledgeInit, TrainError> {
    let mut sentences = Vec::with_capacity(examples.len());
    let mut embeddings: Vec<KnowledgeEmbedding> = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let attrs = ex.attrs.as_ref().ok_or(TrainError::MissingAttributes(i))?;
        let (sentence, emb) = subject_embedding(encoder, attrs, template, n, cache)?;
        sentences.push(sentence.text);
        embeddings.push(emb);
    }
    let mean = KnowledgeEmbedding::mean(&embeddings).ok_or_else(|| TrainError::BadConfig("no training subjects".into()))?;
    Ok(KnowledgeInit { sentences, mean })
}

/// How prompts are initialised before fine-tuning.
pub enum PromptInit<'a> {
    Knowledge { encoder: &'a dyn TextEncoder, template: &'a Template, cache: Option<&'a EmbeddingCache> },
    Random,
}

/// Prepares a pretrained model for a fine-tuning mode: attaches and initialises prompts
/// and sets which partitions train. Returns the knowledge sentences when used.
pub fn prepare_finetune(
    model: &mut SegmentationModel,
    train: &[Example],
    mode: TrainMode,
    prompt: PromptConfig,
    init: Option<PromptInit<'_>>,
) -> Result<Vec<String>, TrainError> {
    let mut sentences = Vec::new();
    if mode.uses_prompts() {
        model.attach_prompts(prompt.clone())?;
        let state = model.prompts().expect("just attached").clone();
        match (mode, init) {
            (TrainMode::FinetuneKgpl, Some(PromptInit::Knowledge { encoder, template, cache })) => {
                if encoder.hidden_size() != prompt.d {
                    return Err(TrainError::BadConfig(format!(
                        "encoder hidden size {} vs prompt D {}",
                        encoder.hidden_size(),
                        prompt.d
                    )));
                }
                let k = knowledge_init(train, encoder, template, prompt.n, cache)?;
                state.preinitialize(model.store_mut(), &k.mean)?;
                sentences = k.sentences;
            }
            (TrainMode::FinetuneRandomPrompts, _) => state.randomize_tokens(model.store_mut(), prompt.seed),
            (m, _) => return Err(TrainError::BadConfig(format!("{} needs a knowledge encoder", m))),
        }
    }
    for part in Part::ALL {
        model.set_trainable(part, true);
    }
    if mode.freezes_encoder() {
        model.set_trainable(Part::Encoder, false);
    }
    Ok(sentences)
}

/// Stage-2 fine-tuning on clean labels.
pub fn finetune(
    mut model: SegmentationModel,
    train: &[Example],
    val: &[Example],
    stage: Stage,
    cfg: &TrainConfig,
    prompt: PromptConfig,
    init: Option<PromptInit<'_>>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainOutcome, Vec<String>), TrainError> {
    if cfg.mode == TrainMode::PretrainFull {
        return Err(TrainError::BadConfig("finetune needs a fine-tuning mode".into()));
    }
    let sentences = prepare_finetune(&mut model, train, cfg.mode, prompt, init)?;
    Ok((fit(model, train, val, stage, cfg, on_epoch)?, sentences))
}

/// Appends one JSON value per line.
pub fn append_jsonl(path: &Path, value: &impl Serialize) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value).expect("serialisable"))
}

#[cfg(test)]
mod tests;
