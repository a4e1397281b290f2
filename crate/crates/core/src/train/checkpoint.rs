use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{AdamW, EpochRecord, Stage, TrainConfig, TrainError, TrainMode, TrainOutcome};
use crate::backbones::{BackboneConfig, Part, SegmentationModel};
use crate::container::{write_atomic, Container, Tensor, Values};
use crate::prompt::PromptConfig;
use kgpl_tensor::Array;

pub const MANIFEST: &str = "manifest.json";
const OPTIMIZER: &str = "optimizer.kgpl";

/// SHA-256 over the canonical JSON of the model and training configuration.
pub fn config_hash(backbone: &BackboneConfig, prompt: Option<&PromptConfig>, train: &TrainConfig) -> String {
    let text = serde_json::to_string(&json!({ "backbone": backbone, "prompt": prompt, "train": train }))
        .expect("configs serialise");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub backbone: BackboneConfig,
    pub prompt: Option<PromptConfig>,
    pub train: TrainConfig,
    pub mode: TrainMode,
    pub stage: Stage,
    pub epoch: usize,
    pub config_hash: String,
    pub history: Vec<EpochRecord>,
    pub frozen: Vec<Part>,
    pub class_names: Vec<String>,
    /// Structure models: whether the image is appended to the one-hot tissue input.
    #[serde(default)]
    pub with_image: bool,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: SegmentationModel,
    pub optimizer: AdamW,
}

fn ckpt_err(dir: &Path, reason: impl ToString) -> TrainError {
    TrainError::Checkpoint { path: dir.display().to_string(), reason: reason.to_string() }
}

fn part_file(part: Part) -> String {
    format!("{}.kgpl", part.name())
}

impl Checkpoint {
    pub fn from_outcome(outcome: TrainOutcome, train: &TrainConfig, class_names: Vec<String>, with_image: bool) -> Self {
        let model = outcome.model;
        let frozen = Part::ALL
            .into_iter()
            .filter(|&p| {
                let ids = model.partition();
                let ids = ids.get(p);
                !ids.is_empty() && ids.iter().all(|&id| !model.store().is_trainable(id))
            })
            .collect();
        let manifest = CheckpointManifest {
            backbone: model.config().clone(),
            prompt: model.prompt_config().cloned(),
            train: train.clone(),
            mode: outcome.mode,
            stage: outcome.stage,
            epoch: outcome.best_epoch,
            config_hash: config_hash(model.config(), model.prompt_config(), train),
            history: outcome.history,
            frozen,
            class_names,
            with_image,
            optimizer_step: outcome.optimizer.step,
        };
        Self { manifest, model, optimizer: outcome.optimizer }
    }

    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| ckpt_err(dir, e))?;
        let store = self.model.store();
        let partition = self.model.partition();
        for part in Part::ALL {
            let mut c = Container::new(json!({ "partition": part.name() }));
            for &id in partition.get(part) {
                let a = store.get(id);
                c.push(Tensor::new(store.name(id), a.shape(), Values::F64(a.data().to_vec())));
            }
            c.write(&dir.join(part_file(part)))?;
        }
        let o = &self.optimizer;
        let mut c = Container::new(json!({
            "step": o.step, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "weight_decay": o.weight_decay,
        }));
        for (name, (m, v)) in &o.moments {
            c.push(Tensor::new(format!("{}.m", name), m.shape(), Values::F64(m.data().to_vec())));
            c.push(Tensor::new(format!("{}.v", name), v.shape(), Values::F64(v.data().to_vec())));
        }
        c.write(&dir.join(OPTIMIZER))?;
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| ckpt_err(dir, format!("{}: {}", MANIFEST, e)))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| ckpt_err(dir, e))?;
        let mut model = SegmentationModel::build(manifest.backbone.clone())?;
        if let Some(p) = &manifest.prompt {
            model.attach_prompts(p.clone())?;
        }
        let mut seen = 0;
        for part in Part::ALL {
            let c = Container::read(&dir.join(part_file(part)))?;
            for t in c.tensors {
                let id = model.store().id(&t.name).ok_or_else(|| ckpt_err(dir, format!("unknown parameter {}", t.name)))?;
                let Values::F64(values) = t.values else {
                    return Err(ckpt_err(dir, format!("{} is not f64", t.name)));
                };
                if model.store().get(id).shape() != t.shape.as_slice() {
                    return Err(ckpt_err(dir, format!("{} has shape {:?}", t.name, t.shape)));
                }
                model.store_mut().set(id, Array::from_vec(&t.shape, values));
                seen += 1;
            }
        }
        if seen != model.store().len() {
            return Err(ckpt_err(dir, format!("{} of {} parameters stored", seen, model.store().len())));
        }
        for part in Part::ALL {
            model.set_trainable(part, !manifest.frozen.contains(&part));
        }
        let oc = Container::read(&dir.join(OPTIMIZER))?;
        let num = |k: &str| oc.meta[k].as_f64().ok_or_else(|| ckpt_err(dir, format!("optimizer {} missing", k)));
        let mut optimizer = AdamW::new(num("weight_decay")?);
        optimizer.beta1 = num("beta1")?;
        optimizer.beta2 = num("beta2")?;
        optimizer.eps = num("eps")?;
        optimizer.step = oc.meta["step"].as_u64().unwrap_or(0);
        let as_array = |t: &Tensor| match &t.values {
            Values::F64(v) => Ok(Array::from_vec(&t.shape, v.clone())),
            _ => Err(ckpt_err(dir, format!("{} is not f64", t.name))),
        };
        for t in oc.tensors.iter().filter(|t| t.name.ends_with(".m")) {
            let name = t.name.trim_end_matches(".m").to_string();
            let v = oc.get(&format!("{}.v", name)).ok_or_else(|| ckpt_err(dir, format!("{}.v missing", name)))?;
            optimizer.moments.insert(name, (as_array(t)?, as_array(v)?));
        }
        Ok(Self { manifest, model, optimizer })
    }
}
