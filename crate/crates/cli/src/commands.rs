use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kgpl::backbones::{BackboneKind, Part, SegmentationModel};
use kgpl::compare::{compare as compare_reports, Comparison};
use kgpl::data::{structure_names, tissue_names, write_dataset, Manifest, PhantomSpec, Sample, SplitName};
use kgpl::knowledge::EmbeddingCache;
use kgpl::metrics::{report, Report};
use kgpl::train::{
    append_jsonl, cascade_predict, fit, prepare_finetune, pretrain as run_pretrain, Checkpoint, EpochRecord, Example,
    PromptInit, Stage, TrainMode, TrainOutcome,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Backbone, Init, Overrides, StageArg};

const LOG_FILE: &str = "log.jsonl";

pub fn phantoms(spec_path: Option<&Path>, count: usize, out: &Path, seed: Option<u64>, ratios: &[f64]) -> Result<()> {
    let mut spec = match spec_path {
        None => PhantomSpec::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).with_context(|| format!("parsing spec {}", p.display()))?
            } else {
                toml::from_str(&text).with_context(|| format!("parsing spec {}", p.display()))?
            }
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ratios: [f64; 3] = ratios.try_into().map_err(|_| anyhow::anyhow!("--ratios needs three values"))?;
    let manifest = write_dataset(out, &spec, count, ratios)?;
    let n = |s| manifest.entries_in(s).count();
    println!(
        "wrote {} phantoms to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        out.display(),
        n(SplitName::Train),
        n(SplitName::Val),
        n(SplitName::Test)
    );
    Ok(())
}

fn kind_of(b: Backbone) -> BackboneKind {
    match b {
        Backbone::Unet => BackboneKind::ConvUnet,
        Backbone::Unetr => BackboneKind::PatchAttention,
        Backbone::Swin => BackboneKind::WindowedAttention,
    }
}

fn apply(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(d) = &o.data {
        cfg.data = Some(d.clone());
    }
    if let Some(d) = &o.out {
        cfg.out = Some(d.clone());
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.train.lr = lr;
    }
}

struct Dataset {
    dir: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir).with_context(|| format!("opening dataset {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    fn samples(&self, split: SplitName) -> Result<Vec<Sample>> {
        Ok(self.manifest.load_split(&self.dir, split)?)
    }

    fn class_names(&self, stage: Stage, num_classes: usize) -> Vec<String> {
        match (&self.manifest.spec, stage) {
            (Some(spec), Stage::Tissue) => tissue_names(spec),
            (Some(spec), Stage::Structure) => structure_names(spec),
            (None, _) => (0..num_classes).map(|c| format!("class{}", c)).collect(),
        }
    }
}

fn examples(samples: &[Sample], stage: Stage, dims: [usize; 3], with_image: bool) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| match stage {
            Stage::Tissue => Example::tissue(s, dims),
            Stage::Structure => Example::structure(s, dims, with_image),
        })
        .collect::<Result<_, _>>()
        .map_err(Into::into)
}

fn partitions(model: &SegmentationModel) -> Value {
    let counts = model.parameter_counts();
    let trainable = |p: Part| model.partition().get(p).iter().any(|&id| model.store().is_trainable(id));
    let mut out = serde_json::Map::new();
    for p in Part::ALL {
        let n = counts.get(&p).copied().unwrap_or(0);
        out.insert(p.name().into(), json!({ "parameters": n, "trainable": n > 0 && trainable(p) }));
    }
    Value::Object(out)
}

fn start_log(out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log = out.join(LOG_FILE);
    if log.exists() {
        std::fs::remove_file(&log)?;
    }
    Ok(log)
}

fn log_epoch(log: &Path, r: &EpochRecord) {
    let mut v = serde_json::to_value(r).expect("record serialises");
    v["event"] = json!("epoch");
    if let Err(e) = append_jsonl(log, &v) {
        eprintln!("warning: could not write log: {}", e);
    }
    println!("epoch {:>4}  loss {:.6}  val_dsc {:.4}  lr {:.3e}", r.epoch, r.train_loss, r.val_dsc, r.lr);
}

fn finish(log: &Path, out: &Path, outcome: TrainOutcome, cfg: &RunConfig, names: Vec<String>) -> Result<()> {
    append_jsonl(
        log,
        &json!({
            "event": "done",
            "best_epoch": outcome.best_epoch,
            "best_val_dsc": outcome.best_val_dsc,
            "stopped_early": outcome.stopped_early,
            "epochs_run": outcome.history.len(),
        }),
    )?;
    let ckpt = Checkpoint::from_outcome(outcome, &cfg.train, names, cfg.with_image);
    ckpt.save(out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

pub fn pretrain(backbone: Backbone, stage: StageArg, config: Option<&Path>, o: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    apply(&mut cfg, o);
    cfg.train.mode = TrainMode::PretrainFull;
    let stage = match stage {
        StageArg::Tissue => Stage::Tissue,
        StageArg::Structure => Stage::Structure,
    };
    let kind = kind_of(backbone);
    let data = Dataset::open(cfg.data.as_deref().context("no dataset given (--data or `data` in the config)")?)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}_{}", kind.short_name(), stage)));
    let train = data.samples(SplitName::Train)?;
    let val = data.samples(SplitName::Val)?;
    ensure!(!train.is_empty(), "training split is empty");
    let edge = cfg.input_size.unwrap_or(train[0].volume.geometry().dims[0]);
    let dims = [edge; 3];
    let tissue_k = train[0].tissue.num_classes();
    let (in_ch, k) = match stage {
        Stage::Tissue => (1, tissue_k),
        Stage::Structure => (tissue_k + usize::from(cfg.with_image), train[0].structure.num_classes()),
    };
    let model = SegmentationModel::build(cfg.backbone(kind, in_ch, k, edge))?;
    let names = data.class_names(stage, k);
    let (train, val) = (examples(&train, stage, dims, cfg.with_image)?, examples(&val, stage, dims, cfg.with_image)?);

    let log = start_log(&out)?;
    append_jsonl(
        &log,
        &json!({
            "event": "start",
            "command": "pretrain",
            "backbone": kind.short_name(),
            "stage": stage.to_string(),
            "mode": cfg.train.mode,
            "loss": stage.loss(),
            "encoder_frozen": false,
            "trainable_parameters": model.total_parameters(),
            "total_parameters": model.total_parameters(),
            "partitions": partitions(&model),
            "train_subjects": train.len(),
            "val_subjects": val.len(),
            "config": cfg,
        }),
    )?;
    let outcome = run_pretrain(model, &train, &val, stage, &cfg.train, |r| log_epoch(&log, r))?;
    finish(&log, &out, outcome, &cfg, names)
}

pub fn finetune(init: Init, ckpt_dir: &Path, config: Option<&Path>, o: &Overrides) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    apply(&mut cfg, o);
    ensure!(ckpt_dir.join("manifest.json").exists(), "no checkpoint at {}", ckpt_dir.display());
    let ckpt = Checkpoint::load(ckpt_dir).with_context(|| format!("loading checkpoint {}", ckpt_dir.display()))?;
    if ckpt.model.prompts().is_some() {
        bail!("checkpoint {} already carries prompts; fine-tune a pretrained checkpoint", ckpt_dir.display());
    }
    cfg.train.mode = match init {
        Init::Knowledge => TrainMode::FinetuneKgpl,
        Init::Random => TrainMode::FinetuneRandomPrompts,
        Init::Full => TrainMode::FinetuneFull,
    };
    cfg.with_image = ckpt.manifest.with_image;
    let stage = ckpt.manifest.stage;
    let kind = ckpt.model.config().kind;
    let edge = ckpt.model.config().input_dims[0];
    let data = Dataset::open(cfg.data.as_deref().context("no dataset given (--data or `data` in the config)")?)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{}_{}_{}", kind.short_name(), stage, cfg.train.mode)));
    let dims = [edge; 3];
    let train = examples(&data.samples(SplitName::Train)?, stage, dims, cfg.with_image)?;
    let val = examples(&data.samples(SplitName::Val)?, stage, dims, cfg.with_image)?;
    ensure!(!train.is_empty(), "training split is empty");

    let encoder = cfg.encoder()?;
    let template = cfg.template()?;
    let cache = std::env::var_os("KGPL_CACHE_DIR").map(EmbeddingCache::new);
    let prompt = cfg.prompt(kind);
    let prompt_init = match init {
        Init::Knowledge => Some(PromptInit::Knowledge { encoder: &*encoder, template: &template, cache: cache.as_ref() }),
        Init::Random => Some(PromptInit::Random),
        Init::Full => None,
    };
    let log = start_log(&out)?;
    let mut model = ckpt.model;
    let sentences = prepare_finetune(&mut model, &train, cfg.train.mode, prompt, prompt_init)?;
    append_jsonl(
        &log,
        &json!({
            "event": "start",
            "command": "finetune",
            "init": format!("{:?}", init).to_lowercase(),
            "checkpoint": ckpt_dir,
            "backbone": kind.short_name(),
            "stage": stage.to_string(),
            "mode": cfg.train.mode,
            "loss": stage.loss(),
            "encoder_frozen": cfg.train.mode.freezes_encoder(),
            "trainable_parameters": model.trainable_parameters(),
            "total_parameters": model.total_parameters(),
            "pretrain_parameters": model.total_parameters() - model.parameter_counts().get(&Part::Prompt).copied().unwrap_or(0),
            "partitions": partitions(&model),
            "config": cfg,
        }),
    )?;
    if !sentences.is_empty() {
        append_jsonl(&log, &json!({ "event": "knowledge", "encoder": encoder.name(), "sentences": sentences }))?;
    }
    let outcome = fit(model, &train, &val, stage, &cfg.train, |r| log_epoch(&log, r))?;
    finish(&log, &out, outcome, &cfg, ckpt.manifest.class_names)
}

/// Cascade metrics for one split, written as JSON and CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: String,
    pub subjects: usize,
    pub tissue_mode: TrainMode,
    pub structure_mode: TrainMode,
    pub tissue: Report,
    pub structure: Report,
}

impl Evaluation {
    fn to_csv(&self) -> String {
        let mut out = String::from("task,class,dsc,asd\n");
        for (task, r) in [("tissue", &self.tissue), ("structure", &self.structure)] {
            for line in r.to_csv().lines().skip(1) {
                out.push_str(&format!("{},{}\n", task, line));
            }
        }
        out
    }
}

fn split_name(s: &str) -> Result<SplitName> {
    Ok(match s {
        "train" => SplitName::Train,
        "val" => SplitName::Val,
        "test" => SplitName::Test,
        other => bail!("unknown split {:?}", other),
    })
}

pub fn evaluate(tissue_ckpt: &Path, structure_ckpt: &Path, data: &Path, out: &Path, split: &str) -> Result<()> {
    let split = split_name(split)?;
    let load = |p: &Path| Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()));
    let (tissue, structure) = (load(tissue_ckpt)?, load(structure_ckpt)?);
    ensure!(tissue.manifest.stage == Stage::Tissue, "{} is not a tissue checkpoint", tissue_ckpt.display());
    ensure!(structure.manifest.stage == Stage::Structure, "{} is not a structure checkpoint", structure_ckpt.display());
    let data = Dataset::open(data)?;
    let samples = data.samples(split)?;
    ensure!(!samples.is_empty(), "the {} split is empty", split);
    let (mut tissue_reports, mut structure_reports) = (Vec::new(), Vec::new());
    for s in &samples {
        let o = cascade_predict(&tissue.model, &structure.model, &s.volume)?;
        tissue_reports.push(report(&o.tissue, &o.crop.apply_labels(&s.tissue), &tissue.manifest.class_names)?);
        structure_reports.push(report(&o.structure, &o.crop.apply_labels(&s.structure), &structure.manifest.class_names)?);
    }
    let eval = Evaluation {
        split: split.to_string(),
        subjects: samples.len(),
        tissue_mode: tissue.manifest.mode,
        structure_mode: structure.manifest.mode,
        tissue: Report::mean_of(&tissue_reports).expect("non-empty"),
        structure: Report::mean_of(&structure_reports).expect("non-empty"),
    };
    let (json_path, csv_path) = (out.with_extension("json"), out.with_extension("csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&json_path, serde_json::to_string_pretty(&eval)?)?;
    std::fs::write(&csv_path, eval.to_csv())?;
    println!(
        "{} subjects: tissue DSC {:.4} ASD {:.4}; structure DSC {:.4} ASD {:.4}",
        eval.subjects, eval.tissue.average.dsc, eval.tissue.average.asd, eval.structure.average.dsc, eval.structure.average.asd
    );
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyReport {
    Evaluation(Box<Evaluation>),
    Report(Report),
}

#[derive(Serialize)]
struct EvaluationDelta {
    a: String,
    b: String,
    tissue: Comparison,
    structure: Comparison,
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn read_report(p: &Path) -> Result<AnyReport> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is neither an evaluation nor a report", p.display()))
}

pub fn compare(a: &Path, b: &Path, out: &Path) -> Result<()> {
    let value = match (read_report(a)?, read_report(b)?) {
        (AnyReport::Report(x), AnyReport::Report(y)) => serde_json::to_value(compare_reports(&x, &y)?)?,
        (AnyReport::Evaluation(x), AnyReport::Evaluation(y)) => serde_json::to_value(EvaluationDelta {
            a: file_name(a),
            b: file_name(b),
            tissue: compare_reports(&x.tissue, &y.tissue).context("tissue reports")?,
            structure: compare_reports(&x.structure, &y.structure).context("structure reports")?,
        })?,
        _ => bail!("cannot compare an evaluation with a bare report"),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&value)?)?;
    println!("wrote {}", out.display());
    Ok(())
}
