//! Command-line driver: config resolution, subcommands and run records.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baseline::{
    epochs_to_best, init_baseline_params, train_baseline, compare_models, RunArtifacts, TrainedModel,
};
use crate::dataset::{
    generate_synthetic_dataset, stratified_split, LabeledImages, Manifest, Sample, Source, SplitSpec, SynthConfig,
};
use crate::encoders::{EncoderConfig, JointModel, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{
    export_similarity_matrix, frugality_sweep, measure_inference_latency, repeated_split_eval, zero_shot_classify,
    StdKind, MAX_SIMILARITY_SAMPLES,
};
use crate::metrics::{confusion_by_superclass, MetricsReport, Prediction};
use crate::params::{Checkpoint, ParamStore};
use crate::pipeline::ContrastivePipeline;
use crate::prompts::{build_class_prompts, PromptTemplate};
use crate::raster::GrayImage;
use crate::seeding::{digest_bytes, sub_seed};
use crate::taxonomy::{Taxonomy, SIX_POSE_SUBSET};
use crate::training::{fine_tune, joint_gradient_check, TrainConfig};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "POSECLIP_OUT";
pub const DEFAULT_OUT: &str = "poseclip-out";
/// Relative tolerance of the `gradcheck` subcommand.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "poseclip", version, about = "Contrastive image-text posture classification at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Render a synthetic dataset to PGM files plus manifest and taxonomy.
    GenData,
    /// Write stratified train/test manifests.
    Split,
    /// Fine-tune the joint model and evaluate it on the held-out split.
    Train,
    /// Classify the held-out split with fresh or checkpointed parameters.
    ZeroShot,
    /// Evaluate a checkpoint: metrics, confusion matrices and latency.
    Eval,
    /// Retrain with shrinking per-class caps on a frozen test split.
    SweepFrugality,
    /// Repeat split, fine-tune and evaluate with consecutive seeds.
    RepeatSplits,
    /// Train the contrastive model and the vision-only baseline and compare them.
    CompareBaseline,
    /// Finite-difference check of the joint model's gradients.
    Gradcheck,
    /// Export image/prompt cosine-similarity matrices and heatmaps.
    ExportSim,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Split => "split",
            Command::Train => "train",
            Command::ZeroShot => "zero-shot",
            Command::Eval => "eval",
            Command::SweepFrugality => "sweep-frugality",
            Command::RepeatSplits => "repeat-splits",
            Command::CompareBaseline => "compare-baseline",
            Command::Gradcheck => "gradcheck",
            Command::ExportSim => "export-sim",
        }
    }
}

/// Flags shared by all subcommands. Each overrides the key of the same name
/// (dashes as underscores) in the `--config` file.
#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// 6 = six-pose subset, 82 = full taxonomy, other N = first N classes.
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    #[arg(long, global = true)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub per_class: Option<usize>,
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    #[arg(long, global = true)]
    pub train_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub cap: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// person-doing, yoga-pose, category or numeric.
    #[arg(long, global = true)]
    pub prompt: Option<String>,
    #[arg(long, global = true)]
    pub freeze_logit_scale: Option<bool>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Comma-separated, strictly decreasing.
    #[arg(long, global = true)]
    pub caps: Option<String>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// population or sample.
    #[arg(long, global = true)]
    pub std: Option<String>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub image_side: Option<usize>,
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    #[arg(long, global = true)]
    pub max_text_len: Option<usize>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let s = |v: Option<String>| v;
        put("out", path(&self.out));
        put("seed", self.seed.map(|v| v.to_string()));
        put("classes", self.classes.map(|v| v.to_string()));
        put("taxonomy", path(&self.taxonomy));
        put("manifest", path(&self.manifest));
        put("checkpoint", path(&self.checkpoint));
        put("per_class", self.per_class.map(|v| v.to_string()));
        put("noise", self.noise.map(|v| v.to_string()));
        put("train_fraction", self.train_fraction.map(|v| v.to_string()));
        put("cap", self.cap.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("weight_decay", self.weight_decay.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("prompt", s(self.prompt.clone()));
        put("freeze_logit_scale", self.freeze_logit_scale.map(|v| v.to_string()));
        put("repeats", self.repeats.map(|v| v.to_string()));
        put("caps", s(self.caps.clone()));
        put("trials", self.trials.map(|v| v.to_string()));
        put("std", s(self.std.clone()));
        put("samples", self.samples.map(|v| v.to_string()));
        put("image_side", self.image_side.map(|v| v.to_string()));
        put("patch_size", self.patch_size.map(|v| v.to_string()));
        put("embed_dim", self.embed_dim.map(|v| v.to_string()));
        put("hidden", self.hidden.map(|v| v.to_string()));
        put("max_text_len", self.max_text_len.map(|v| v.to_string()));
        out
    }
}

/// Every setting of a run after file, environment and flag resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub classes: usize,
    pub taxonomy: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub per_class: usize,
    pub noise: f64,
    pub train_fraction: f64,
    pub cap: Option<usize>,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub repeats: usize,
    pub caps: Vec<usize>,
    pub trials: usize,
    pub std: StdKind,
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from(DEFAULT_OUT),
            seed: 0,
            classes: SIX_POSE_SUBSET.len(),
            taxonomy: None,
            manifest: None,
            checkpoint: None,
            per_class: 40,
            noise: SynthConfig::default().noise,
            train_fraction: SplitSpec::default().train_fraction,
            cap: None,
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            repeats: 78,
            caps: vec![43, 20, 6],
            trials: 1,
            std: StdKind::Population,
            samples: 6,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key = value, found {raw:?}"),
        })?;
        out.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "taxonomy" => self.taxonomy = Some(PathBuf::from(v)),
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "per_class" => self.per_class = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "train_fraction" => self.train_fraction = parse_value(key, v)?,
            "cap" => self.cap = Some(parse_value(key, v)?),
            "lr" | "learning_rate" => self.train.learning_rate = parse_value(key, v)?,
            "weight_decay" => self.train.weight_decay = parse_value(key, v)?,
            "epochs" => self.train.epochs = parse_value(key, v)?,
            "batch_size" => self.train.batch_size = parse_value(key, v)?,
            "prompt" => self.train.prompt = v.parse().map_err(|_| Error::Config(format!("unknown prompt preset {v:?}")))?,
            "freeze_logit_scale" => self.train.freeze_logit_scale = parse_value(key, v)?,
            "repeats" => self.repeats = parse_value(key, v)?,
            "caps" => {
                self.caps = v
                    .split(',')
                    .filter(|c| !c.trim().is_empty())
                    .map(|c| parse_value(key, c))
                    .collect::<Result<_>>()?
            }
            "trials" => self.trials = parse_value(key, v)?,
            "std" => {
                self.std = match v {
                    "population" => StdKind::Population,
                    "sample" => StdKind::Sample,
                    _ => return Err(Error::Config(format!("std must be population or sample, got {v:?}"))),
                }
            }
            "samples" => self.samples = parse_value(key, v)?,
            "image_side" => self.encoder.image_side = parse_value(key, v)?,
            "patch_size" => self.encoder.patch_size = parse_value(key, v)?,
            "embed_dim" => self.encoder.embed_dim = parse_value(key, v)?,
            "hidden" => self.encoder.hidden = parse_value(key, v)?,
            "max_text_len" => self.encoder.max_text_len = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults, then the config file, then the output-dir environment
    /// variable, then flags. The batch size defaults to the class count
    /// (capped at 82) unless set explicitly.
    pub fn resolve(flags: &Flags, env_out: Option<PathBuf>) -> Result<(Self, Taxonomy)> {
        let mut cfg = RunConfig::default();
        let mut pairs = Vec::new();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            pairs.extend(parse_config_file(&text)?);
        }
        if let Some(out) = env_out {
            pairs.push(("out".into(), out.display().to_string()));
        }
        pairs.extend(flags.pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        let mut batch_set = false;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
            batch_set |= k == "batch_size";
        }
        let taxonomy = cfg.load_taxonomy()?;
        if !batch_set {
            cfg.train.batch_size = TrainConfig::for_classes(taxonomy.len()).batch_size;
        }
        cfg.encoder.validate()?;
        cfg.split_spec(0).validate()?;
        Ok((cfg, taxonomy))
    }

    fn load_taxonomy(&self) -> Result<Taxonomy> {
        if let Some(path) = &self.taxonomy {
            return Taxonomy::load(path);
        }
        let full = Taxonomy::yoga82();
        match self.classes {
            0 => Err(Error::Config("classes must be positive".into())),
            6 => Ok(Taxonomy::six_pose_subset()),
            n if n == full.len() => Ok(full),
            n => full.first(n),
        }
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed,
            per_class_cap: self.cap,
        }
    }
}

/// Named sub-seeds of the root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub generation: u64,
    pub split: u64,
    pub run: u64,
}

impl Seeds {
    pub fn new(root: u64) -> Self {
        Seeds {
            root,
            generation: sub_seed(root, "generation"),
            split: sub_seed(root, "split"),
            run: sub_seed(root, "run"),
        }
    }
}

/// Checkpoint header: everything needed to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub encoder: EncoderConfig,
    pub vocab: Vec<String>,
    pub taxonomy_csv: String,
    pub prompt: PromptTemplate,
    pub train: TrainConfig,
    pub train_digest: String,
}

struct Run {
    command: Command,
    cfg: RunConfig,
    taxonomy: Taxonomy,
    seeds: Seeds,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    timed_outputs: Vec<String>,
    timings: BTreeMap<String, f64>,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    /// Writes an artifact; deterministic ones are digested into run.json.
    fn write(&mut self, rel: &str, bytes: &[u8], deterministic: bool) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        if deterministic {
            self.outputs.insert(rel.to_string(), digest_bytes(bytes));
        } else {
            self.timed_outputs.push(rel.to_string());
        }
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T, deterministic: bool) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes(), deterministic)
    }

    fn record_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.insert(path.display().to_string(), digest_bytes(&bytes));
        Ok(())
    }

    fn time<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        self.timings.insert(name.to_string(), start.elapsed().as_secs_f64());
        Ok(out)
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            side: self.cfg.encoder.image_side,
            noise: self.cfg.noise,
        }
    }

    /// The manifest named in the config, or the synthetic set it describes.
    fn manifest(&mut self) -> Result<Manifest> {
        match self.cfg.manifest.clone() {
            Some(path) => {
                self.record_input(&path)?;
                let abs = std::path::absolute(&path).map_err(|e| Error::io(&path, e))?;
                Manifest::load(&abs, self.taxonomy.len())
            }
            None => Ok(generate_synthetic_dataset(
                &self.taxonomy,
                self.cfg.per_class,
                self.seeds.generation,
                &self.synth_config(),
            )?
            .0),
        }
    }

    fn split(&mut self) -> Result<(Manifest, Manifest)> {
        let manifest = self.manifest()?;
        stratified_split(&manifest, &self.cfg.split_spec(self.seeds.split))
    }

    fn pipeline(&self) -> Result<ContrastivePipeline> {
        ContrastivePipeline::new(&self.taxonomy, self.cfg.encoder, self.cfg.train)
    }

    fn write_metrics(&mut self, rel: &str, report: &MetricsReport) -> Result<()> {
        self.write_json(rel, report, true)
    }

    fn write_confusion(&mut self, predictions: &[Prediction]) -> Result<()> {
        for m in confusion_by_superclass(predictions, &self.taxonomy)? {
            let stem = m.superclass.to_lowercase().replace(' ', "_");
            self.write(&format!("reports/confusion/{stem}_counts.csv"), m.counts_csv().as_bytes(), true)?;
            self.write(&format!("reports/confusion/{stem}_normalized.csv"), m.normalized_csv().as_bytes(), true)?;
        }
        Ok(())
    }

    fn save_checkpoint(&mut self, rel: &str, meta: &CheckpointMeta, params: &ParamStore) -> Result<()> {
        let ckpt = Checkpoint {
            metadata: serde_json::to_string(meta)?,
            params: params.clone(),
        };
        self.write(rel, &ckpt.to_bytes(), true)
    }

    /// Loads the configured contrastive checkpoint, checking it was trained
    /// on the same taxonomy.
    fn load_checkpoint(&mut self) -> Result<Option<(JointModel, ParamStore, CheckpointMeta)>> {
        let Some(path) = self.cfg.checkpoint.clone() else {
            return Ok(None);
        };
        self.record_input(&path)?;
        let ckpt = Checkpoint::load(&path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
        if meta.kind != "contrastive" {
            return Err(Error::Config(format!("{} is a {} checkpoint", path.display(), meta.kind)));
        }
        if Taxonomy::parse(&meta.taxonomy_csv)? != self.taxonomy {
            return Err(Error::Config(format!(
                "{} was trained on a different taxonomy",
                path.display()
            )));
        }
        let vocab = Vocabulary::from_text(&(meta.vocab.join("\n") + "\n"))?;
        let model = JointModel::new(meta.encoder, vocab)?;
        Ok(Some((model, ckpt.params, meta)))
    }

    fn contrastive_meta(&self, model: &JointModel, pipeline: &ContrastivePipeline, train: &Manifest) -> CheckpointMeta {
        CheckpointMeta {
            kind: "contrastive".into(),
            encoder: model.config,
            vocab: model.vocab.tokens().to_vec(),
            taxonomy_csv: self.taxonomy.to_csv(),
            prompt: pipeline.template.clone(),
            train: pipeline.train,
            train_digest: train.digest(),
        }
    }

    fn finish(&mut self, started: Instant) -> Result<()> {
        self.timings.insert("total".into(), started.elapsed().as_secs_f64());
        let record = json!({
            "subcommand": self.command.name(),
            "config": self.cfg,
            "taxonomy_classes": self.taxonomy.len(),
            "seeds": self.seeds,
            "digests": {
                "inputs": self.inputs,
                "outputs": self.outputs,
            },
            "timed_outputs": self.timed_outputs,
            "timings_seconds": self.timings,
        });
        let mut text = serde_json::to_string_pretty(&record)?;
        text.push('\n');
        let path = self.path("run.json");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn gen_data(run: &mut Run) -> Result<()> {
    let (manifest, rasters) = generate_synthetic_dataset(
        &run.taxonomy,
        run.cfg.per_class,
        run.seeds.generation,
        &run.synth_config(),
    )?;
    let mut all = Vec::new();
    let mut samples = Vec::with_capacity(manifest.len());
    let data_dir = run.path("data");
    for (s, raster) in manifest.samples().iter().zip(&rasters) {
        let rel = format!("data/images/{}.pgm", s.id);
        let bytes = GrayImage::from_tensor(raster)?.encode_pgm();
        run.write(&rel, &bytes, false)?;
        run.timed_outputs.pop();
        all.extend_from_slice(&bytes);
        samples.push(Sample {
            id: s.id.clone(),
            source: Source::File(data_dir.join("images").join(format!("{}.pgm", s.id))),
            label: s.label,
        });
    }
    run.outputs.insert("data/images/*.pgm".into(), digest_bytes(&all));
    let files = Manifest::new(samples, run.taxonomy.len())?;
    run.write("data/manifest.tsv", files.to_tsv_relative(&data_dir).as_bytes(), true)?;
    run.write("data/taxonomy.csv", run.taxonomy.to_csv().as_bytes(), true)?;
    let summary = json!({
        "classes": run.taxonomy.len(),
        "samples": manifest.len(),
        "class_counts": manifest.class_counts(),
        "synthetic_manifest_sha256": manifest.digest(),
    });
    run.write_json("reports/dataset.json", &summary, true)
}

fn split(run: &mut Run) -> Result<()> {
    let (train, test) = run.split()?;
    let data_dir = run.path("data");
    let data_dir = std::path::absolute(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    run.write("data/train.tsv", train.to_tsv_relative(&data_dir).as_bytes(), true)?;
    run.write("data/test.tsv", test.to_tsv_relative(&data_dir).as_bytes(), true)?;
    let summary = json!({
        "train": train.len(),
        "test": test.len(),
        "train_class_counts": train.class_counts(),
        "test_class_counts": test.class_counts(),
        "train_sha256": train.digest(),
        "test_sha256": test.digest(),
    });
    run.write_json("reports/split.json", &summary, true)
}

fn train(run: &mut Run) -> Result<()> {
    let (train, test) = run.split()?;
    let pipeline = run.pipeline()?;
    let seed = run.seeds.run;
    let result = run.time("fine_tune", |_| pipeline.run(&train, &test, seed))?;
    let meta = run.contrastive_meta(&result.model, &pipeline, &train);
    run.save_checkpoint("ckpt/model.ckpt", &meta, &result.params)?;
    let metrics = json!({
        "zero_shot": result.zero_shot,
        "fine_tuned": result.report,
        "train_count": train.len(),
        "test_count": test.len(),
        "test_sha256": test.digest(),
    });
    run.write_json("reports/metrics.json", &metrics, true)?;
    run.write_json("reports/predictions.json", &result.predictions, true)?;
    run.write_confusion(&result.predictions)?;
    run.write_json("reports/train_log.json", &result.logs, false)
}

fn zero_shot(run: &mut Run) -> Result<()> {
    let (_, test) = run.split()?;
    let (model, params) = match run.load_checkpoint()? {
        Some((model, params, _)) => (model, params),
        None => {
            let pipeline = run.pipeline()?;
            let model = pipeline.model()?;
            let params = pipeline.init_params(&model, run.seeds.run)?;
            (model, params)
        }
    };
    let prompts = build_class_prompts(&run.taxonomy, &run.cfg.train.prompt.template())?;
    let data = LabeledImages::load(&test, model.config.image_side)?;
    let preds = zero_shot_classify(&model, &params, &data, &prompts, &run.taxonomy)?;
    let report = MetricsReport::compute(&preds, &run.taxonomy)?;
    run.write_metrics("reports/zero_shot.json", &report)
}

fn eval(run: &mut Run) -> Result<()> {
    let (model, params, meta) = run
        .load_checkpoint()?
        .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let (_, test) = run.split()?;
    let prompts = build_class_prompts(&run.taxonomy, &meta.prompt)?;
    let data = LabeledImages::load(&test, model.config.image_side)?;
    let preds = zero_shot_classify(&model, &params, &data, &prompts, &run.taxonomy)?;
    let report = MetricsReport::compute(&preds, &run.taxonomy)?;
    run.write_metrics("reports/eval.json", &report)?;
    run.write_confusion(&preds)?;
    let latency = measure_inference_latency(&model, &params, &test, &prompts)?;
    run.write_json("reports/latency.json", &latency, false)
}

fn sweep_frugality(run: &mut Run) -> Result<()> {
    let manifest = run.manifest()?;
    let pipeline = run.pipeline()?;
    let spec = SplitSpec {
        per_class_cap: None,
        ..run.cfg.split_spec(run.seeds.split)
    };
    let (caps, trials) = (run.cfg.caps.clone(), run.cfg.trials);
    let table = run.time("sweep", |_| {
        frugality_sweep(&manifest, &caps, &spec, trials, &|tr, te, s| Ok(pipeline.run(tr, te, s)?.report))
    })?;
    let mut text = format!("{:>6} {:>12} {:>10}\n", "cap", "train count", "top-1 (%)");
    for r in &table.rows {
        text += &format!("{:>6} {:>12} {:>10.1}\n", r.cap, r.train_count, 100.0 * r.top1);
    }
    run.write_json("reports/frugality.json", &table, true)?;
    run.write("reports/frugality.txt", text.as_bytes(), true)
}

fn repeat_splits(run: &mut Run) -> Result<()> {
    let manifest = run.manifest()?;
    let pipeline = run.pipeline()?;
    let (repeats, base, fraction, std) = (run.cfg.repeats, run.seeds.split, run.cfg.train_fraction, run.cfg.std);
    let stats = run.time("repeats", |_| {
        repeated_split_eval(&manifest, &|tr, te, s| Ok(pipeline.run(tr, te, s)?.report), repeats, base, fraction, std)
    })?;
    run.write_json("reports/repeated_splits.json", &stats, true)
}

fn compare_baseline(run: &mut Run) -> Result<()> {
    let (train, test) = run.split()?;
    let pipeline = run.pipeline()?;
    let tr = pipeline.load(&train)?;
    let te = pipeline.load(&test)?;
    let model = pipeline.model()?;
    let prompts = pipeline.prompts()?;
    let seed = run.seeds.run;

    let start = Instant::now();
    let mut params = pipeline.init_params(&model, seed)?;
    let heldout = |p: &ParamStore| pipeline.heldout_top1(&model, p, &te);
    let config = TrainConfig {
        seed: sub_seed(seed, "train"),
        ..pipeline.train
    };
    let logs = fine_tune(&model, &mut params, &tr, &prompts, &config, Some(&heldout))?;
    let contrastive_seconds = start.elapsed().as_secs_f64();
    let curve: Vec<f64> = logs.iter().map(|l| l.heldout_top1.unwrap_or(0.0)).collect();
    let meta = run.contrastive_meta(&model, &pipeline, &train);
    run.save_checkpoint("ckpt/model.ckpt", &meta, &params)?;

    let start = Instant::now();
    let mut base_params = init_baseline_params(&run.cfg.encoder, run.taxonomy.len(), sub_seed(seed, "baseline-init"))?;
    let base_config = TrainConfig {
        seed: sub_seed(seed, "baseline-train"),
        ..run.cfg.train
    };
    let base_logs = train_baseline(&mut base_params, &tr, Some(&te), &run.cfg.encoder, &base_config)?;
    let baseline_seconds = start.elapsed().as_secs_f64();
    let base_meta = CheckpointMeta {
        kind: "baseline".into(),
        vocab: Vec::new(),
        ..meta
    };
    run.save_checkpoint("ckpt/baseline.ckpt", &base_meta, &base_params)?;

    let digest = train.digest();
    let runs = [
        RunArtifacts {
            name: "contrastive".into(),
            model: TrainedModel::Contrastive { model, params, prompts },
            train_digest: digest.clone(),
            fine_tune_seconds: contrastive_seconds,
            epochs_to_best: epochs_to_best(&curve),
        },
        RunArtifacts {
            name: "baseline".into(),
            model: TrainedModel::Baseline {
                encoder: run.cfg.encoder,
                params: base_params,
            },
            train_digest: digest,
            fine_tune_seconds: baseline_seconds,
            epochs_to_best: epochs_to_best(&base_logs.iter().map(|l| l.accuracy).collect::<Vec<_>>()),
        },
    ];
    let report = compare_models(&runs, &test, &run.taxonomy)?;
    run.write_json("reports/comparison.json", &report, false)?;
    run.write("reports/comparison.txt", report.to_table().as_bytes(), false)?;
    let curves = json!({ "contrastive": logs, "baseline": base_logs });
    run.write_json("reports/learning_curves.json", &curves, false)
}

fn gradcheck(run: &mut Run) -> Result<bool> {
    let report = run.time("gradcheck", |r| joint_gradient_check(r.cfg.seed, GRADCHECK_TOLERANCE))?;
    run.write_json("reports/gradcheck.json", &report, true)?;
    Ok(report.passed)
}

fn export_sim(run: &mut Run) -> Result<()> {
    if run.cfg.samples == 0 || run.cfg.samples > MAX_SIMILARITY_SAMPLES {
        return Err(Error::Config(format!(
            "samples must lie in 1..={MAX_SIMILARITY_SAMPLES}"
        )));
    }
    let (_, test) = run.split()?;
    // Round-robin over classes so the first rows are distinct classes.
    let mut by_class: Vec<Vec<&Sample>> = vec![Vec::new(); run.taxonomy.len()];
    for s in test.samples() {
        by_class[s.label].push(s);
    }
    let mut picked = Vec::new();
    for round in 0.. {
        let before = picked.len();
        for class in &by_class {
            if picked.len() < run.cfg.samples {
                if let Some(&s) = class.get(round) {
                    picked.push(s.clone());
                }
            }
        }
        if picked.len() == before || picked.len() >= run.cfg.samples {
            break;
        }
    }
    let chosen = Manifest::new(picked, run.taxonomy.len())?;
    let pipeline = run.pipeline()?;
    let fresh_model = pipeline.model()?;
    let fresh = pipeline.init_params(&fresh_model, run.seeds.run)?;
    let mut summary = BTreeMap::new();
    let mut variants = vec![("zero_shot", fresh_model, fresh, pipeline.template.clone())];
    if let Some((model, params, meta)) = run.load_checkpoint()? {
        variants.push(("fine_tuned", model, params, meta.prompt));
    }
    let reports = run.path("reports");
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    for (name, model, params, template) in variants {
        let names: Vec<String> = run.taxonomy.class_names().map(str::to_string).collect();
        let texts: Vec<String> = chosen
            .samples()
            .iter()
            .map(|s| template.render(&names[s.label], s.label))
            .collect();
        let data = LabeledImages::load(&chosen, model.config.image_side)?;
        let img = crate::evaluation::embed_images_chunked(&model, &params, &data.images)?;
        let txt = model.embed_texts(&params, &texts)?;
        let export = export_similarity_matrix(&img, &txt, &reports.join(format!("similarity_{name}")))?;
        for path in [&export.csv_path, &export.heatmap_path] {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let rel = path.strip_prefix(&run.cfg.out).unwrap_or(path).display().to_string();
            run.outputs.insert(rel, digest_bytes(&bytes));
        }
        summary.insert(name, json!({ "diagonal_dominance": export.diagonal_dominance, "samples": chosen.len() }));
    }
    run.write_json("reports/similarity.json", &summary, true)
}

fn execute(command: Command, flags: &Flags) -> Result<bool> {
    let env_out = std::env::var_os(OUT_ENV).map(PathBuf::from);
    let (cfg, taxonomy) = RunConfig::resolve(flags, env_out)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let started = Instant::now();
    let mut run = Run {
        command,
        seeds: Seeds::new(cfg.seed),
        cfg,
        taxonomy,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        timed_outputs: Vec::new(),
        timings: BTreeMap::new(),
    };
    if let Some(path) = run.cfg.taxonomy.clone() {
        run.record_input(&path)?;
    }
    let mut ok = true;
    match command {
        Command::GenData => gen_data(&mut run)?,
        Command::Split => split(&mut run)?,
        Command::Train => train(&mut run)?,
        Command::ZeroShot => zero_shot(&mut run)?,
        Command::Eval => eval(&mut run)?,
        Command::SweepFrugality => sweep_frugality(&mut run)?,
        Command::RepeatSplits => repeat_splits(&mut run)?,
        Command::CompareBaseline => compare_baseline(&mut run)?,
        Command::Gradcheck => ok = gradcheck(&mut run)?,
        Command::ExportSim => export_sim(&mut run)?,
    }
    run.finish(started)?;
    Ok(ok)
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 success, 1 runtime failure, 2 usage or
/// configuration error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command, &cli.flags) {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: gradient check failed; see reports/gradcheck.json");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptPreset;

    #[test]
    fn config_file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nlr = 0.001\nepochs=3\ncaps = 10, 5\nprompt = yoga-pose\n").unwrap();
        let flags = Flags {
            config: Some(path),
            epochs: Some(7),
            ..Flags::default()
        };
        let (cfg, tax) = RunConfig::resolve(&flags, None).unwrap();
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.caps, vec![10, 5]);
        assert_eq!(cfg.train.prompt, PromptPreset::YogaPose);
        assert_eq!(tax.len(), 6);
        assert_eq!(cfg.train.batch_size, 6);
    }

    #[test]
    fn class_count_selects_taxonomy_and_batch() {
        let full = Flags {
            classes: Some(82),
            ..Flags::default()
        };
        let (cfg, tax) = RunConfig::resolve(&full, None).unwrap();
        assert_eq!((tax.len(), cfg.train.batch_size), (82, 82));
        let (_, tax) = RunConfig::resolve(&Flags { classes: Some(10), ..Flags::default() }, None).unwrap();
        assert_eq!(tax.len(), 10);
    }

    #[test]
    fn bad_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "colour = blue\n").unwrap();
        let err = RunConfig::resolve(&Flags { config: Some(path), ..Flags::default() }, None).unwrap_err();
        assert!(err.is_config());
        let err = RunConfig::resolve(&Flags { std: Some("median".into()), ..Flags::default() }, None).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn env_out_sits_between_file_and_flags() {
        let (cfg, _) = RunConfig::resolve(&Flags::default(), Some(PathBuf::from("/tmp/env-out"))).unwrap();
        assert_eq!(cfg.out, PathBuf::from("/tmp/env-out"));
        let flags = Flags {
            out: Some(PathBuf::from("/tmp/flag-out")),
            ..Flags::default()
        };
        let (cfg, _) = RunConfig::resolve(&flags, Some(PathBuf::from("/tmp/env-out"))).unwrap();
        assert_eq!(cfg.out, PathBuf::from("/tmp/flag-out"));
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["poseclip", "launch-rockets"]), 2);
        assert_eq!(run(["poseclip", "train", "--epochs", "many"]), 2);
    }
}
