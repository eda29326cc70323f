//! Vision-only softmax classifier sharing the image tower, and the
//! accuracy / cost / latency comparison against the contrastive model.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::dataset::{load_raster, LabeledImages, Manifest, Source};
use crate::encoders::{image_features, init_image_tower, uniform, EncoderConfig, ImageTowerVars, JointModel};
use crate::error::{Error, Result};
use crate::evaluation::{embed_images_chunked, measure_latency, LatencyStats};
use crate::metrics::{predictions_from_scores, rank_scores, top_k_accuracy, Prediction};
use crate::params::{AdamW, ParamStore};
use crate::prompts::ClassPrompt;
use crate::seeding::indexed_seed;
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Image tower plus a `[d×C]` linear head.
pub fn init_baseline_params(config: &EncoderConfig, num_classes: usize, seed: u64) -> Result<ParamStore> {
    if num_classes == 0 {
        return Err(Error::Config("baseline needs at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_image_tower(&mut store, config, &mut rng)?;
    store.insert(HEAD_WEIGHT, uniform(&mut rng, &[config.embed_dim, num_classes], config.embed_dim))?;
    store.insert(HEAD_BIAS, uniform(&mut rng, &[1, num_classes], config.embed_dim))?;
    Ok(store)
}

pub fn baseline_num_classes(params: &ParamStore) -> Result<usize> {
    Ok(params.get(HEAD_WEIGHT)?.dims2().1)
}

/// Class logits `[N×C]`, recorded on the graph.
fn baseline_logits(
    g: &mut Graph,
    params: &ParamStore,
    images: &Tensor,
    config: &EncoderConfig,
) -> Result<crate::autograd::Var> {
    let tower = ImageTowerVars::register(g, params)?;
    let w = g.param(params, HEAD_WEIGHT)?;
    let b = g.param(params, HEAD_BIAS)?;
    let f = image_features(g, &tower, images, config)?;
    let z = g.matmul(f, w)?;
    g.add_row(z, b)
}

pub fn baseline_scores(params: &ParamStore, images: &Tensor, config: &EncoderConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let logits = baseline_logits(&mut g, params, images, config)?;
    Ok(g.value(logits).clone())
}

pub fn baseline_predict(params: &ParamStore, data: &LabeledImages, config: &EncoderConfig) -> Result<Vec<Prediction>> {
    let mut rows = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(128) {
        let s = baseline_scores(params, &Tensor::stack(chunk)?, config)?;
        rows.extend((0..s.dims2().0).map(|i| s.row(i).to_vec()));
    }
    predictions_from_scores(&data.ids, &data.labels, &Tensor::from_rows(&rows)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    /// Held-out top-1 when an evaluation set is given, else training top-1.
    pub accuracy: f64,
}

/// Cross-entropy training on L3 labels with the same optimizer settings as
/// the contrastive run. Batches are seeded shuffles of the training set.
pub fn train_baseline(
    params: &mut ParamStore,
    train: &LabeledImages,
    heldout: Option<&LabeledImages>,
    encoder: &EncoderConfig,
    config: &TrainConfig,
) -> Result<Vec<BaselineEpochLog>> {
    config.validate(train.len())?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let num_classes = baseline_num_classes(params)?;
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Contract(format!("label {bad} outside the {num_classes}-class head")));
    }
    let optimizer = AdamW::default();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(indexed_seed(config.seed, "baseline-batches", epoch as u64)));
        let mut losses = Vec::new();
        for (b, positions) in order.chunks(config.batch_size).enumerate() {
            let images = train.batch(positions)?;
            let targets: Vec<usize> = positions.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::new();
            let logits = baseline_logits(&mut g, params, &images, encoder)?;
            let loss = g.cross_entropy(logits, &targets)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss {value} at epoch {epoch}, batch {b}")));
            }
            params.zero_grads();
            g.backward(loss, params)?;
            optimizer.step(params, config.learning_rate, config.weight_decay)?;
            losses.push(value);
        }
        let eval_set = heldout.unwrap_or(train);
        let preds = baseline_predict(params, eval_set, encoder)?;
        let accuracy = preds.iter().filter(|p| p.top1() == p.true_label).count() as f64 / preds.len() as f64;
        logs.push(BaselineEpochLog {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
            accuracy,
        });
    }
    Ok(logs)
}

/// 1-based epoch of the first maximum of `accuracies`.
pub fn epochs_to_best(accuracies: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a > accuracies[best] {
            best = i;
        }
    }
    if accuracies.is_empty() {
        0
    } else {
        best + 1
    }
}

/// A trained classifier of either kind.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Contrastive {
        model: JointModel,
        params: ParamStore,
        prompts: Vec<ClassPrompt>,
    },
    Baseline {
        encoder: EncoderConfig,
        params: ParamStore,
    },
}

impl TrainedModel {
    fn side(&self) -> usize {
        match self {
            TrainedModel::Contrastive { model, .. } => model.config.image_side,
            TrainedModel::Baseline { encoder, .. } => encoder.image_side,
        }
    }

    /// Class scores `[N×C]` for a set of preprocessed images.
    pub fn scores(&self, images: &[Tensor]) -> Result<Tensor> {
        match self {
            TrainedModel::Contrastive { model, params, prompts } => {
                let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
                let t = model.embed_texts(params, &texts)?;
                let i = embed_images_chunked(model, params, images)?;
                crate::encoders::similarity_matrix(&i, &t, JointModel::logit_scale(params)?)
            }
            TrainedModel::Baseline { encoder, params } => baseline_scores(params, &Tensor::stack(images)?, encoder),
        }
    }

    /// Full single-sample path: load, preprocess, encode, score, argmax.
    pub fn classify_source(&self, source: &Source) -> Result<usize> {
        let raster = load_raster(source, self.side())?;
        let scores = self.scores(&[raster])?;
        Ok(rank_scores(scores.row(0))[0].0)
    }

    pub fn predict(&self, data: &LabeledImages) -> Result<Vec<Prediction>> {
        predictions_from_scores(&data.ids, &data.labels, &self.scores(&data.images)?)
    }
}

/// What a finished run contributes to a comparison.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub name: String,
    pub model: TrainedModel,
    pub train_digest: String,
    pub fine_tune_seconds: f64,
    pub epochs_to_best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub top1_accuracy: f64,
    pub fine_tune_minutes: f64,
    pub inference_ms: f64,
    pub epochs_to_best: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub train_digest: String,
    pub test_digest: String,
    pub test_image_digest: String,
    pub test_count: usize,
    pub models: Vec<ModelSummary>,
    pub latency: Vec<LatencyStats>,
}

impl ComparisonReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>10} {:>14} {:>14} {:>14}",
            "model", "top-1 (%)", "cost (min)", "latency (ms)", "epochs-to-best"
        );
        for m in &self.models {
            let _ = writeln!(
                out,
                "{:<14} {:>10.1} {:>14.3} {:>14.3} {:>14}",
                m.name,
                100.0 * m.top1_accuracy,
                m.fine_tune_minutes,
                m.inference_ms,
                m.epochs_to_best
            );
        }
        let _ = writeln!(out, "test set: {} samples, manifest sha256 {}", self.test_count, self.test_digest);
        out
    }
}

/// Evaluates both runs on the same preprocessed test tensors.
pub fn compare_models(
    runs: &[RunArtifacts],
    test: &Manifest,
    taxonomy: &Taxonomy,
) -> Result<ComparisonReport> {
    let first = runs.first().ok_or_else(|| Error::Contract("no runs to compare".into()))?;
    if let Some(other) = runs.iter().find(|r| r.train_digest != first.train_digest) {
        return Err(Error::Contract(format!(
            "{} and {} were trained on different manifests",
            first.name, other.name
        )));
    }
    let side = first.model.side();
    if runs.iter().any(|r| r.model.side() != side) {
        return Err(Error::Contract("runs expect different input sizes".into()));
    }
    let data = LabeledImages::load(test, side)?;
    let mut models = Vec::with_capacity(runs.len());
    let mut latency = Vec::with_capacity(runs.len());
    for run in runs {
        let preds = run.model.predict(&data)?;
        let top1 = top_k_accuracy(&preds, taxonomy, Level::L3, 1)?;
        let lat = measure_latency(test, &|s| run.model.classify_source(s))?;
        models.push(ModelSummary {
            name: run.name.clone(),
            top1_accuracy: top1,
            fine_tune_minutes: run.fine_tune_seconds / 60.0,
            inference_ms: lat.mean_ms,
            epochs_to_best: run.epochs_to_best,
        });
        latency.push(lat);
    }
    Ok(ComparisonReport {
        train_digest: first.train_digest.clone(),
        test_digest: test.digest(),
        test_image_digest: data.digest(),
        test_count: test.len(),
        models,
        latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SynthConfig};

    fn data(per_class: usize) -> (Taxonomy, Manifest, LabeledImages) {
        let tax = Taxonomy::six_pose_subset();
        let (m, images) = generate_synthetic_dataset(&tax, per_class, 3, &SynthConfig::default()).unwrap();
        let d = LabeledImages {
            ids: m.samples().iter().map(|s| s.id.clone()).collect(),
            images,
            labels: m.labels(),
        };
        (tax, m, d)
    }

    #[test]
    fn head_width_matches_classes() {
        let p = init_baseline_params(&EncoderConfig::default(), 82, 0).unwrap();
        assert_eq!(baseline_num_classes(&p).unwrap(), 82);
        assert_eq!(p.get(HEAD_WEIGHT).unwrap().shape(), &[64, 82]);
    }

    #[test]
    fn training_reduces_loss_and_logs_every_epoch() {
        let (_, _, d) = data(40);
        let enc = EncoderConfig::default();
        let mut p = init_baseline_params(&enc, 6, 1).unwrap();
        let logs = train_baseline(&mut p, &d, None, &enc, &TrainConfig::default()).unwrap();
        assert_eq!(logs.len(), 5);
        assert!(logs[4].mean_loss < logs[0].mean_loss);
    }

    #[test]
    fn zero_learning_rate_stays_near_chance() {
        let (_, _, d) = data(50);
        let enc = EncoderConfig::default();
        let mut p = init_baseline_params(&enc, 6, 2).unwrap();
        let before = p.clone();
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let logs = train_baseline(&mut p, &d, None, &enc, &config).unwrap();
        assert!(p.values_equal(&before));
        // One class can absorb every prediction at init, so only the upper
        // side of chance is bounded.
        assert!(logs.iter().all(|l| l.accuracy <= 1.0 / 6.0 + 0.15));
    }

    #[test]
    fn epochs_to_best_is_first_max() {
        assert_eq!(epochs_to_best(&[0.2, 0.5, 0.5, 0.4]), 2);
        assert_eq!(epochs_to_best(&[0.9]), 1);
        assert_eq!(epochs_to_best(&[]), 0);
    }

    #[test]
    fn same_model_twice_gives_identical_rows() {
        let (tax, m, _) = data(6);
        let enc = EncoderConfig::default();
        let run = RunArtifacts {
            name: "baseline".into(),
            model: TrainedModel::Baseline {
                encoder: enc,
                params: init_baseline_params(&enc, 6, 4).unwrap(),
            },
            train_digest: "abc".into(),
            fine_tune_seconds: 30.0,
            epochs_to_best: 3,
        };
        let mut twin = run.clone();
        twin.name = "twin".into();
        let report = compare_models(&[run.clone(), twin], &m, &tax).unwrap();
        assert_eq!(report.models[0].top1_accuracy, report.models[1].top1_accuracy);
        assert_eq!(report.models[0].epochs_to_best, report.models[1].epochs_to_best);
        assert_eq!(report.models[0].fine_tune_minutes, 0.5);
        let json = serde_json::to_value(&report.models[0]).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        assert!(report.to_table().contains("epochs-to-best"));

        let mut stranger = run.clone();
        stranger.train_digest = "other".into();
        assert!(matches!(compare_models(&[run, stranger], &m, &tax), Err(Error::Contract(_))));
    }
}
