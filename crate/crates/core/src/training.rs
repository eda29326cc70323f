//! Contrastive fine-tuning: symmetric loss, class-distinct batching and the
//! epoch loop.

use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::{generate_synthetic_dataset, LabeledImages, SynthConfig};
use crate::encoders::{
    clamp_logit_scale, encode_images, encode_texts, similarity_logits, EncoderConfig, JointModel, JointVars,
    TokenizedText, Vocabulary, LOGIT_SCALE,
};
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::error::{Error, Result};
use crate::params::{AdamW, ParamStore};
use crate::prompts::{build_class_prompts, ClassPrompt, PromptPreset};
use crate::seeding::{indexed_seed, sub_seed};
use crate::taxonomy::Taxonomy;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub prompt: PromptPreset,
    pub freeze_logit_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            weight_decay: 1e-3,
            epochs: 5,
            batch_size: 6,
            seed: 0,
            prompt: PromptPreset::default(),
            freeze_logit_scale: false,
        }
    }
}

impl TrainConfig {
    /// Defaults with the batch size matched to the class count: 6 for the
    /// six-pose subset, 82 for the full taxonomy.
    pub fn for_classes(num_classes: usize) -> Self {
        TrainConfig {
            batch_size: num_classes.clamp(2, 82),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be ≥ 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be ≥ 0", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size > train_len {
            return Err(Error::Config(format!(
                "batch size {} exceeds the {train_len} training samples",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batch_losses: Vec<f64>,
    pub seconds: f64,
    pub heldout_top1: Option<f64>,
}

/// `(CE(L, diag) + CE(Lᵀ, diag)) / 2` recorded on the graph.
pub fn contrastive_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let (n, m) = g.value(logits).dims2();
    if n != m {
        return Err(Error::Contract(format!(
            "contrastive loss needs square logits, got {n}×{m}"
        )));
    }
    let targets: Vec<usize> = (0..n).collect();
    let image_loss = g.cross_entropy(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let text_loss = g.cross_entropy(lt, &targets)?;
    let total = g.add(image_loss, text_loss)?;
    Ok(g.scale(total, 0.5))
}

/// Plain evaluation of [`contrastive_loss`].
pub fn contrastive_loss_value(logits: &Tensor) -> Result<f64> {
    if logits.shape().len() != 2 || logits.shape()[0] != logits.shape()[1] {
        return Err(Error::Contract(format!(
            "contrastive loss needs square logits, got {:?}",
            logits.shape()
        )));
    }
    let targets: Vec<usize> = (0..logits.shape()[0]).collect();
    let image_loss = tensor::cross_entropy_mean(logits, &targets)?;
    let text_loss = tensor::cross_entropy_mean(&tensor::transpose(logits)?, &targets)?;
    Ok(0.5 * (image_loss + text_loss))
}

/// Groups sample positions into batches of distinct classes where supply
/// allows.
///
/// Batch composition depends only on `seed`; `epoch` reshuffles the order
/// in which batches are visited. Each batch takes one sample from each of
/// the classes with the most samples left. A trailing singleton is merged
/// into the previous batch.
pub fn make_batches(labels: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Contract(format!(
            "batch size {batch_size} makes the contrastive loss degenerate; use at least 2"
        )));
    }
    if labels.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "batching"));
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut queues: Vec<VecDeque<usize>> = vec![VecDeque::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        queues[l].push_back(i);
    }
    for q in queues.iter_mut() {
        q.make_contiguous().shuffle(&mut rng);
    }
    let mut class_order: Vec<usize> = (0..num_classes).collect();
    class_order.shuffle(&mut rng);

    let mut remaining = labels.len();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut forced_duplicates = 0usize;
    while remaining > 0 {
        let size = batch_size.min(remaining);
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            let mut ranked: Vec<usize> = class_order.iter().copied().filter(|&c| !queues[c].is_empty()).collect();
            // Stable sort keeps the shuffled order among equal supplies.
            ranked.sort_by_key(|&c| std::cmp::Reverse(queues[c].len()));
            let take = (size - batch.len()).min(ranked.len());
            if !batch.is_empty() {
                forced_duplicates += take;
            }
            for &c in &ranked[..take] {
                batch.push(queues[c].pop_front().expect("non-empty queue"));
            }
        }
        remaining -= batch.len();
        batches.push(batch);
    }
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("at least two batches");
        batches.last_mut().expect("a previous batch").extend(last);
    }
    if forced_duplicates > 0 {
        log::warn!("class supply forced {forced_duplicates} duplicate-class slot(s) across batches");
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(indexed_seed(seed, "batch-order", epoch as u64));
    batches.shuffle(&mut order_rng);
    Ok(batches)
}

/// Per-class prompts tokenized once, indexed by class.
pub fn tokenize_prompts(model: &JointModel, prompts: &[ClassPrompt]) -> Result<Vec<TokenizedText>> {
    for (i, p) in prompts.iter().enumerate() {
        if p.class_index != i {
            return Err(Error::Contract(format!(
                "prompt {i} belongs to class {}; prompts must be in class order",
                p.class_index
            )));
        }
    }
    let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
    Ok(model.tokenize_all(&texts))
}

/// Contrastive loss of one batch of images against their class prompts.
pub fn batch_loss(
    g: &mut Graph,
    model: &JointModel,
    params: &ParamStore,
    images: &Tensor,
    texts: &[TokenizedText],
) -> Result<Var> {
    let vars = JointVars::register(g, params)?;
    let img = encode_images(g, &vars, images, &model.config)?;
    let txt = encode_texts(g, &vars, texts)?;
    let logits = similarity_logits(g, img, txt, vars.logit_scale)?;
    contrastive_loss(g, logits)
}

/// Optional per-epoch evaluation returning held-out top-1 accuracy.
pub type HeldoutEval<'a> = &'a dyn Fn(&ParamStore) -> Result<f64>;

/// Fine-tunes both towers (and the logit scale unless frozen) in place.
pub fn fine_tune(
    model: &JointModel,
    params: &mut ParamStore,
    train: &LabeledImages,
    prompts: &[ClassPrompt],
    config: &TrainConfig,
    heldout: Option<HeldoutEval<'_>>,
) -> Result<Vec<EpochLog>> {
    config.validate(train.len())?;
    let tokens = tokenize_prompts(model, prompts)?;
    if let Some(&bad) = train.labels.iter().find(|&&l| l >= tokens.len()) {
        return Err(Error::Contract(format!(
            "label {bad} has no prompt among {} classes",
            tokens.len()
        )));
    }
    params.set_frozen(LOGIT_SCALE, config.freeze_logit_scale)?;
    let optimizer = AdamW::default();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let batches = make_batches(&train.labels, config.batch_size, config.seed, epoch)?;
        let mut batch_losses = Vec::with_capacity(batches.len());
        for (b, positions) in batches.iter().enumerate() {
            let images = train.batch(positions)?;
            let texts: Vec<TokenizedText> = positions.iter().map(|&i| tokens[train.labels[i]].clone()).collect();
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, model, params, &images, &texts)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {epoch}, batch {b}"
                )));
            }
            params.zero_grads();
            g.backward(loss, params)?;
            optimizer.step(params, config.learning_rate, config.weight_decay)?;
            clamp_logit_scale(params)?;
            batch_losses.push(value);
        }
        let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let heldout_top1 = heldout.map(|f| f(params)).transpose()?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}");
        logs.push(EpochLog {
            epoch,
            mean_loss,
            batch_losses,
            seconds,
            heldout_top1,
        });
    }
    Ok(logs)
}

/// Embedding width, hidden width and batch size of the joint-model gradient check.
pub const GRADCHECK_EMBED_DIM: usize = 8;
pub const GRADCHECK_HIDDEN: usize = 16;
pub const GRADCHECK_BATCH: usize = 4;

/// Finite-difference check of every parameter of a small joint model on a
/// batch of four synthetic image/prompt pairs.
pub fn joint_gradient_check(seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let taxonomy = Taxonomy::six_pose_subset().first(GRADCHECK_BATCH)?;
    let prompts = build_class_prompts(&taxonomy, &PromptPreset::default().template())?;
    let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
    let config = EncoderConfig {
        image_side: 16,
        patch_size: 8,
        embed_dim: GRADCHECK_EMBED_DIM,
        hidden: GRADCHECK_HIDDEN,
        max_text_len: 8,
    };
    let model = JointModel::new(config, Vocabulary::build(&texts)?)?;
    let (_, rasters) = generate_synthetic_dataset(
        &taxonomy,
        1,
        sub_seed(seed, "gradcheck-data"),
        &SynthConfig {
            side: config.image_side,
            ..SynthConfig::default()
        },
    )?;
    let images = Tensor::stack(&rasters)?;
    let tokens = model.tokenize_all(&texts);
    let mut params = model.init_params(sub_seed(seed, "gradcheck-init"))?;
    check_gradients(
        |g, p| batch_loss(g, &model, p, &images, &tokens),
        &mut params,
        tolerance,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ln(x: f64) -> f64 {
        x.ln()
    }

    #[test]
    fn joint_model_gradients_match_finite_differences() {
        let report = joint_gradient_check(7, 1e-4).unwrap();
        assert_eq!(report.params.len(), 6);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn uniform_and_saturated_losses() {
        let zero = Tensor::zeros(&[6, 6]);
        assert!((contrastive_loss_value(&zero).unwrap() - ln(6.0)).abs() < 1e-9);
        let sat = Tensor::identity(6).map(|v| v * 1000.0);
        assert!(contrastive_loss_value(&sat).unwrap() < 1e-6);
        assert!(contrastive_loss_value(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn graph_and_plain_losses_agree() {
        let l = Tensor::new(vec![3, 3], vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7, 1.2, 0.0, 0.4]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(l.clone());
        let loss = contrastive_loss(&mut g, v).unwrap();
        assert!((g.scalar(loss) - contrastive_loss_value(&l).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn batch_counts_and_determinism() {
        let labels: Vec<usize> = (0..240).map(|i| i % 6).collect();
        let a = make_batches(&labels, 6, 3, 0).unwrap();
        assert_eq!(a.len(), 40);
        for b in &a {
            let classes: HashSet<_> = b.iter().map(|&i| labels[i]).collect();
            assert_eq!(classes.len(), 6);
        }
        assert_eq!(a, make_batches(&labels, 6, 3, 0).unwrap());
        let later = make_batches(&labels, 6, 3, 1).unwrap();
        assert_ne!(a, later);
        let mut flat: Vec<usize> = later.concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..240).collect::<Vec<_>>());
        assert!(make_batches(&labels, 1, 3, 0).is_err());
    }

    #[test]
    fn full_taxonomy_batches_are_class_distinct() {
        // Unbalanced supply of at least 3 per class over 82 classes.
        let labels: Vec<usize> = (0..82).flat_map(|c| std::iter::repeat_n(c, 3 + c % 4)).collect();
        let batches = make_batches(&labels, 82, 11, 0).unwrap();
        let distinct = |b: &Vec<usize>| b.iter().map(|&i| labels[i]).collect::<HashSet<_>>().len();
        // Every class can fill three batches, so at least three are fully distinct.
        assert!(batches.iter().filter(|b| b.len() == 82 && distinct(b) == 82).count() >= 3);
        let balanced: Vec<usize> = (0..82 * 4).map(|i| i % 82).collect();
        let batches = make_batches(&balanced, 82, 11, 0).unwrap();
        assert_eq!(batches.len(), 4);
        for b in &batches {
            assert_eq!(b.iter().map(|&i| balanced[i]).collect::<HashSet<_>>().len(), 82);
        }
    }

    #[test]
    fn trailing_singleton_is_merged() {
        let labels: Vec<usize> = (0..7).map(|i| i % 3).collect();
        let batches = make_batches(&labels, 3, 0, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() >= 2));
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 7);
    }

    fn toy_setup(per_class: usize) -> (JointModel, LabeledImages, Vec<ClassPrompt>) {
        let tax = Taxonomy::six_pose_subset();
        let (manifest, images) = generate_synthetic_dataset(&tax, per_class, 5, &SynthConfig::default()).unwrap();
        let prompts = build_class_prompts(&tax, &PromptPreset::default().template()).unwrap();
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        let model = JointModel::new(EncoderConfig::default(), Vocabulary::build(&texts).unwrap()).unwrap();
        let data = LabeledImages {
            ids: manifest.samples().iter().map(|s| s.id.clone()).collect(),
            images,
            labels: manifest.labels(),
        };
        (model, data, prompts)
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (model, data, prompts) = toy_setup(6);
        let mut params = model.init_params(1).unwrap();
        let initial = params.clone();
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            ..TrainConfig::default()
        };
        let logs = fine_tune(&model, &mut params, &data, &prompts, &config, None).unwrap();
        assert_eq!(logs.len(), 3);
        assert!(params.values_equal(&initial));
        for l in &logs {
            assert!((l.mean_loss - logs[0].mean_loss).abs() < 1e-9);
            let mean = l.batch_losses.iter().sum::<f64>() / l.batch_losses.len() as f64;
            assert!((mean - l.mean_loss).abs() < 1e-12);
        }
    }

    #[test]
    fn default_training_reduces_loss() {
        let (model, data, prompts) = toy_setup(40);
        let mut params = model.init_params(2).unwrap();
        let logs = fine_tune(&model, &mut params, &data, &prompts, &TrainConfig::default(), None).unwrap();
        assert_eq!(logs.len(), 5);
        assert!(logs[4].mean_loss < logs[0].mean_loss);
        assert!(logs.iter().all(|l| l.mean_loss >= 0.0 && l.mean_loss.is_finite()));
    }

    #[test]
    fn frozen_logit_scale_stays_put() {
        let (model, data, prompts) = toy_setup(4);
        let mut params = model.init_params(3).unwrap();
        let before = JointModel::logit_scale(&params).unwrap();
        let config = TrainConfig {
            learning_rate: 1e-2,
            epochs: 1,
            freeze_logit_scale: true,
            ..TrainConfig::default()
        };
        fine_tune(&model, &mut params, &data, &prompts, &config, None).unwrap();
        assert_eq!(JointModel::logit_scale(&params).unwrap(), before);
    }
}
