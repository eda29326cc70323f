//! Zero-shot classification and the evaluation protocols built on it:
//! repeated splits, frugality sweeps, similarity exports and latency.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{stratified_split, subsample_per_class, LabeledImages, Manifest, SplitSpec};
use crate::encoders::{similarity_matrix, JointModel};
use crate::error::{Error, Result};
use crate::metrics::{predictions_from_scores, MetricsReport, Prediction};
use crate::params::ParamStore;
use crate::prompts::ClassPrompt;
use crate::raster::GrayImage;
use crate::seeding::sub_seed;
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::{self, Tensor};

/// Images are encoded in chunks of this many.
const ENCODE_CHUNK: usize = 128;

pub fn embed_images_chunked(model: &JointModel, params: &ParamStore, images: &[Tensor]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(ENCODE_CHUNK) {
        let emb = model.embed_images(params, &Tensor::stack(chunk)?)?;
        let (n, _) = emb.dims2();
        rows.extend((0..n).map(|i| emb.row(i).to_vec()));
    }
    Tensor::from_rows(&rows)
}

/// Ranks every class prompt for every image by similarity logit.
pub fn zero_shot_classify(
    model: &JointModel,
    params: &ParamStore,
    data: &LabeledImages,
    prompts: &[ClassPrompt],
    taxonomy: &Taxonomy,
) -> Result<Vec<Prediction>> {
    if prompts.len() != taxonomy.len() {
        return Err(Error::Contract(format!(
            "{} prompts for {} taxonomy classes",
            prompts.len(),
            taxonomy.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Contract("no images to classify".into()));
    }
    let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
    let text_emb = model.embed_texts(params, &texts)?;
    let image_emb = embed_images_chunked(model, params, &data.images)?;
    let scores = similarity_matrix(&image_emb, &text_emb, JointModel::logit_scale(params)?)?;
    predictions_from_scores(&data.ids, &data.labels, &scores)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

pub fn mean_std(values: &[f64], kind: StdKind) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => n - 1.0,
    };
    let std = if values.len() < 2 { 0.0 } else { (ss / denom).sqrt() };
    (mean, std)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: Level,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedSplitStats {
    pub repeats: usize,
    pub base_seed: u64,
    pub std_kind: StdKind,
    pub levels: Vec<LevelStats>,
    /// Top-1 accuracy per repeat, `[L1, L2, L3]`.
    pub per_repeat: Vec<[f64; 3]>,
}

/// Trains on a train manifest and reports metrics on a test manifest.
pub type Pipeline<'a> = &'a dyn Fn(&Manifest, &Manifest, u64) -> Result<MetricsReport>;

/// Splits afresh with seed `base_seed + r` for each repeat, runs the
/// pipeline with the same seed, and aggregates top-1 per level.
pub fn repeated_split_eval(
    manifest: &Manifest,
    pipeline: Pipeline<'_>,
    repeats: usize,
    base_seed: u64,
    train_fraction: f64,
    std_kind: StdKind,
) -> Result<RepeatedSplitStats> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut per_repeat = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let seed = base_seed.wrapping_add(r as u64);
        let spec = SplitSpec {
            train_fraction,
            seed,
            per_class_cap: None,
        };
        let report = stratified_split(manifest, &spec)
            .and_then(|(train, test)| pipeline(&train, &test, seed))
            .map_err(|e| e.context(format!("repeat {r}")))?;
        per_repeat.push([
            report.top1(Level::L1),
            report.top1(Level::L2),
            report.top1(Level::L3),
        ]);
        log::info!("repeat {r}: L3 top-1 {:.4}", report.top1(Level::L3));
    }
    let levels = Level::ALL
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let values: Vec<f64> = per_repeat.iter().map(|r| r[i]).collect();
            let (mean, std) = mean_std(&values, std_kind);
            LevelStats { level, mean, std }
        })
        .collect();
    Ok(RepeatedSplitStats {
        repeats,
        base_seed,
        std_kind,
        levels,
        per_repeat,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrugalityRow {
    pub cap: usize,
    pub train_count: usize,
    /// Mean L3 top-1 over the trials.
    pub top1: f64,
    pub trial_top1: Vec<f64>,
    pub test_digest: String,
    /// The cap exceeded the smallest class, leaving it whole.
    pub identity_cap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrugalityTable {
    pub test_count: usize,
    pub rows: Vec<FrugalityRow>,
}

/// Splits once, then for each cap subsamples the training side (nested
/// subsets) and evaluates fresh runs on the untouched test side. Each row
/// averages `trials` runs seeded `split.seed + t`.
pub fn frugality_sweep(
    manifest: &Manifest,
    caps: &[usize],
    split: &SplitSpec,
    trials: usize,
    pipeline: Pipeline<'_>,
) -> Result<FrugalityTable> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    if caps.is_empty() || caps.contains(&0) {
        return Err(Error::Config("caps must be a non-empty list of positive counts".into()));
    }
    if caps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config(format!("caps {caps:?} must be strictly decreasing")));
    }
    let (train, test) = stratified_split(manifest, &SplitSpec { per_class_cap: None, ..*split })?;
    let test_digest = test.digest();
    let smallest = train.class_counts().into_iter().filter(|&c| c > 0).min().unwrap_or(0);
    let subsample_seed = sub_seed(split.seed, "frugality");
    let mut rows = Vec::with_capacity(caps.len());
    for &cap in caps {
        let identity_cap = cap > smallest;
        if identity_cap {
            log::warn!("cap {cap} exceeds the smallest training class ({smallest}); that class is used whole");
        }
        let capped = subsample_per_class(&train, cap, subsample_seed)?;
        let trial_top1 = (0..trials)
            .map(|t| {
                let seed = split.seed.wrapping_add(t as u64);
                let report = pipeline(&capped, &test, seed).map_err(|e| e.context(format!("cap {cap}, trial {t}")))?;
                Ok(report.top1(Level::L3))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(FrugalityRow {
            cap,
            train_count: capped.len(),
            top1: trial_top1.iter().sum::<f64>() / trials as f64,
            trial_top1,
            test_digest: test.digest(),
            identity_cap,
        });
    }
    debug_assert!(rows.iter().all(|r| r.test_digest == test_digest));
    Ok(FrugalityTable {
        test_count: test.len(),
        rows,
    })
}

/// Raw cosine similarity `[N×M]` between unit-norm embedding sets.
pub fn cosine_matrix(image_emb: &Tensor, text_emb: &Tensor) -> Result<Tensor> {
    tensor::matmul(image_emb, &tensor::transpose(text_emb)?)
}

/// Fraction of rows whose maximum (ties to the lower column) is the
/// diagonal entry.
pub fn diagonal_dominance(matrix: &Tensor) -> f64 {
    let (n, m) = matrix.dims2();
    let rows = n.min(m);
    if rows == 0 {
        return 0.0;
    }
    let hits = (0..rows)
        .filter(|&i| crate::metrics::rank_scores(matrix.row(i))[0].0 == i)
        .count();
    hits as f64 / rows as f64
}

pub fn matrix_to_csv(matrix: &Tensor) -> String {
    let (n, _) = matrix.dims2();
    (0..n)
        .map(|i| {
            let cells: Vec<String> = matrix.row(i).iter().map(|v| format!("{v:?}")).collect();
            cells.join(",") + "\n"
        })
        .collect()
}

pub fn matrix_from_csv(text: &str) -> Result<Tensor> {
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("invalid number {c:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

/// Pixels per matrix cell in the heatmap.
const HEATMAP_CELL: usize = 8;

/// Grayscale heatmap mapping cosine `-1..1` to black..white.
pub fn heatmap(matrix: &Tensor) -> GrayImage {
    let (n, m) = matrix.dims2();
    let (height, width) = (n * HEATMAP_CELL, m * HEATMAP_CELL);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = matrix.get2(y / HEATMAP_CELL, x / HEATMAP_CELL);
            pixels.push(crate::raster::quantize((v + 1.0) / 2.0));
        }
    }
    GrayImage { width, height, pixels }
}

/// Largest sample count accepted by [`export_similarity_matrix`].
pub const MAX_SIMILARITY_SAMPLES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityExport {
    pub csv_path: PathBuf,
    pub heatmap_path: PathBuf,
    pub diagonal_dominance: f64,
}

/// Writes `<stem>.csv` and `<stem>.pgm` for image embeddings against their
/// own prompts' embeddings.
pub fn export_similarity_matrix(image_emb: &Tensor, text_emb: &Tensor, stem: &Path) -> Result<SimilarityExport> {
    let (n, _) = image_emb.dims2();
    if n > MAX_SIMILARITY_SAMPLES {
        return Err(Error::Contract(format!(
            "{n} samples exceed the {MAX_SIMILARITY_SAMPLES}-sample readability cap"
        )));
    }
    let cos = cosine_matrix(image_emb, text_emb)?;
    let csv_path = stem.with_extension("csv");
    let heatmap_path = stem.with_extension("pgm");
    std::fs::write(&csv_path, matrix_to_csv(&cos)).map_err(|e| Error::io(&csv_path, e))?;
    heatmap(&cos).save(&heatmap_path)?;
    Ok(SimilarityExport {
        csv_path,
        heatmap_path,
        diagonal_dominance: diagonal_dominance(&cos),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Samples below this count give noisy statistics.
pub const MIN_LATENCY_SAMPLES: usize = 30;

impl LatencyStats {
    /// Nearest-rank percentiles over the measured durations.
    pub fn from_durations(durations: &[Duration]) -> Result<Self> {
        if durations.is_empty() {
            return Err(Error::Contract("no latency measurements".into()));
        }
        let mut ms: Vec<f64> = durations.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let pct = |p: f64| {
            let rank = ((p / 100.0) * ms.len() as f64).ceil().max(1.0) as usize;
            ms[rank - 1]
        };
        Ok(LatencyStats {
            count: ms.len(),
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: pct(50.0),
            p95_ms: pct(95.0),
            min_ms: ms[0],
            max_ms: ms[ms.len() - 1],
        })
    }
}

/// Times `classify` once per sample in the manifest.
pub fn measure_latency(manifest: &Manifest, classify: &dyn Fn(&crate::dataset::Source) -> Result<usize>) -> Result<LatencyStats> {
    if manifest.len() < MIN_LATENCY_SAMPLES {
        log::warn!(
            "latency over {} samples; at least {MIN_LATENCY_SAMPLES} give stable statistics",
            manifest.len()
        );
    }
    let mut durations = Vec::with_capacity(manifest.len());
    for s in manifest.samples() {
        let start = Instant::now();
        std::hint::black_box(classify(&s.source)?);
        durations.push(start.elapsed());
    }
    LatencyStats::from_durations(&durations)
}

/// Latency of the full zero-shot path per sample: raster load and resize,
/// prompt tokenization and encoding, image encoding, logits and argmax.
pub fn measure_inference_latency(
    model: &JointModel,
    params: &ParamStore,
    manifest: &Manifest,
    prompts: &[ClassPrompt],
) -> Result<LatencyStats> {
    let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
    let scale = JointModel::logit_scale(params)?;
    measure_latency(manifest, &|source| {
        let raster = crate::dataset::load_raster(source, model.config.image_side)?;
        let text_emb = model.embed_texts(params, &texts)?;
        let image_emb = model.embed_images(params, &Tensor::stack(&[raster])?)?;
        let logits = similarity_matrix(&image_emb, &text_emb, scale)?;
        Ok(crate::metrics::rank_scores(logits.row(0))[0].0)
    })
}
