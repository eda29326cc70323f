//! Manifests, stratified splits, per-class subsampling, raster loading and
//! synthetic dataset generation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{resize_nearest, GrayImage};
use crate::seeding::{digest_bytes, indexed_seed};
use crate::synth::{archetype_order, render_pose, SyntheticPoseSpec, ARCHETYPE_COUNT};
use crate::taxonomy::Taxonomy;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    File(PathBuf),
    Synthetic(SyntheticPoseSpec),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::File(p) => write!(f, "{}", p.display()),
            Source::Synthetic(s) => write!(f, "{s}"),
        }
    }
}

impl Source {
    pub fn parse(text: &str) -> Result<Self> {
        if text.starts_with("synthetic:") {
            Ok(Source::Synthetic(text.parse()?))
        } else if text.is_empty() {
            Err(Error::Config("empty source".into()))
        } else {
            Ok(Source::File(PathBuf::from(text)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub source: Source,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    samples: Vec<Sample>,
    num_classes: usize,
}

impl Manifest {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let mut ids = HashSet::new();
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("label {} outside {num_classes} classes", s.label),
                });
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate sample id {:?}", s.id),
                });
            }
        }
        Ok(Manifest {
            samples,
            num_classes,
        })
    }

    /// Parses `id<TAB>source<TAB>l3_index` lines. Relative file sources are
    /// resolved against `base_dir`.
    pub fn parse(text: &str, num_classes: usize, base_dir: Option<&Path>) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!(
                    "expected 3 tab-separated fields, found {}",
                    fields.len()
                )));
            }
            let mut source = Source::parse(fields[1]).map_err(|e| parse_err(e.to_string()))?;
            if let (Source::File(p), Some(base)) = (&source, base_dir) {
                if p.is_relative() {
                    source = Source::File(base.join(p));
                }
            }
            let label = fields[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("invalid label {:?}", fields[2])))?;
            samples.push(Sample {
                id: fields[0].to_string(),
                source,
                label,
            });
        }
        Manifest::new(samples, num_classes)
    }

    pub fn load(path: &Path, num_classes: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, num_classes, path.parent())
    }

    pub fn to_tsv(&self) -> String {
        self.samples
            .iter()
            .map(|s| format!("{}\t{}\t{}\n", s.id, s.source, s.label))
            .collect()
    }

    /// Like [`Manifest::to_tsv`], with file sources under `base` written
    /// relative to it.
    pub fn to_tsv_relative(&self, base: &Path) -> String {
        self.samples
            .iter()
            .map(|s| {
                let source = match &s.source {
                    Source::File(p) => p.strip_prefix(base).unwrap_or(p).display().to_string(),
                    other => other.to_string(),
                };
                format!("{}\t{}\t{}\n", s.id, source, s.label)
            })
            .collect()
    }

    /// Writes the manifest with file sources relative to its own directory
    /// where possible, so that it loads back to the same samples.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.parent() {
            Some(dir) => self.to_tsv_relative(dir),
            None => self.to_tsv(),
        };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized manifest.
    pub fn digest(&self) -> String {
        digest_bytes(self.to_tsv().as_bytes())
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Sample positions per class label, in manifest order.
    fn positions_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        by_class
    }

    fn select(&self, mut positions: Vec<usize>) -> Manifest {
        positions.sort_unstable();
        Manifest {
            samples: positions.iter().map(|&i| self.samples[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub per_class_cap: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            seed: 0,
            per_class_cap: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction {} must lie strictly between 0 and 1",
                self.train_fraction
            )));
        }
        if self.per_class_cap == Some(0) {
            return Err(Error::Config("per-class cap must be positive".into()));
        }
        Ok(())
    }
}

/// Number of training samples drawn from a class of `n`: `round(f·n)`,
/// kept within `[1, n-1]` so both sides are non-empty.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Per class: seeded shuffle, first `train_count` to train, rest to test.
/// Both outputs keep manifest order. A per-class cap, when set, is applied
/// to the training side afterwards.
pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<(Manifest, Manifest)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut positions) in manifest.positions_by_class() {
        if positions.len() < 2 {
            return Err(Error::Split(format!(
                "class {class} has {} sample(s); at least 2 are needed to split",
                positions.len()
            )));
        }
        positions.shuffle(&mut rng);
        let k = train_count(positions.len(), spec.train_fraction);
        train.extend_from_slice(&positions[..k]);
        test.extend_from_slice(&positions[k..]);
    }
    let mut train = manifest.select(train);
    if let Some(cap) = spec.per_class_cap {
        train = subsample_per_class(&train, cap, spec.seed)?;
    }
    Ok((train, manifest.select(test)))
}

/// Keeps at most `cap` samples per class, chosen by a seeded shuffle.
/// Every class is shuffled regardless of `cap`, so for a fixed seed a
/// smaller cap always selects a subset of a larger one.
pub fn subsample_per_class(manifest: &Manifest, cap: usize, seed: u64) -> Result<Manifest> {
    if cap == 0 {
        return Err(Error::Config("per-class cap must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (_, mut positions) in manifest.positions_by_class() {
        positions.shuffle(&mut rng);
        positions.truncate(cap);
        keep.extend(positions);
    }
    Ok(manifest.select(keep))
}

/// Loads a source as a `[side×side]` grayscale tensor in `[0,1]`.
pub fn load_raster(source: &Source, side: usize) -> Result<Tensor> {
    match source {
        Source::Synthetic(spec) => render_pose(spec, side),
        Source::File(path) => {
            let img = GrayImage::load(path)?;
            resize_nearest(&img.to_tensor(), side)
        }
    }
}

/// Images decoded from a manifest, aligned with its samples.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn load(manifest: &Manifest, side: usize) -> Result<Self> {
        let images = manifest
            .samples()
            .iter()
            .map(|s| load_raster(&s.source, side))
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledImages {
            ids: manifest.samples().iter().map(|s| s.id.clone()).collect(),
            images,
            labels: manifest.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[N×H×W]` batch for the given positions.
    pub fn batch(&self, positions: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = positions.iter().map(|&i| self.images[i].clone()).collect();
        Tensor::stack(&items)
    }

    pub fn digest(&self) -> String {
        crate::seeding::digest_tensors(&self.images)
    }
}

/// Archetype per class: class `i` draws the `i`-th archetype of the
/// farthest-first order, so small class sets get the most distinct figures.
pub fn archetypes_for(taxonomy: &Taxonomy) -> Vec<usize> {
    archetype_order().iter().copied().take(taxonomy.len()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub side: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { side: 32, noise: 0.45 }
    }
}

/// `images_per_class` jittered renders per class with distinct archetypes.
pub fn generate_synthetic_dataset(
    taxonomy: &Taxonomy,
    images_per_class: usize,
    seed: u64,
    config: &SynthConfig,
) -> Result<(Manifest, Vec<Tensor>)> {
    if images_per_class == 0 {
        return Err(Error::Config("images per class must be at least 1".into()));
    }
    if taxonomy.len() > ARCHETYPE_COUNT {
        return Err(Error::Config(format!(
            "{} classes requested but only {ARCHETYPE_COUNT} archetypes exist",
            taxonomy.len()
        )));
    }
    let archetypes = archetypes_for(taxonomy);
    let mut samples = Vec::new();
    let mut rasters = Vec::new();
    for (class, &archetype) in archetypes.iter().enumerate() {
        for j in 0..images_per_class {
            let sample_seed = indexed_seed(seed, &format!("synthetic/class{class}"), j as u64);
            let spec = SyntheticPoseSpec::new(archetype, sample_seed, config.noise)?;
            rasters.push(render_pose(&spec, config.side)?);
            samples.push(Sample {
                id: format!("c{class:02}-{j:04}"),
                source: Source::Synthetic(spec),
                label: class,
            });
        }
    }
    Ok((Manifest::new(samples, taxonomy.len())?, rasters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::digest_tensors;
    use crate::synth::render_template;

    fn toy_manifest(counts: &[usize]) -> Manifest {
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for j in 0..n {
                samples.push(Sample {
                    id: format!("{c}-{j}"),
                    source: Source::Synthetic(SyntheticPoseSpec::new(c, j as u64, 0.0).unwrap()),
                    label: c,
                });
            }
        }
        Manifest::new(samples, counts.len()).unwrap()
    }

    #[test]
    fn manifest_text_round_trip_and_validation() {
        let m = toy_manifest(&[3, 2]);
        let back = Manifest::parse(&m.to_tsv(), 2, None).unwrap();
        assert_eq!(back, m);
        assert!(Manifest::parse("a\tsynthetic:0:1:0\t5\n", 2, None).is_err());
        assert!(Manifest::parse("a\tx.pgm\t0\na\ty.pgm\t1\n", 2, None).is_err());
        let err = Manifest::parse("ok\tx.pgm\t0\nbad line\n", 2, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let rel = Manifest::parse("a\timg/x.pgm\t0\n", 1, Some(Path::new("/data"))).unwrap();
        assert_eq!(rel.samples()[0].source, Source::File(PathBuf::from("/data/img/x.pgm")));
        assert_eq!(rel.to_tsv_relative(Path::new("/data")), "a\timg/x.pgm\t0\n");
    }

    #[test]
    fn ten_samples_split_eight_two() {
        let m = toy_manifest(&[10]);
        let (train, test) = stratified_split(&m, &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let m = toy_manifest(&[7, 12, 5, 9]);
        let spec = SplitSpec {
            seed: 42,
            ..SplitSpec::default()
        };
        let (a_train, a_test) = stratified_split(&m, &spec).unwrap();
        let (b_train, b_test) = stratified_split(&m, &spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let train_ids: HashSet<_> = a_train.samples().iter().map(|s| s.id.clone()).collect();
        let test_ids: HashSet<_> = a_test.samples().iter().map(|s| s.id.clone()).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        let all: HashSet<_> = m.samples().iter().map(|s| s.id.clone()).collect();
        assert_eq!(&train_ids | &test_ids, all);
    }

    #[test]
    fn forty_three_per_class_rounds_per_class() {
        let m = toy_manifest(&[43; 6]);
        let (train, test) = stratified_split(&m, &SplitSpec::default()).unwrap();
        // Oracle: round(0.8 * 43) = round(34.4) = 34 per class.
        let expected = (0.8f64 * 43.0).round() as usize;
        assert_eq!(expected, 34);
        assert_eq!(train.class_counts(), vec![expected; 6]);
        assert_eq!(test.class_counts(), vec![43 - expected; 6]);
    }

    #[test]
    fn tiny_class_is_a_split_error() {
        let m = toy_manifest(&[5, 1]);
        let err = stratified_split(&m, &SplitSpec::default()).unwrap_err();
        assert!(matches!(&err, Error::Split(msg) if msg.contains("class 1")));
    }

    #[test]
    fn subsample_counts() {
        let m = toy_manifest(&[50, 45, 60, 43, 70, 44]);
        assert_eq!(subsample_per_class(&m, 43, 1).unwrap().len(), 258);
        assert_eq!(subsample_per_class(&m, 20, 1).unwrap().len(), 120);
        assert_eq!(subsample_per_class(&m, 6, 1).unwrap().len(), 36);
        assert_eq!(subsample_per_class(&m, 70, 1).unwrap(), m);
        let ids = |m: &Manifest| m.samples().iter().map(|s| s.id.clone()).collect::<HashSet<_>>();
        let (c43, c20, c6) = (
            subsample_per_class(&m, 43, 9).unwrap(),
            subsample_per_class(&m, 20, 9).unwrap(),
            subsample_per_class(&m, 6, 9).unwrap(),
        );
        assert!(ids(&c6).is_subset(&ids(&c20)) && ids(&c20).is_subset(&ids(&c43)));
        let small = toy_manifest(&[3, 10]);
        assert_eq!(subsample_per_class(&small, 5, 0).unwrap().class_counts(), vec![3, 5]);
    }

    #[test]
    fn generator_counts_and_determinism() {
        let tax = Taxonomy::six_pose_subset();
        let cfg = SynthConfig::default();
        let (m, r) = generate_synthetic_dataset(&tax, 40, 7, &cfg).unwrap();
        assert_eq!(m.len(), 240);
        assert_eq!(m.class_counts(), vec![40; 6]);
        let (m2, r2) = generate_synthetic_dataset(&tax, 40, 7, &cfg).unwrap();
        assert_eq!(m, m2);
        assert_eq!(digest_tensors(&r), digest_tensors(&r2));
        let (_, r3) = generate_synthetic_dataset(&tax, 40, 8, &cfg).unwrap();
        assert_ne!(digest_tensors(&r), digest_tensors(&r3));
        // The manifest's synthetic sources reproduce the rasters.
        for (s, raster) in m.samples().iter().zip(&r).take(12) {
            assert_eq!(&load_raster(&s.source, 32).unwrap(), raster);
        }
    }

    #[test]
    fn class_templates_are_pairwise_separated() {
        // Zero-jitter, zero-noise renders of every Yoga-82 archetype pair
        // differ by a clear margin.
        let tax = Taxonomy::yoga82();
        let templates: Vec<Tensor> = archetypes_for(&tax)
            .iter()
            .map(|&a| render_template(a, 32).unwrap())
            .collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..templates.len() {
            for j in i + 1..templates.len() {
                let d: f64 = templates[i]
                    .data()
                    .iter()
                    .zip(templates[j].data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 2.0, "closest archetypes only {min_dist} apart");
    }

    #[test]
    fn file_sources_load_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.pgm");
        GrayImage {
            width: 64,
            height: 64,
            pixels: vec![255; 64 * 64],
        }
        .save(&path)
        .unwrap();
        let t = load_raster(&Source::File(path), 32).unwrap();
        assert_eq!(t.shape(), &[32, 32]);
        assert!(t.data().iter().all(|&v| v == 1.0));
        let missing = load_raster(&Source::File(dir.path().join("nope.pgm")), 32).unwrap_err();
        assert!(missing.to_string().contains("nope.pgm"));
    }

    #[test]
    fn too_many_classes_for_archetypes() {
        let records: Vec<_> = (0..ARCHETYPE_COUNT + 1)
            .map(|i| crate::taxonomy::ClassRecord {
                name: format!("pose{i}"),
                l2: "g".into(),
                l1: "top".into(),
            })
            .collect();
        let tax = Taxonomy::from_records(records).unwrap();
        assert!(matches!(
            generate_synthetic_dataset(&tax, 1, 0, &SynthConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
