//! Ranked predictions, hierarchical top-k accuracy, weighted P/R/F1 and
//! per-superclass confusion matrices.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub true_label: usize,
    /// `(class, score)` by descending score; ties by ascending class.
    pub ranked: Vec<(usize, f64)>,
}

impl Prediction {
    pub fn from_scores(id: impl Into<String>, true_label: usize, scores: &[f64]) -> Result<Self> {
        if true_label >= scores.len() {
            return Err(Error::Index(format!(
                "true label {true_label} outside {} scored classes",
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("class score {bad}")));
        }
        Ok(Prediction {
            id: id.into(),
            true_label,
            ranked: rank_scores(scores),
        })
    }

    pub fn top1(&self) -> usize {
        self.ranked[0].0
    }

    pub fn num_classes(&self) -> usize {
        self.ranked.len()
    }
}

pub fn rank_scores(scores: &[f64]) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    ranked
}

/// One prediction per row of a `[N×C]` score matrix.
pub fn predictions_from_scores(ids: &[String], labels: &[usize], scores: &Tensor) -> Result<Vec<Prediction>> {
    let (n, _) = scores.dims2();
    if ids.len() != n || labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} score rows for {} ids and {} labels",
            ids.len(),
            labels.len()
        )));
    }
    (0..n)
        .map(|i| Prediction::from_scores(ids[i].clone(), labels[i], scores.row(i)))
        .collect()
}

fn check_predictions(predictions: &[Prediction], taxonomy: &Taxonomy) -> Result<()> {
    if predictions.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    for p in predictions {
        if p.ranked.len() != taxonomy.len() {
            return Err(Error::Contract(format!(
                "prediction {} ranks {} classes, taxonomy has {}",
                p.id,
                p.ranked.len(),
                taxonomy.len()
            )));
        }
    }
    Ok(())
}

/// Fraction of samples whose true group at `level` is among the groups of
/// the top-`k` ranked classes.
pub fn top_k_accuracy(predictions: &[Prediction], taxonomy: &Taxonomy, level: Level, k: usize) -> Result<f64> {
    check_predictions(predictions, taxonomy)?;
    if k == 0 || k > taxonomy.len() {
        return Err(Error::Contract(format!(
            "k = {k} must lie in 1..={} classes",
            taxonomy.len()
        )));
    }
    let hits = predictions
        .iter()
        .filter(|p| {
            let truth = taxonomy.group_of(p.true_label, level);
            p.ranked[..k].iter().any(|&(c, _)| taxonomy.group_of(c, level) == truth)
        })
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Support-weighted precision, recall and F1 over rank-1 predictions.
pub fn weighted_prf(predictions: &[Prediction], num_classes: usize) -> Result<WeightedPrf> {
    if predictions.is_empty() {
        return Err(Error::Contract("no predictions to score".into()));
    }
    let mut support = vec![0usize; num_classes];
    let mut predicted = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for p in predictions {
        let (t, y) = (p.true_label, p.top1());
        if t >= num_classes || y >= num_classes {
            return Err(Error::Index(format!("label outside {num_classes} classes in {}", p.id)));
        }
        support[t] += 1;
        predicted[y] += 1;
        if t == y {
            correct[t] += 1;
        }
    }
    // Support-weighted sums divided once by the total; the recall term
    // reduces to the correct count, so weighted recall is exactly top-1.
    let total = predictions.len() as f64;
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..num_classes {
        if support[c] == 0 {
            continue;
        }
        let w = support[c] as f64;
        let p = if predicted[c] == 0 {
            0.0
        } else {
            correct[c] as f64 / predicted[c] as f64
        };
        let r = correct[c] as f64 / w;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        precision += w * p;
        recall += correct[c] as f64;
        f1 += w * f;
    }
    let (precision, recall, f1) = (precision / total, recall / total, f1 / total);
    Ok(WeightedPrf {
        precision,
        recall,
        f1,
        support: predictions.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelAccuracy {
    pub level: Level,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// L1, L2, L3 in that order.
    pub levels: Vec<LevelAccuracy>,
    /// The `k` used for the "top-5" column; smaller when fewer classes exist.
    pub top5_k: usize,
    pub weighted: WeightedPrf,
}

impl MetricsReport {
    pub fn compute(predictions: &[Prediction], taxonomy: &Taxonomy) -> Result<Self> {
        let k5 = 5.min(taxonomy.len());
        let levels = Level::ALL
            .iter()
            .map(|&level| {
                Ok(LevelAccuracy {
                    level,
                    top1: top_k_accuracy(predictions, taxonomy, level, 1)?,
                    top5: top_k_accuracy(predictions, taxonomy, level, k5)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = MetricsReport {
            levels,
            top5_k: k5,
            weighted: weighted_prf(predictions, taxonomy.len())?,
        };
        report.check_invariants()?;
        Ok(report)
    }

    /// Coarser levels never score below finer ones, and top-5 never below
    /// top-1.
    pub fn check_invariants(&self) -> Result<()> {
        for l in &self.levels {
            if l.top5 < l.top1 {
                return Err(Error::Contract(format!("{} top-5 {} < top-1 {}", l.level, l.top5, l.top1)));
            }
        }
        for pair in self.levels.windows(2) {
            if pair[0].top1 < pair[1].top1 || pair[0].top5 < pair[1].top5 {
                return Err(Error::Contract(format!(
                    "{} accuracy below {} accuracy",
                    pair[0].level, pair[1].level
                )));
            }
        }
        Ok(())
    }

    pub fn level(&self, level: Level) -> &LevelAccuracy {
        self.levels.iter().find(|l| l.level == level).expect("all levels present")
    }

    pub fn top1(&self, level: Level) -> f64 {
        self.level(level).top1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub superclass: String,
    pub classes: Vec<usize>,
    pub class_names: Vec<String>,
    /// Rows: true class; columns: predicted class, then "outside".
    pub counts: Vec<Vec<u64>>,
    /// Counts divided by their column sum; all-zero columns stay zero.
    pub normalized: Vec<Vec<f64>>,
}

pub const OUTSIDE_COLUMN: &str = "outside";

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn header(&self) -> String {
        let mut cols: Vec<String> = vec!["true\\predicted".into()];
        cols.extend(self.class_names.iter().map(|n| csv_field(n)));
        cols.push(OUTSIDE_COLUMN.into());
        cols.join(",")
    }

    pub fn counts_csv(&self) -> String {
        let mut out = self.header() + "\n";
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out += &format!("{},{}\n", csv_field(name), cells.join(","));
        }
        out
    }

    pub fn normalized_csv(&self) -> String {
        let mut out = self.header() + "\n";
        for (name, row) in self.class_names.iter().zip(&self.normalized) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out += &format!("{},{}\n", csv_field(name), cells.join(","));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One matrix per L1 superclass, in taxonomy order. Rows are the true
/// classes inside the superclass; predictions landing elsewhere go to the
/// trailing "outside" column.
pub fn confusion_by_superclass(predictions: &[Prediction], taxonomy: &Taxonomy) -> Result<Vec<ConfusionMatrix>> {
    check_predictions(predictions, taxonomy)?;
    let mut out = Vec::new();
    for (l1, name) in taxonomy.l1_names().iter().enumerate() {
        let classes = taxonomy.classes_in_l1(l1);
        let n = classes.len();
        let mut counts = vec![vec![0u64; n + 1]; n];
        for p in predictions {
            let Some(row) = classes.iter().position(|&c| c == p.true_label) else {
                continue;
            };
            let col = classes.iter().position(|&c| c == p.top1()).unwrap_or(n);
            counts[row][col] += 1;
        }
        let mut normalized = vec![vec![0.0; n + 1]; n];
        for col in 0..=n {
            let sum: u64 = counts.iter().map(|r| r[col]).sum();
            if sum > 0 {
                for row in 0..n {
                    normalized[row][col] = counts[row][col] as f64 / sum as f64;
                }
            }
        }
        out.push(ConfusionMatrix {
            superclass: name.clone(),
            class_names: classes.iter().map(|&c| taxonomy.classes()[c].name.clone()).collect(),
            classes,
            counts,
            normalized,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perfect(taxonomy: &Taxonomy) -> Vec<Prediction> {
        (0..taxonomy.len())
            .map(|c| {
                let mut scores = vec![0.0; taxonomy.len()];
                scores[c] = 1.0;
                Prediction::from_scores(format!("s{c}"), c, &scores).unwrap()
            })
            .collect()
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(
            rank_scores(&[0.5, 0.9, 0.5, 0.1]),
            vec![(1, 0.9), (0, 0.5), (2, 0.5), (3, 0.1)]
        );
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let tax = Taxonomy::yoga82();
        let preds = perfect(&tax);
        for level in Level::ALL {
            for k in [1, 5, 82] {
                assert_eq!(top_k_accuracy(&preds, &tax, level, k).unwrap(), 1.0);
            }
        }
        assert!(top_k_accuracy(&preds, &tax, Level::L3, 83).is_err());
        assert!(top_k_accuracy(&preds, &tax, Level::L3, 0).is_err());
        let report = MetricsReport::compute(&preds, &tax).unwrap();
        assert_eq!(report.weighted.precision, 1.0);
        assert_eq!(report.weighted.support, 82);
    }

    #[test]
    fn exhaustive_k_is_always_one() {
        let tax = Taxonomy::yoga82();
        let preds: Vec<_> = (0..82)
            .map(|c| {
                let scores: Vec<f64> = (0..82).map(|j| ((j * 31 + c * 7) % 82) as f64).collect();
                Prediction::from_scores(format!("{c}"), c, &scores).unwrap()
            })
            .collect();
        assert_eq!(top_k_accuracy(&preds, &tax, Level::L3, 82).unwrap(), 1.0);
    }

    #[test]
    fn coarse_hit_from_wrong_fine_class() {
        // Balasana and another Reclining/Down-facing pose share L2 and L1.
        let tax = Taxonomy::yoga82();
        let bala = tax.index_of("Balasana").unwrap();
        let sibling = (0..82)
            .find(|&c| c != bala && tax.group_of(c, Level::L2) == tax.group_of(bala, Level::L2))
            .unwrap();
        let mut scores = vec![0.0; 82];
        scores[sibling] = 1.0;
        let p = vec![Prediction::from_scores("x", bala, &scores).unwrap()];
        assert_eq!(top_k_accuracy(&p, &tax, Level::L3, 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&p, &tax, Level::L2, 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&p, &tax, Level::L1, 1).unwrap(), 1.0);
    }

    #[test]
    fn single_class_all_correct() {
        let preds: Vec<_> = (0..7)
            .map(|i| Prediction::from_scores(format!("{i}"), 0, &[1.0]).unwrap())
            .collect();
        let w = weighted_prf(&preds, 1).unwrap();
        assert_eq!((w.precision, w.recall, w.f1, w.support), (1.0, 1.0, 1.0, 7));
    }

    #[test]
    fn weighted_prf_hand_example() {
        // truth 0,0,1,1,2 ; predicted 0,1,1,1,0.
        let mk = |t: usize, y: usize| {
            let mut s = vec![0.0; 3];
            s[y] = 1.0;
            Prediction::from_scores("s", t, &s).unwrap()
        };
        let preds = vec![mk(0, 0), mk(0, 1), mk(1, 1), mk(1, 1), mk(2, 0)];
        let w = weighted_prf(&preds, 3).unwrap();
        // class0: P=1/2 R=1/2 ; class1: P=2/3 R=1 ; class2: P=0 R=0.
        let p = 0.4 * 0.5 + 0.4 * (2.0 / 3.0);
        let r = 0.4 * 0.5 + 0.4 * 1.0;
        let f = 0.4 * 0.5 + 0.4 * (2.0 * (2.0 / 3.0) / (5.0 / 3.0));
        assert!((w.precision - p).abs() < 1e-15);
        assert!((w.recall - r).abs() < 1e-15);
        assert!((w.f1 - f).abs() < 1e-15);
        assert!((w.recall - 0.6).abs() < 1e-15);
    }

    #[test]
    fn perfect_confusion_is_identity() {
        let tax = Taxonomy::yoga82();
        let mats = confusion_by_superclass(&perfect(&tax), &tax).unwrap();
        assert_eq!(mats.len(), 6);
        let reclining = mats.iter().find(|m| m.superclass == "Reclining").unwrap();
        assert_eq!(reclining.classes.len(), 19);
        for m in &mats {
            let n = m.classes.len();
            for r in 0..n {
                for c in 0..=n {
                    assert_eq!(m.normalized[r][c], if r == c { 1.0 } else { 0.0 });
                }
            }
        }
        assert_eq!(mats.iter().map(ConfusionMatrix::total).sum::<u64>(), 82);
        assert!(reclining.counts_csv().lines().next().unwrap().ends_with(",outside"));
    }
}
