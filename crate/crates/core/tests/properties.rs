use poseclip::dataset::{stratified_split, subsample_per_class, Manifest, Sample, Source, SplitSpec};
use poseclip::metrics::{confusion_by_superclass, top_k_accuracy, weighted_prf, MetricsReport, Prediction};
use poseclip::synth::SyntheticPoseSpec;
use poseclip::taxonomy::{Level, Taxonomy};
use poseclip::tensor::{softmax_rows, transpose, Tensor};
use poseclip::training::contrastive_loss_value;
use proptest::prelude::*;

fn matrix(n: usize, m: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-20.0f64..20.0, n * m).prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
}

fn square() -> impl Strategy<Value = Tensor> {
    (2usize..9).prop_flat_map(|n| matrix(n, n))
}

// Naive log-sum-exp cross-entropy, rows against the diagonal.
fn ce_diag(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - r[i]
        })
        .sum::<f64>()
        / n
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.dims2().0).map(|r| t.row(r).to_vec()).collect()
}

fn predictions(scores: &[Vec<f64>], labels: &[usize]) -> Vec<Prediction> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (s, &l))| Prediction::from_scores(format!("p{i}"), l, s).unwrap())
        .collect()
}

fn taxonomy_and_predictions() -> impl Strategy<Value = (Taxonomy, Vec<Prediction>)> {
    prop_oneof![Just(Taxonomy::six_pose_subset()), Just(Taxonomy::yoga82())].prop_flat_map(|tax| {
        let c = tax.len();
        (
            Just(tax),
            prop::collection::vec((prop::collection::vec(-3.0f64..3.0, c), 0..c), 1..60),
        )
            .prop_map(|(tax, rows)| {
                let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
                let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
                let preds = predictions(&scores, &labels);
                (tax, preds)
            })
    })
}

fn synthetic_manifest(counts: &[usize]) -> Manifest {
    let mut samples = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for j in 0..n {
            samples.push(Sample {
                id: format!("c{c}-{j}"),
                source: Source::Synthetic(SyntheticPoseSpec {
                    archetype: c,
                    seed: j as u64,
                    thickness: None,
                    noise: 0.1,
                }),
                label: c,
            });
        }
    }
    Manifest::new(samples, counts.len()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(t in (1usize..6, 1usize..9).prop_flat_map(|(n, m)| matrix(n, m)), shift in -50.0f64..50.0) {
        let p = softmax_rows(&t).unwrap();
        let q = softmax_rows(&t.map(|v| v + shift)).unwrap();
        for r in 0..p.dims2().0 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn contrastive_loss_matches_naive_oracle(t in square()) {
        let rows = rows_of(&t);
        let cols = rows_of(&transpose(&t).unwrap());
        let oracle = 0.5 * (ce_diag(&rows) + ce_diag(&cols));
        let got = contrastive_loss_value(&t).unwrap();
        prop_assert!((got - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
        prop_assert!(got >= 0.0);
    }

    #[test]
    fn contrastive_loss_is_symmetric_and_permutation_invariant(t in square(), key in any::<u64>()) {
        let n = t.dims2().0;
        let a = contrastive_loss_value(&t).unwrap();
        let b = contrastive_loss_value(&transpose(&t).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ key);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| perm.iter().map(|&j| t.get2(i, j)).collect()).collect();
        let c = contrastive_loss_value(&Tensor::from_rows(&rows).unwrap()).unwrap();
        prop_assert!((a - c).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn split_partitions_the_manifest(counts in prop::collection::vec(2usize..30, 1..8), seed in any::<u64>(), fraction in 0.05f64..0.95) {
        let m = synthetic_manifest(&counts);
        let spec = SplitSpec { train_fraction: fraction, seed, per_class_cap: None };
        let (train, test) = stratified_split(&m, &spec).unwrap();
        prop_assert_eq!(train.len() + test.len(), m.len());
        let mut ids: Vec<&str> = train.samples().iter().chain(test.samples()).map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        let mut want: Vec<&str> = m.samples().iter().map(|s| s.id.as_str()).collect();
        want.sort_unstable();
        prop_assert_eq!(ids, want);
        for (c, (&tr, &te)) in train.class_counts().iter().zip(&test.class_counts()).enumerate() {
            prop_assert!(tr >= 1 && te >= 1, "class {} lost a side", c);
        }
    }

    #[test]
    fn subsampling_is_nested(counts in prop::collection::vec(1usize..30, 1..6), seed in any::<u64>(), big in 1usize..30, small in 1usize..30) {
        let (big, small) = (big.max(small), big.min(small));
        let m = synthetic_manifest(&counts);
        let a = subsample_per_class(&m, big, seed).unwrap();
        let b = subsample_per_class(&m, small, seed).unwrap();
        for (c, &n) in b.class_counts().iter().enumerate() {
            prop_assert_eq!(n, counts[c].min(small));
        }
        let outer: std::collections::HashSet<&str> = a.samples().iter().map(|s| s.id.as_str()).collect();
        prop_assert!(b.samples().iter().all(|s| outer.contains(s.id.as_str())));
    }

    #[test]
    fn metrics_are_ordered_and_bounded((tax, preds) in taxonomy_and_predictions()) {
        let report = MetricsReport::compute(&preds, &tax).unwrap();
        report.check_invariants().unwrap();
        for level in Level::ALL {
            let mut last = 0.0;
            for k in 1..=tax.len().min(10) {
                let acc = top_k_accuracy(&preds, &tax, level, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&acc));
                prop_assert!(acc >= last);
                last = acc;
            }
        }
        prop_assert!(report.top1(Level::L1) >= report.top1(Level::L2));
        prop_assert!(report.top1(Level::L2) >= report.top1(Level::L3));
        prop_assert_eq!(top_k_accuracy(&preds, &tax, Level::L3, tax.len()).unwrap(), 1.0);
    }

    #[test]
    fn weighted_recall_equals_top1((tax, preds) in taxonomy_and_predictions()) {
        let prf = weighted_prf(&preds, tax.len()).unwrap();
        let hits = preds.iter().filter(|p| p.top1() == p.true_label).count();
        prop_assert!((prf.recall - hits as f64 / preds.len() as f64).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&prf.precision));
        prop_assert!((0.0..=1.0).contains(&prf.f1));
    }

    #[test]
    fn confusion_conserves_samples((tax, preds) in taxonomy_and_predictions()) {
        let mats = confusion_by_superclass(&preds, &tax).unwrap();
        let total: u64 = mats.iter().map(|m| m.total()).sum();
        prop_assert_eq!(total, preds.len() as u64);
        for (l1, m) in mats.iter().enumerate() {
            let members = tax.classes_in_l1(l1);
            let expected = preds.iter().filter(|p| members.contains(&p.true_label)).count() as u64;
            prop_assert_eq!(m.total(), expected);
        }
    }

    #[test]
    fn metrics_ignore_prediction_order((tax, preds) in taxonomy_and_predictions()) {
        let mut rev = preds.clone();
        rev.reverse();
        let a = MetricsReport::compute(&preds, &tax).unwrap();
        let b = MetricsReport::compute(&rev, &tax).unwrap();
        for level in Level::ALL {
            prop_assert!((a.top1(level) - b.top1(level)).abs() < 1e-12);
            prop_assert!((a.level(level).top5 - b.level(level).top5).abs() < 1e-12);
        }
        prop_assert!((a.weighted.f1 - b.weighted.f1).abs() < 1e-12);
    }
}
