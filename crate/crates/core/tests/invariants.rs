//! Property tests over metrics, splits, configuration and the tensor format.

use alfa_core::datasets::{lodo_split, synth_generate, SynthSpec};
use alfa_core::eval::{accuracy, auroc_macro, macro_recall, summarize, MetricsRow};
use alfa_core::harness::ExperimentConfig;
use alfa_core::tensor::io;
use alfa_core::{Graph, Tensor};
use proptest::prelude::*;

/// AUROC as the share of (positive, negative) pairs ordered correctly, ties
/// counting one half.
fn pairwise_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut won = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                won += match si.partial_cmp(&sj).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    100.0 * won / pairs
}

fn row(target: &str, acc: f64, auc: f64, rec: f64) -> MetricsRow {
    MetricsRow {
        target: target.into(),
        seed: 3,
        mask: "abg".into(),
        phase2: true,
        accuracy: acc,
        auroc: auc,
        recall: rec,
    }
}

proptest! {
    #[test]
    fn auroc_matches_pair_enumeration(
        draws in proptest::collection::vec((0u8..5, any::<bool>()), 2..=12)
    ) {
        let positive: Vec<bool> = draws.iter().map(|d| d.1).collect();
        prop_assume!(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p));
        // Coarse scores so that ties are common.
        let s: Vec<f64> = draws.iter().map(|d| d.0 as f64 / 4.0).collect();
        let labels: Vec<usize> = positive.iter().map(|&p| usize::from(p)).collect();
        let scores = Tensor::new(vec![s.len(), 2], s.iter().flat_map(|&v| [1.0 - v, v]).collect()).unwrap();
        let got = auroc_macro(&scores, &labels).unwrap();
        let negated: Vec<f64> = s.iter().map(|v| -v).collect();
        let flipped: Vec<bool> = positive.iter().map(|p| !p).collect();
        let want = 0.5 * (pairwise_auroc(&s, &positive) + pairwise_auroc(&negated, &flipped));
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn recall_equals_accuracy_on_balanced_labels(
        per_class in 1usize..6,
        n_classes in 2usize..5,
        seed_preds in proptest::collection::vec(0usize..100, 30)
    ) {
        let labels: Vec<usize> = (0..n_classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        let preds: Vec<usize> = labels.iter().enumerate().map(|(i, _)| seed_preds[i % 30] % n_classes).collect();
        let acc = accuracy(&preds, &labels).unwrap();
        let rec = macro_recall(&preds, &labels, n_classes).unwrap();
        prop_assert!((acc - rec).abs() < 1e-9);
    }

    #[test]
    fn summary_rows_are_recomputable(values in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0), 1..8)) {
        let rows: Vec<MetricsRow> = values
            .iter()
            .enumerate()
            .map(|(i, v)| row(&format!("d{i}"), v.0, v.1, v.2))
            .collect();
        let [m, s] = summarize(&rows).unwrap();
        let n = rows.len() as f64;
        let acc: Vec<f64> = values.iter().map(|v| v.0).collect();
        let mean = acc.iter().sum::<f64>() / n;
        // Second moment about zero, then the shift; independent of the two-pass form.
        let var = (acc.iter().map(|a| a * a).sum::<f64>() / n - mean * mean).max(0.0);
        prop_assert!((m.accuracy - mean).abs() < 1e-9);
        prop_assert!((s.accuracy - var.sqrt()).abs() < 1e-6);
        prop_assert_eq!(m.target.as_str(), "mean");
        prop_assert_eq!(s.target.as_str(), "std");
    }

    #[test]
    fn config_text_round_trips(
        iterations in 1usize..5000,
        lr in 1e-6f64..1e-1,
        seed in any::<u64>(),
        tau in 0.5f64..10.0,
        zeta in 0.0f64..1.0,
        a in proptest::collection::vec(0.0f64..3.0, 7),
        mask in prop::sample::select(vec!["a", "b", "g", "ab", "ag", "bg", "abg"]),
        interleave in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::desk();
        cfg.set("iterations", &iterations.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("tau", &tau.to_string()).unwrap();
        cfg.set("zeta", &zeta.to_string()).unwrap();
        for (i, v) in a.iter().enumerate() {
            cfg.set(&format!("a{}", i + 1), &v.to_string()).unwrap();
        }
        cfg.set("mask", mask).unwrap();
        cfg.set("interleave", if interleave { "1" } else { "0" }).unwrap();
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn tensor_file_round_trips(
        rows in 1usize..5,
        cols in 1usize..5,
        raw in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 16)
    ) {
        let data: Vec<f64> = (0..rows * cols).map(|i| raw[i] as f64).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let back = io::decode(&io::encode(&t)).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn softmax_rows_sum_to_one(raw in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let g = Graph::new();
        let p = g.constant(Tensor::new(vec![3, 4], raw).unwrap()).softmax().unwrap().value();
        for r in 0..3 {
            let s: f64 = p.data()[4 * r..4 * r + 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lodo_split_never_trains_on_the_target(target in 0usize..4, seed in any::<u64>(), val_frac in 0.05f64..0.45) {
        let ds = synth_generate(&SynthSpec { n_per_domain: 30, image_size: 8, seed: 5, ..SynthSpec::default() }).unwrap();
        let split = lodo_split(&ds, target, val_frac, seed).unwrap();
        prop_assert_eq!(split.sources.len(), 3);
        for part in &split.sources {
            prop_assert!(part.domain != target);
            let mut all: Vec<usize> = part.train.iter().chain(&part.val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.domain(part.domain).len()).collect::<Vec<_>>());
        }
        for r in split.train_refs().concat().into_iter().chain(split.val_refs()) {
            prop_assert!(ds.example(r).h != target);
        }
    }
}
