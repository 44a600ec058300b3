//! Randomised invariants across the library.

use std::collections::BTreeSet;

use proptest::prelude::*;

use dcsnet::cli::{merge_results, report_order};
use dcsnet::data::ppm::{decode_ppm, encode_ppm, RgbImage};
use dcsnet::data::{split, Sample};
use dcsnet::distill::{soft_loss, soften, DistillConfig, SoftVariant};
use dcsnet::metrics::{confusion, metrics, write_result_rows, Averaging, ResultRow};
use dcsnet::models::{build_dcsnet, Checkpoint, CheckpointMeta};
use dcsnet::Tensor;

fn logits(rows: usize, k: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-30.0f64..30.0, rows * k).prop_map(move |v| Tensor::new(vec![rows, k], v).unwrap())
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0..k, n), prop::collection::vec(0..k, n))
}

proptest! {
    #[test]
    fn softened_rows_are_distributions(x in logits(4, 3), t in 1.0f64..100.0) {
        let p = soften(&x, t).unwrap();
        for r in 0..4 {
            let row = p.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn higher_temperature_flattens(x in logits(1, 3), t in 1.0f64..50.0) {
        let spread = |p: &Tensor<f64>| {
            let r = p.row(0);
            r.iter().cloned().fold(f64::MIN, f64::max) - r.iter().cloned().fold(f64::MAX, f64::min)
        };
        prop_assert!(spread(&soften(&x, 2.0 * t).unwrap()) <= spread(&soften(&x, t).unwrap()) + 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(a in logits(3, 3), b in logits(3, 3), t in 1.0f64..100.0) {
        let cfg = DistillConfig { temperature: t, ..DistillConfig::default() };
        prop_assert!(soft_loss(&a, &b, &cfg).unwrap() >= -1e-12);
        prop_assert!(soft_loss(&a, &a, &cfg).unwrap().abs() < 1e-12);
        let ce = DistillConfig { soft_variant: SoftVariant::CrossEntropy, ..cfg };
        prop_assert!(soft_loss(&a, &b, &ce).unwrap() + 1e-9 >= soft_loss(&a, &b, &cfg).unwrap());
    }

    #[test]
    fn confusion_counts_and_metrics((truth, pred) in labels(40, 3)) {
        let cm = confusion(&truth, &pred, 3).unwrap();
        prop_assert_eq!(cm.total(), 40);
        let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as u64;
        prop_assert_eq!(cm.trace(), correct);
        let r = metrics(&cm, Averaging::Macro).unwrap();
        prop_assert_eq!(r.accuracy, correct as f64 / 40.0);
        for (c, m) in r.per_class.iter().enumerate() {
            prop_assert_eq!(m.tp + m.fp + m.fn_ + m.tn, 40);
            prop_assert_eq!(m.support, truth.iter().filter(|&&t| t == c).count() as u64);
            prop_assert!((0.0..=1.0).contains(&m.f1));
        }
        let w = metrics(&cm, Averaging::Weighted).unwrap();
        // Weighted recall equals accuracy up to rounding.
        prop_assert!((w.recall - w.accuracy).abs() < 1e-12);
        prop_assert_eq!(metrics(&confusion(&truth, &truth, 3).unwrap(), Averaging::Macro).unwrap().accuracy, 1.0);
    }

    #[test]
    fn split_partitions_every_sample(n in 5usize..40, seed in any::<u64>()) {
        let samples: Vec<Sample> = (0..2 * n)
            .map(|i| Sample { image: Tensor::zeros(&[1, 1, 1]), label: i % 2, source_id: i.to_string() })
            .collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let s = split(&samples, [0.8, 0.1, 0.1], seed, &names).unwrap();
        let ids: Vec<&str> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.source_id.as_str()).collect();
        prop_assert_eq!(ids.len(), 2 * n);
        prop_assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), 2 * n);
        let again = split(&samples, [0.8, 0.1, 0.1], seed, &names).unwrap();
        prop_assert_eq!(s.test, again.test);
    }

    #[test]
    fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u8>()) {
        let px: Vec<u8> = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let img = RgbImage::new(w, h, px).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn report_ranking_ignores_input_order(rows in prop::collection::vec((0u8..4, 0u8..4, 1u8..5, 0u8..3), 1..12)) {
        let rows: Vec<ResultRow> = rows
            .into_iter()
            .map(|(acc, f1, t, a)| ResultRow {
                model: "s|t".into(),
                parameters: 1,
                alpha: 0.1 * (a + 1) as f64,
                temperature: t as f64,
                accuracy: acc as f64 / 4.0,
                precision: 0.5,
                recall: 0.5,
                f1: f1 as f64 / 4.0,
            })
            .collect();
        let mut reversed = rows.clone();
        reversed.reverse();
        let a = merge_results(&[("a".into(), write_result_rows(&rows).unwrap())]).unwrap();
        let b = merge_results(&[("b".into(), write_result_rows(&reversed).unwrap())]).unwrap();
        prop_assert_eq!(&a.rows, &b.rows);
        for pair in a.rows.windows(2) {
            prop_assert!(report_order(&pair[0], &pair[1]).is_le());
        }
    }
}

#[test]
fn checkpoint_bytes_round_trip_exactly() {
    let model = build_dcsnet::<f32>([3, 32, 32], 3, 7).unwrap();
    let ck = Checkpoint {
        model,
        meta: CheckpointMeta { epoch: 3, seed: 7, metrics: [("acc".to_string(), 0.1 + 0.2)].into() },
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.model.params(), ck.model.params());
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for cut in [0, 4, 8, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
}
