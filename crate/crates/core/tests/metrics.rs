//! Confusion matrices, IoU, pseudo-label accuracy, stability and the CSV.

mod common;

use common::micro;
use prevmatch::curves::{curves_from_csv, export_curves, parse_curve, CURVE_HEADER};
use prevmatch::metrics::*;
use prevmatch::trainer::{fit, make_run_splits};
use prevmatch::{LabelMap, PixelMask};
use proptest::prelude::*;

proptest! {
    #[test]
    fn confusion_matches_pair_count(
        c in 2usize..6,
        pairs in prop::collection::vec((0u32..6, 0u32..6), 1..60),
    ) {
        let pairs: Vec<(u32, u32)> = pairs.into_iter().map(|(a, b)| (a % c as u32, b % c as u32)).collect();
        let n = pairs.len();
        let pred = LabelMap::new(1, 1, n, pairs.iter().map(|p| p.0).collect()).unwrap();
        let truth = LabelMap::new(1, 1, n, pairs.iter().map(|p| p.1).collect()).unwrap();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &truth).unwrap();
        for t in 0..c {
            for p in 0..c {
                let want = pairs.iter().filter(|&&(a, b)| a as usize == p && b as usize == t).count() as u64;
                prop_assert_eq!(cm.get(t, p), want);
            }
        }
        prop_assert_eq!(cm.total(), n as u64);
        // IoU from the raw pairs.
        let scores = iou_scores(&cm).unwrap();
        let mut present = vec![];
        for k in 0..c as u32 {
            let tp = pairs.iter().filter(|&&(a, b)| a == k && b == k).count();
            let union = pairs.iter().filter(|&&(a, b)| a == k || b == k).count();
            let want = (union > 0).then(|| tp as f64 / union as f64);
            prop_assert_eq!(scores.per_class[k as usize], want);
            present.extend(want);
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        prop_assert!((scores.miou - mean).abs() < 1e-12);
    }
}

#[test]
fn iou_hand_example() {
    // truth 0 0 1 1, pred 0 1 1 1
    let truth = LabelMap::new(1, 2, 2, vec![0, 0, 1, 1]).unwrap();
    let pred = LabelMap::new(1, 2, 2, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&pred, &truth).unwrap();
    let s = iou_scores(&cm).unwrap();
    assert_eq!(s.per_class, vec![Some(0.5), Some(2.0 / 3.0), None]);
    assert!((s.miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);

    let bad = LabelMap::new(1, 2, 2, vec![0, 0, 3, 1]).unwrap();
    assert!(cm.accumulate(&bad, &truth).is_err());
    assert!(iou_scores(&ConfusionMatrix::new(3)).is_err());
}

#[test]
fn pseudo_accuracy_hand_example() {
    // Three masked-in pixels of class 0, two correct; the unmasked one is ignored.
    let truth = LabelMap::new(1, 1, 4, vec![0, 0, 0, 1]).unwrap();
    let pseudo = LabelMap::new(1, 1, 4, vec![0, 1, 0, 0]).unwrap();
    let mask = PixelMask::new(1, 1, 4, vec![true, true, true, false]).unwrap();
    let acc = pseudo_accuracy(&pseudo, &mask, &truth, 2).unwrap();
    assert!((acc[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(acc[1], None);
}

#[test]
fn stability_hand_values() {
    let s = series_stability(&[0.5, 0.7, 0.4, 0.6], 1.0).unwrap();
    assert!((s.max_drop - 0.3).abs() < 1e-12);
    let mean = 0.55;
    let var = [0.5f64, 0.7, 0.4, 0.6].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!((s.std - var.sqrt()).abs() < 1e-12);
    let flat = series_stability(&[0.3; 7], 0.5).unwrap();
    assert_eq!((flat.std, flat.max_drop), (0.0, 0.0));
    let rising = series_stability(&[0.1, 0.2, 0.3], 1.0).unwrap();
    assert_eq!(rising.max_drop, 0.0);
    assert_eq!(tail_len(10, 0.3), 3);
    assert_eq!(tail_len(3, 0.1), 2);
    assert!(series_stability(&[1.0], 1.0).is_err());
}

fn record(epoch: u32, classes: usize, seed: u64) -> MetricsRecord {
    let f = |k: u64| ((seed.wrapping_mul(2654435761).wrapping_add(k * 97)) % 10007) as f64 / 10007.0;
    MetricsRecord {
        epoch,
        l_s: f(1) * 3.0,
        l_u_std: f(2),
        l_u_prev: f(3) / 7.0,
        lambda: f(4),
        miou_val: f(5),
        iou: (0..classes).map(|c| (c % 3 != 2).then(|| f(10 + c as u64))).collect(),
        pacc: (0..classes).map(|c| (c % 4 != 1).then(|| f(20 + c as u64))).collect(),
        mask_std: f(6),
        mask_prev: f(7),
    }
}

proptest! {
    #[test]
    fn csv_round_trip(classes in 1usize..7, epochs in 1u32..12, seed in any::<u64>()) {
        let history: Vec<MetricsRecord> = (1..=epochs).map(|e| record(e, classes, seed ^ u64::from(e))).collect();
        let csv = history_to_csv(&history, classes);
        let (n, parsed) = parse_history_csv(&csv).unwrap();
        prop_assert_eq!(n, classes);
        prop_assert_eq!(history_to_csv(&parsed, classes), csv);
        for (a, b) in history.iter().zip(&parsed) {
            prop_assert!((a.l_s - b.l_s).abs() <= 1e-8 * a.l_s.abs().max(1e-300));
        }
    }
}

#[test]
fn csv_layout_and_errors() {
    let csv = history_to_csv(&[record(1, 3, 1), record(2, 3, 2)], 3);
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("epoch,l_s,l_u_std,l_u_prev,lambda,miou_val,iou_c0,iou_c1,iou_c2,pacc_c0"));
    assert!(csv.lines().nth(1).unwrap().contains(",NA,"));
    let swapped = csv.replacen("\n1,", "\n7,", 1);
    assert!(parse_history_csv(&swapped).is_err());
    assert!(parse_history_csv("epoch,foo\n").is_err());
}

#[test]
fn trained_history_stability_recomputes() {
    let cfg = micro("epochs = 6");
    let splits = make_run_splits(&cfg).unwrap();
    let out = fit(&cfg, &splits).unwrap();
    let (_, parsed) = parse_history_csv(&history_to_csv(&out.history, cfg.classes)).unwrap();
    let stats = stability_stats(&parsed, cfg.stability_tail).unwrap();
    // Direct recomputation from the printed columns.
    let tail = &parsed[parsed.len() - tail_len(parsed.len(), cfg.stability_tail)..];
    for (c, s) in stats.iter().enumerate() {
        let series: Vec<f64> = tail.iter().filter_map(|r| r.iou[c]).collect();
        match s {
            None => assert!(series.len() < 2),
            Some(s) => {
                let mean = series.iter().sum::<f64>() / series.len() as f64;
                let std = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / series.len() as f64).sqrt();
                let drop = series.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
                assert!((s.std - std).abs() < 1e-12 && (s.max_drop - drop).abs() < 1e-12);
            }
        }
    }
    for r in &out.history {
        assert!(r.pacc.iter().flatten().all(|a| (0.0..=1.0).contains(a)));
        assert!((0.0..=1.0).contains(&r.miou_val));
    }
}

#[test]
fn delta_vanishes_on_identical_splits() {
    let cfg = micro("epochs = 1");
    let splits = make_run_splits(&cfg).unwrap();
    let model = fit(&cfg, &splits).unwrap().model;
    let d = generalization_delta(&model, &splits.test, &splits.test).unwrap();
    assert_eq!(d.delta, 0.0);
    assert_eq!(d.seen, d.shifted);
    let d = generalization_delta(&model, &splits.test, &splits.shifted_test).unwrap();
    assert_eq!(d.delta, d.seen - d.shifted);
}

#[test]
fn curves_from_history() {
    let history = vec![record(1, 4, 3), record(2, 4, 4), record(3, 4, 5)];
    let csv = history_to_csv(&history, 4);
    let curves = curves_from_csv(&csv, &[1, 2]).unwrap();
    assert_eq!(curves.len(), 2);
    for (c, text) in &curves {
        assert_eq!(text.lines().next(), Some(CURVE_HEADER));
        let points = parse_curve(text).unwrap();
        assert_eq!(points.len(), 3);
        for (p, r) in points.iter().zip(&history) {
            assert_eq!(p.0, r.epoch);
            assert_eq!(p.1.map(format_float), r.iou[*c].map(format_float));
            assert_eq!(p.2.map(format_float), r.pacc[*c].map(format_float));
        }
    }
    assert!(curves_from_csv(&csv, &[4]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    std::fs::write(&path, &csv).unwrap();
    let files = export_curves(&path, &[], &dir.path().join("curves")).unwrap();
    assert_eq!(files.len(), 4);
    assert!(files[3].ends_with("class_3.txt"));
}

#[test]
fn two_class_counts_hand_case() {
    // truth/pred pairs giving counts [[6, 2], [1, 3]].
    let mut t = vec![0u32; 8];
    t.extend([1u32; 4]);
    let mut p = vec![0u32; 6];
    p.extend([1, 1, 0, 1, 1, 1]);
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&LabelMap::new(1, 1, 12, p).unwrap(), &LabelMap::new(1, 1, 12, t).unwrap()).unwrap();
    assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [6, 2, 1, 3]);
    let s = iou_scores(&cm).unwrap();
    assert_eq!(s.per_class, vec![Some(6.0 / 9.0), Some(3.0 / 6.0)]);
    assert!((s.miou - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
}

#[test]
fn degenerate_metric_cases() {
    let truth = LabelMap::new(1, 2, 3, vec![0, 1, 2, 0, 1, 2]).unwrap();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&truth, &truth).unwrap();
    assert!((0..3).all(|a| (0..3).all(|b| (a == b) == (cm.get(a, b) > 0))));
    assert_eq!(iou_scores(&cm).unwrap().miou, 1.0);

    let zeros = LabelMap::new(1, 1, 10, vec![0; 10]).unwrap();
    let ones = LabelMap::new(1, 1, 10, vec![1; 10]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&ones, &zeros).unwrap();
    assert_eq!(cm.get(0, 1), 10);
    assert_eq!(iou_scores(&cm).unwrap().per_class[0], Some(0.0));

    let all = PixelMask::new(1, 2, 3, vec![true; 6]).unwrap();
    assert!(pseudo_accuracy(&truth, &all, &truth, 3).unwrap().iter().all(|a| *a == Some(1.0)));
    let none = PixelMask::new(1, 2, 3, vec![false; 6]).unwrap();
    assert!(pseudo_accuracy(&truth, &none, &truth, 3).unwrap().iter().all(Option::is_none));

    assert!((series_stability(&[0.5, 0.2, 0.6], 1.0).unwrap().max_drop - 0.3).abs() < 1e-15);
}
