use approx::assert_abs_diff_eq;
use lcdnet::metrics::{
    accumulate, compute_metrics, iou_from_f1, metrics_csv, render_confusion_map, ConfusionCounts, MetricsRow, FN_COLOR,
    FP_COLOR, TN_COLOR, TP_COLOR,
};
use proptest::prelude::*;

#[test]
fn tallies_on_reference_masks() {
    let c = accumulate(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
    assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
    assert_eq!(accumulate(&[1; 16], &[1; 16]).unwrap(), ConfusionCounts::new(16, 0, 0, 0));
    assert_eq!(accumulate(&[1; 16], &[0; 16]).unwrap(), ConfusionCounts::new(0, 16, 0, 0));
    assert!(accumulate(&[1, 0], &[1]).is_err());
    assert!(accumulate(&[2, 0], &[1, 0]).is_err());
}

#[test]
fn scores_on_reference_counts() {
    let m = compute_metrics(&ConfusionCounts::new(50, 10, 30, 10)).unwrap();
    assert_abs_diff_eq!(m.pc.unwrap(), 0.833333, epsilon = 1e-6);
    assert_abs_diff_eq!(m.rc.unwrap(), 0.833333, epsilon = 1e-6);
    assert_abs_diff_eq!(m.f1.unwrap(), 0.833333, epsilon = 1e-6);
    assert_abs_diff_eq!(m.iou.unwrap(), 0.714286, epsilon = 1e-6);
    assert_abs_diff_eq!(m.oa.unwrap(), 0.80, epsilon = 1e-12);
    // p_e = (60*60 + 40*40) / 100^2 = 0.52
    assert_abs_diff_eq!(m.kappa_standard.unwrap(), (0.8 - 0.52) / 0.48, epsilon = 1e-12);
    assert_abs_diff_eq!(m.kappa_literal.unwrap(), (0.8 - 50.0 / 60.0) / 60.0, epsilon = 1e-12);

    let p = compute_metrics(&ConfusionCounts::new(7, 0, 9, 0)).unwrap();
    for v in [p.pc, p.rc, p.f1, p.iou, p.oa, p.kappa_standard] {
        assert_eq!(v, Some(1.0));
    }
    assert!(compute_metrics(&ConfusionCounts::default()).is_err());
}

#[test]
fn undefined_scores_are_none() {
    let m = compute_metrics(&ConfusionCounts::new(0, 0, 10, 0)).unwrap();
    assert_eq!(m.pc, None);
    assert_eq!(m.rc, None);
    assert_eq!(m.f1, None);
    assert_eq!(m.iou, None);
    assert_eq!(m.oa, Some(1.0));
    let csv = metrics_csv(&[MetricsRow::new("syn", "test", &m)]).unwrap();
    let row = csv.lines().nth(1).unwrap();
    assert!(row.starts_with("syn,test,,,,"), "{row}");

    let m = compute_metrics(&ConfusionCounts::new(0, 3, 10, 2)).unwrap();
    assert_eq!(m.f1, Some(0.0));
    assert_eq!(m.pc, Some(0.0));
}

#[test]
fn reference_table_pairs() {
    for (f1, iou) in [(91.48, 84.30), (81.22, 68.38), (59.29, 42.14)] {
        let got = 100.0 * iou_from_f1(f1 / 100.0);
        assert_eq!(format!("{got:.2}"), format!("{iou:.2}"));
    }
}

#[test]
fn confusion_map_colours() {
    let img = render_confusion_map(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
    let px: Vec<[u8; 3]> = img.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    assert_eq!(px, vec![TP_COLOR, FP_COLOR, FN_COLOR, TN_COLOR]);
    assert_eq!(TP_COLOR, [255, 255, 255]);
    assert_eq!(FP_COLOR, [255, 0, 0]);
    assert_eq!(TN_COLOR, [0, 0, 0]);
    assert_eq!(FN_COLOR, [0, 255, 255]);
    assert!(render_confusion_map(&[1; 4], &[1; 4]).unwrap().iter().all(|&v| v == 255));
}

fn masks() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..300).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn iou_is_f1_over_two_minus_f1(tp in 0u64..100_000, fp in 0u64..100_000, tn in 0u64..100_000, fn_ in 0u64..100_000) {
        prop_assume!(tp + fp + fn_ > 0);
        let m = compute_metrics(&ConfusionCounts::new(tp, fp, tn, fn_)).unwrap();
        let (f1, iou) = (m.f1.unwrap(), m.iou.unwrap());
        prop_assert!((iou - iou_from_f1(f1)).abs() < 1e-9);
        for v in [m.pc, m.rc, m.oa].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn counts_add_over_partitions((pred, label) in masks(), cut in 0usize..300) {
        let cut = cut.min(pred.len());
        let whole = accumulate(&pred, &label).unwrap();
        let parts = accumulate(&pred[..cut], &label[..cut]).unwrap() + accumulate(&pred[cut..], &label[cut..]).unwrap();
        prop_assert_eq!(whole, parts);
        prop_assert_eq!(whole.total(), pred.len() as u64);
    }

    #[test]
    fn rendered_histogram_equals_counts((pred, label) in masks()) {
        let c = accumulate(&pred, &label).unwrap();
        let img = render_confusion_map(&pred, &label).unwrap();
        let count = |col: [u8; 3]| img.chunks(3).filter(|p| *p == col).count() as u64;
        prop_assert_eq!(count(TP_COLOR), c.tp);
        prop_assert_eq!(count(FP_COLOR), c.fp);
        prop_assert_eq!(count(TN_COLOR), c.tn);
        prop_assert_eq!(count(FN_COLOR), c.fn_);
    }
}
