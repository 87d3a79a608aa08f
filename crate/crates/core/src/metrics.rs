//! Confusion counts, change-detection scores and confusion-map rendering.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel tallies for the "changed" class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn_ + o.fn_)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_binary(pred: &[u8], label: &[u8]) -> Result<()> {
    if pred.len() != label.len() {
        return Err(Error::shape("accumulate", format!("{} pixels", label.len()), format!("{} pixels", pred.len())));
    }
    if let Some(v) = pred.iter().chain(label).find(|&&v| v > 1) {
        return Err(Error::NonBinary(v.to_string()));
    }
    Ok(())
}

/// Tallies 0/1 prediction against 0/1 label, pixel by pixel.
pub fn accumulate(pred: &[u8], label: &[u8]) -> Result<ConfusionCounts> {
    check_binary(pred, label)?;
    let mut c = ConfusionCounts::default();
    for (&p, &l) in pred.iter().zip(label) {
        match (p, l) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Scores in `[0, 1]`; `None` where the denominator vanishes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub pc: Option<f64>,
    pub rc: Option<f64>,
    pub f1: Option<f64>,
    pub oa: Option<f64>,
    /// Cohen's kappa `(p_o − p_e) / (1 − p_e)`.
    pub kappa_standard: Option<f64>,
    /// `(OA − PC) / (TP + FP)`, kept for comparison; reports use Cohen's.
    pub kappa_literal: Option<f64>,
    /// Change-class IoU `TP / (TP + FP + FN)`.
    pub iou: Option<f64>,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

pub fn compute_metrics(c: &ConfusionCounts) -> Result<MetricSet> {
    let n = c.total();
    if n == 0 {
        return Err(Error::Data("no pixels evaluated".into()));
    }
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let n = n as f64;
    let pc = ratio(tp, tp + fp);
    let rc = ratio(tp, tp + fn_);
    // equals the harmonic mean of pc and rc whenever both are defined
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    let oa = Some((tp + tn) / n);
    let pe = ((tp + fp) * (tp + fn_) + (fn_ + tn) * (fp + tn)) / (n * n);
    let po = (tp + tn) / n;
    let kappa_standard = ratio(po - pe, 1.0 - pe);
    let kappa_literal = match (oa, pc) {
        (Some(oa), Some(pc)) => ratio(oa - pc, tp + fp),
        _ => None,
    };
    let iou = ratio(tp, tp + fp + fn_);
    Ok(MetricSet {
        pc,
        rc,
        f1,
        oa,
        kappa_standard,
        kappa_literal,
        iou,
    })
}

/// Change-class IoU implied by an F1 score.
pub fn iou_from_f1(f1: f64) -> f64 {
    f1 / (2.0 - f1)
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 255];

/// Interleaved RGB bytes, one colour per confusion outcome.
pub fn render_confusion_map(pred: &[u8], label: &[u8]) -> Result<Vec<u8>> {
    check_binary(pred, label)?;
    Ok(pred
        .iter()
        .zip(label)
        .flat_map(|(&p, &l)| match (p, l) {
            (1, 1) => TP_COLOR,
            (1, _) => FP_COLOR,
            (_, 1) => FN_COLOR,
            _ => TN_COLOR,
        })
        .collect())
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub split: String,
    pub pc: Option<f64>,
    pub rc: Option<f64>,
    pub f1: Option<f64>,
    pub oa: Option<f64>,
    pub kappa: Option<f64>,
    pub iou: Option<f64>,
}

impl MetricsRow {
    pub fn new(dataset: &str, split: &str, m: &MetricSet) -> Self {
        MetricsRow {
            dataset: dataset.to_string(),
            split: split.to_string(),
            pc: m.pc,
            rc: m.rc,
            f1: m.f1,
            oa: m.oa,
            kappa: m.kappa_standard,
            iou: m.iou,
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}
