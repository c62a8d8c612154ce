//! Binary change-detection metrics with change as the positive class.
//!
//! Ratios whose denominator is zero follow one rule: they are 1.0 when the
//! prediction and the ground truth are both empty for the class in question,
//! and 0.0 otherwise.

use serde::{Deserialize, Serialize};

use crate::image::BinaryMask;
use crate::{Error, Result};

/// Probability clip applied by [`bce`].
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn pred_empty(&self) -> bool {
        self.tp + self.fp == 0
    }

    fn gt_empty(&self) -> bool {
        self.tp + self.fn_ == 0
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fp, c.gt_empty())
}

pub fn recall(c: &Confusion) -> f64 {
    ratio(c.tp, c.tp + c.fn_, c.pred_empty())
}

/// `2tp / (2tp + fp + fn)`.
pub fn f1(c: &Confusion) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Change,
    NoChange,
}

pub fn iou(c: &Confusion, class: Class) -> f64 {
    match class {
        Class::Change => ratio(c.tp, c.tp + c.fp + c.fn_, true),
        Class::NoChange => ratio(c.tn, c.tn + c.fp + c.fn_, true),
    }
}

/// Mean of the change and no-change IoU.
pub fn miou(c: &Confusion) -> f64 {
    (iou(c, Class::Change) + iou(c, Class::NoChange)) / 2.0
}

/// Intersection-over-union of the two temporal-order predictions; 1.0 when
/// both are empty.
pub fn temporal_consistency(pred_fwd: &BinaryMask, pred_bwd: &BinaryMask) -> Result<f64> {
    let inter = pred_fwd.intersection_count(pred_bwd)?;
    let union = pred_fwd.union_count(pred_bwd)?;
    Ok(ratio(inter as u64, union as u64, true))
}

/// Binary cross-entropy of one prediction; `p` is clipped to `[ε, 1-ε]`.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean [`bce`] over a probability map and its binary target.
pub fn mean_bce(probs: &[f64], target: &BinaryMask) -> Result<f64> {
    if probs.len() != target.data().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities vs {} target pixels",
            probs.len(),
            target.data().len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::InvalidInput("empty probability map".into()));
    }
    let sum: f64 = probs.iter().zip(target.data()).map(|(&p, &y)| bce(p, y)).sum();
    Ok(sum / probs.len() as f64)
}

/// `m·loss_fwd + n·loss_bwd`; `m` and `n` must be non-negative.
pub fn bitemporal_bce(loss_fwd: f64, loss_bwd: f64, m: f64, n: f64) -> f64 {
    debug_assert!(m >= 0.0 && n >= 0.0, "weights must be non-negative");
    m * loss_fwd + n * loss_bwd
}

/// Scores of one prediction set against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub iou_change: f64,
    pub iou_nochange: f64,
    pub miou: f64,
}

impl MetricRow {
    pub fn from_confusion(c: &Confusion) -> Self {
        Self {
            f1: f1(c),
            precision: precision(c),
            recall: recall(c),
            iou_change: iou(c, Class::Change),
            iou_nochange: iou(c, Class::NoChange),
            miou: miou(c),
        }
    }

    /// Field-wise arithmetic mean; `None` for an empty slice.
    pub fn mean(rows: &[MetricRow]) -> Option<MetricRow> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(MetricRow {
            f1: avg(|r| r.f1),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            iou_change: avg(|r| r.iou_change),
            iou_nochange: avg(|r| r.iou_nochange),
            miou: avg(|r| r.miou),
        })
    }
}

/// How per-pair scores are pooled within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AverageMode {
    /// Score each pair, then average the scores.
    #[default]
    Macro,
    /// Sum pixel counts over all pairs, then score once.
    Micro,
}

impl std::str::FromStr for AverageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            other => Err(Error::Config(format!("unknown averaging mode `{other}`"))),
        }
    }
}

/// Per-pair counts needed by both averaging modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairCounts {
    pub confusion: Confusion,
    pub intersection: u64,
    pub union: u64,
}

impl PairCounts {
    pub fn tc(&self) -> f64 {
        ratio(self.intersection, self.union, true)
    }
}

/// Pools per-pair results; `None` for an empty slice.
pub fn aggregate(pairs: &[PairCounts], mode: AverageMode) -> Option<(MetricRow, f64)> {
    if pairs.is_empty() {
        return None;
    }
    match mode {
        AverageMode::Macro => {
            let rows: Vec<MetricRow> = pairs
                .iter()
                .map(|p| MetricRow::from_confusion(&p.confusion))
                .collect();
            let tc = pairs.iter().map(PairCounts::tc).sum::<f64>() / pairs.len() as f64;
            Some((MetricRow::mean(&rows)?, tc))
        }
        AverageMode::Micro => {
            let c: Confusion = pairs.iter().map(|p| p.confusion).sum();
            let inter = pairs.iter().map(|p| p.intersection).sum();
            let union = pairs.iter().map(|p| p.union).sum();
            Some((MetricRow::from_confusion(&c), ratio(inter, union, true)))
        }
    }
}
