//! Evaluation protocol: pixel confusion counts and the change-class
//! F1 / IoU / overall-accuracy triple derived from them.
//!
//! Counts from many samples are summed before deriving the scores
//! (micro-averaging over the whole split).

use serde::Serialize;

use crate::dataset::ChangeMask;
use crate::error::{Error, Result};

/// Pixel counts with "changed" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Change-class scores, fractions in [0, 1].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricReport {
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
}

/// Count prediction/ground-truth agreement per pixel.
pub fn confusion(pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionCounts> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::shape("confusion", &[pred.h, pred.w], &[gt.h, gt.w]));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        match (p, g) {
            (1, 1) => c.true_pos += 1,
            (1, 0) => c.false_pos += 1,
            (0, 1) => c.false_neg += 1,
            _ => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// Derive F1 / IoU / OA. When no change exists and none is predicted
/// (tp + fp + fn == 0) both F1 and IoU are 1 by convention: perfect
/// absence, not a 0/0.
pub fn metrics(c: &ConfusionCounts) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Contract("metrics over zero pixels".into()));
    }
    let (tp, fp, fneg) = (c.true_pos as f64, c.false_pos as f64, c.false_neg as f64);
    let denom = tp + fp + fneg;
    let (iou, f1) = if denom == 0.0 {
        (1.0, 1.0)
    } else {
        (tp / denom, 2.0 * tp / (2.0 * tp + fp + fneg))
    };
    let oa = (c.true_pos + c.true_neg) as f64 / total as f64;
    Ok(MetricReport { f1, iou, oa })
}
