//! Semantic and height change metrics.
//!
//! All accumulators are mergeable: per-worker partial results combine into the
//! same totals as a single pass over the whole split, and dataset-level
//! metrics are always computed from the merged totals rather than averaged
//! per tile.

use serde::{Deserialize, Serialize};

use crate::classes::{BACKGROUND, DEMOLISHED, NEWLY_BUILT, NUM_CLASSES};
use crate::error::{Error, Result};

/// Minimum reference magnitude (meters) for a pixel to enter the relative error.
pub const CREL_MIN_REFERENCE_M: f64 = 0.1;
/// Added to each standard deviation in the correlation denominator.
pub const ZNCC_EPSILON: f64 = 1e-6;

/// 3×3 confusion counts indexed `[ground truth][prediction]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::InvalidValue(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p as usize >= NUM_CLASSES || g as usize >= NUM_CLASSES {
                return Err(Error::InvalidValue(format!("class pair ({p}, {g}) out of range")));
            }
            self.counts[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                self.counts[g][p] += other.counts[g][p];
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// IoU of `class` in percent, `None` when the class is absent from both
    /// prediction and ground truth.
    pub fn iou(&self, class: u8) -> Option<f64> {
        let c = class as usize;
        let tp = self.counts[c][c];
        let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..NUM_CLASSES).map(|g| self.counts[g][c]).sum::<u64>() - tp;
        let union = tp + fp + fn_;
        (union > 0).then(|| 100.0 * tp as f64 / union as f64)
    }

    pub fn scores(&self) -> Result<SemanticScores> {
        if self.total() == 0 {
            return Err(Error::EmptyInput("no pixels accumulated"));
        }
        let iou_d = self.iou(DEMOLISHED);
        let iou_n = self.iou(NEWLY_BUILT);
        Ok(SemanticScores {
            iou_d,
            iou_n,
            miou: mean_present(&[iou_d, iou_n]),
            f1: f1_from_ious(iou_d, iou_n),
        })
    }
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Dice coefficient (percent) of a class with the given IoU (percent).
pub fn dice_from_iou(iou: f64) -> f64 {
    200.0 * iou / (100.0 + iou)
}

/// Macro F1 over the two change classes, computed per class from its IoU.
/// Absent classes are skipped.
pub fn f1_from_ious(iou_d: Option<f64>, iou_n: Option<f64>) -> Option<f64> {
    mean_present(&[iou_d.map(dice_from_iou), iou_n.map(dice_from_iou)])
}

pub fn f1_from_confusion(confusion: &ConfusionMatrix) -> Option<f64> {
    f1_from_ious(confusion.iou(DEMOLISHED), confusion.iou(NEWLY_BUILT))
}

/// Per-change-class IoU and their mean; background is not part of the mean.
pub fn confusion_and_iou(pred: &[u8], gt: &[u8]) -> Result<SemanticScores> {
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(pred, gt)?;
    cm.scores()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticScores {
    pub iou_d: Option<f64>,
    pub iou_n: Option<f64>,
    pub miou: Option<f64>,
    pub f1: Option<f64>,
}

/// Running sums for height errors and changed-area correlation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeightAccumulator {
    n: u64,
    sum_sq: f64,
    sum_abs: f64,
    changed: u64,
    changed_sum_sq: f64,
    rel_count: u64,
    rel_sum: f64,
    // Co-moments over changed pixels, merged with Chan's pairwise update.
    mean_ref: f64,
    mean_est: f64,
    m2_ref: f64,
    m2_est: f64,
    co_moment: f64,
}

impl HeightAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, estimate: f64, reference: f64, changed: bool) {
        let err = reference - estimate;
        self.n += 1;
        self.sum_sq += err * err;
        self.sum_abs += err.abs();
        if !changed {
            return;
        }
        self.changed_sum_sq += err * err;
        if reference.abs() >= CREL_MIN_REFERENCE_M {
            self.rel_count += 1;
            self.rel_sum += err.abs() / reference.abs();
        }
        self.changed += 1;
        let k = self.changed as f64;
        let d_ref = reference - self.mean_ref;
        let d_est = estimate - self.mean_est;
        self.mean_ref += d_ref / k;
        self.mean_est += d_est / k;
        self.m2_ref += d_ref * (reference - self.mean_ref);
        self.m2_est += d_est * (estimate - self.mean_est);
        self.co_moment += d_ref * (estimate - self.mean_est);
    }

    pub fn accumulate(&mut self, estimate: &[f64], reference: &[f64], changed: &[bool]) -> Result<()> {
        if estimate.len() != reference.len() || estimate.len() != changed.len() {
            return Err(Error::InvalidValue(format!(
                "height maps of {} / {} pixels with a mask of {}",
                estimate.len(),
                reference.len(),
                changed.len()
            )));
        }
        for ((&e, &r), &c) in estimate.iter().zip(reference).zip(changed) {
            self.push(e, r, c);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &HeightAccumulator) {
        let (na, nb) = (self.changed as f64, other.changed as f64);
        if nb > 0.0 {
            let n = na + nb;
            let d_ref = other.mean_ref - self.mean_ref;
            let d_est = other.mean_est - self.mean_est;
            self.m2_ref += other.m2_ref + d_ref * d_ref * na * nb / n;
            self.m2_est += other.m2_est + d_est * d_est * na * nb / n;
            self.co_moment += other.co_moment + d_ref * d_est * na * nb / n;
            self.mean_ref += d_ref * nb / n;
            self.mean_est += d_est * nb / n;
        }
        self.n += other.n;
        self.sum_sq += other.sum_sq;
        self.sum_abs += other.sum_abs;
        self.changed += other.changed;
        self.changed_sum_sq += other.changed_sum_sq;
        self.rel_count += other.rel_count;
        self.rel_sum += other.rel_sum;
    }

    pub fn scores(&self) -> Result<HeightScores> {
        if self.n == 0 {
            return Err(Error::EmptyInput("no pixels accumulated"));
        }
        let n = self.n as f64;
        let (crmse, czncc) = if self.changed > 0 {
            let k = self.changed as f64;
            let sd_ref = (self.m2_ref / k).sqrt();
            let sd_est = (self.m2_est / k).sqrt();
            let zncc = (self.co_moment / k) / ((sd_ref + ZNCC_EPSILON) * (sd_est + ZNCC_EPSILON));
            (Some((self.changed_sum_sq / k).sqrt()), Some(zncc.clamp(-1.0, 1.0)))
        } else {
            (None, None)
        };
        Ok(HeightScores {
            rmse: (self.sum_sq / n).sqrt(),
            mae: self.sum_abs / n,
            crmse,
            crel: (self.rel_count > 0).then(|| self.rel_sum / self.rel_count as f64),
            czncc,
        })
    }
}

/// Height errors in meters; changed-area entries are `None` when the change
/// mask is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeightScores {
    pub rmse: f64,
    pub mae: f64,
    pub crmse: Option<f64>,
    pub crel: Option<f64>,
    pub czncc: Option<f64>,
}

pub fn height_metrics(pred_m: &[f64], gt_m: &[f64], change_mask: &[bool]) -> Result<HeightScores> {
    let mut acc = HeightAccumulator::new();
    acc.accumulate(pred_m, gt_m, change_mask)?;
    acc.scores()
}

/// Evaluation summary. Cells a run did not measure are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou_d: Option<f64>,
    pub iou_n: Option<f64>,
    pub miou: Option<f64>,
    pub f1: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub crmse: Option<f64>,
    pub crel: Option<f64>,
    pub czncc: Option<f64>,
    pub mparams: Option<f64>,
}

impl MetricReport {
    pub fn new(semantic: Option<SemanticScores>, height: Option<HeightScores>, mparams: Option<f64>) -> Self {
        let mut r = MetricReport { mparams, ..Default::default() };
        if let Some(s) = semantic {
            (r.iou_d, r.iou_n, r.miou, r.f1) = (s.iou_d, s.iou_n, s.miou, s.f1);
        }
        if let Some(h) = height {
            (r.rmse, r.mae) = (Some(h.rmse), Some(h.mae));
            (r.crmse, r.crel, r.czncc) = (h.crmse, h.crel, h.czncc);
        }
        r
    }

    /// Semantic then height columns, in display order.
    pub fn columns(&self) -> [(&'static str, Option<f64>); 9] {
        [
            ("IoU_D", self.iou_d),
            ("IoU_N", self.iou_n),
            ("mIoU", self.miou),
            ("F1", self.f1),
            ("RMSE", self.rmse),
            ("MAE", self.mae),
            ("cRMSE", self.crmse),
            ("cRel", self.crel),
            ("cZNCC", self.czncc),
        ]
    }
}

/// Prediction and ground-truth histograms over shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTable {
    pub edges: Vec<f64>,
    pub pred: Vec<u64>,
    pub gt: Vec<u64>,
}

impl HistogramTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower_m,upper_m,pred_count,gt_count\n");
        for i in 0..self.pred.len() {
            out.push_str(&format!("{},{},{},{}\n", self.edges[i], self.edges[i + 1], self.pred[i], self.gt[i]));
        }
        out
    }

    pub fn bin_of(&self, v: f64) -> usize {
        let bins = self.pred.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        let pos = ((v - lo) / (hi - lo) * bins as f64).floor();
        (pos.max(0.0) as usize).min(bins - 1)
    }
}

pub fn height_histogram(pred_m: &[f64], gt_m: &[f64], bins: usize) -> Result<HistogramTable> {
    if bins < 1 {
        return Err(Error::InvalidValue("histogram needs at least one bin".into()));
    }
    let all = pred_m.iter().chain(gt_m);
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::EmptyInput("histogram of empty or non-finite maps"));
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let mut table = HistogramTable { edges, pred: vec![0; bins], gt: vec![0; bins] };
    for &v in pred_m {
        let b = table.bin_of(v);
        table.pred[b] += 1;
    }
    for &v in gt_m {
        let b = table.bin_of(v);
        table.gt[b] += 1;
    }
    Ok(table)
}

/// Semantic change mask used for the changed-area height metrics.
pub fn change_mask(gt_semantic: &[u8]) -> Vec<bool> {
    gt_semantic.iter().map(|&c| c != BACKGROUND).collect()
}
