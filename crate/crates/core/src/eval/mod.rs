//! Pixel-level scoring, thresholding and mask post-processing.

mod morphology;

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use thiserror::Error;

use crate::mask;
use crate::tensor::{Shape, Tensor};

pub use morphology::{dilate, erode, fuse_postprocess, opening};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_SE_RADIUS: usize = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("threshold must lie strictly between 0 and 1, got {0}")]
    InvalidThreshold(f32),
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),
    #[error("mask must be binary, found value {0}")]
    NonBinary(f32),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub(crate) fn check_binary(t: &Tensor) -> Result<()> {
    match mask::first_non_binary(t) {
        Some(v) => Err(EvalError::NonBinary(v)),
        None => Ok(()),
    }
}

pub(crate) fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(EvalError::ShapeMismatch(a.shape(), b.shape()))
    }
}

/// 1 where `p >= t`, 0 elsewhere.
pub fn threshold(prob: &Tensor, t: f32) -> Result<Tensor> {
    if !(t > 0.0 && t < 1.0) {
        return Err(EvalError::InvalidThreshold(t));
    }
    Ok(prob.map(|p| if p >= t { 1.0 } else { 0.0 }))
}

/// Per-pixel confusion counts with buildings as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    check_same_shape(pred, gt)?;
    check_binary(pred)?;
    check_binary(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub iou: f64,
    pub f1: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "tp,fp,fn,tn,iou,f1";

    pub fn csv_fields(&self) -> String {
        let c = &self.counts;
        format!("{},{},{},{},{:.6},{:.6}", c.tp, c.fp, c.fn_, c.tn, self.iou, self.f1)
    }
}

/// IoU and F1 from counts. With no positives in either mask both are 1.
pub fn metrics(counts: ConfusionCounts) -> MetricsReport {
    let ConfusionCounts { tp, fp, fn_, .. } = counts;
    let (iou, f1) = if tp + fp + fn_ == 0 {
        (1.0, 1.0)
    } else {
        let tp = tp as f64;
        let (fp, fn_) = (fp as f64, fn_ as f64);
        (tp / (tp + fp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_))
    };
    MetricsReport { counts, iou, f1 }
}
