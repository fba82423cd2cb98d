//! Image-level detection and pixel-level localization scores.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::description::Verdict;
use crate::imaging::{resize_mask_nearest, BinaryMask};

use super::EvalError;

/// Counts with tampered as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, predicted: Verdict, authentic: bool) {
        match (predicted.is_tampered(), !authentic) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// `(tp + tn) / total`; zero for no samples.
    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// `2tp / (2tp + fp + fn)`; zero when undefined.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub acc: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

impl From<Confusion> for DetectionEval {
    fn from(confusion: Confusion) -> Self {
        Self { acc: confusion.accuracy(), f1: confusion.f1(), confusion }
    }
}

/// `gts` holds authenticity labels.
pub fn eval_detection(preds: &[Verdict], gts: &[bool]) -> Result<DetectionEval, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::Length { preds: preds.len(), gts: gts.len() });
    }
    let mut c = Confusion::default();
    for (&p, &authentic) in preds.iter().zip(gts) {
        c.add(p, authentic);
    }
    Ok(c.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScore {
    pub iou: f64,
    pub f1: f64,
}

/// IoU and pixel F1 of two equal-shape binary masks. Two empty masks score 1.
pub fn score_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<MaskScore, EvalError> {
    if pred.dim() != gt.dim() {
        return Err(EvalError::Shape { pred: pred.dim(), gt: gt.dim() });
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(MaskScore { iou: 1.0, f1: 1.0 });
    }
    Ok(MaskScore { iou: inter as f64 / (p + g - inter) as f64, f1: 2.0 * inter as f64 / (p + g) as f64 })
}

/// Ground truth is resized to the prediction's resolution by nearest neighbor.
pub fn score_prediction(pred: &BinaryMask, gt: &BinaryMask) -> Result<MaskScore, EvalError> {
    if pred.dim() == gt.dim() {
        return score_masks(pred, gt);
    }
    let (h, w) = pred.dim();
    score_masks(pred, &resize_mask_nearest(gt, h, w))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationEval {
    pub mean_iou: f64,
    pub mean_pixel_f1: f64,
    pub per_image: Vec<MaskScore>,
}

impl LocalizationEval {
    pub fn from_scores(per_image: Vec<MaskScore>) -> Self {
        let n = per_image.len().max(1) as f64;
        Self {
            mean_iou: per_image.iter().map(|s| s.iou).sum::<f64>() / n,
            mean_pixel_f1: per_image.iter().map(|s| s.f1).sum::<f64>() / n,
            per_image,
        }
    }
}

pub fn binarize(probs: &Array2<f64>, threshold: f64) -> BinaryMask {
    probs.mapv(|p| p >= threshold)
}

/// Scores probability maps binarized at `threshold` against binary ground
/// truth.
pub fn eval_localization(preds: &[Array2<f64>], gts: &[BinaryMask], threshold: f64) -> Result<LocalizationEval, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::Length { preds: preds.len(), gts: gts.len() });
    }
    let scores = preds.iter().zip(gts).map(|(p, g)| score_prediction(&binarize(p, threshold), g)).collect::<Result<_, _>>()?;
    Ok(LocalizationEval::from_scores(scores))
}
