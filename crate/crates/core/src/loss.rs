//! Training objectives for the detector and the locator.
//!
//! The detector minimizes token cross-entropy on the answer plus a weighted
//! domain-tag cross-entropy. The locator minimizes token cross-entropy on its
//! segmentation prompt plus weighted binary cross-entropy and soft Dice on the
//! predicted mask. Each loss has a tape form (used by the trainers) and a
//! plain-array entry point that evaluates the same tape ops.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("every target position is masked; nothing is supervised")]
    NoSupervisedTokens,
    #[error("target token {token} is outside the vocabulary of {vocab}")]
    TargetOutOfRange { token: usize, vocab: usize },
    #[error("{what}: expected {expected:?}, found {found:?}")]
    Shape { what: &'static str, expected: (usize, usize), found: (usize, usize) },
    #[error("ground-truth prompt does not contain the segmentation token")]
    MissingSegToken,
    #[error("loss weight {0} must be finite and non-negative")]
    BadWeight(&'static str),
}

/// Detector loss split into its two terms. `tag` already includes the weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss<F> {
    pub total: F,
    pub text: F,
    pub tag: F,
}

/// Locator loss split into its three weighted terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationLoss<F> {
    pub total: F,
    pub text: F,
    /// `alpha * bce`
    pub bce: F,
    /// `beta * dice`
    pub dice: F,
}

/// Weights of the mask terms in the locator loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MaskLossWeights {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 0.5 }
    }
}

fn check_weight(value: f64, name: &'static str) -> Result<(), LossError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(LossError::BadWeight(name))
    }
}

fn check_targets(targets: &[Option<usize>], vocab: usize) -> Result<(), LossError> {
    let mut any = false;
    for &token in targets.iter().flatten() {
        any = true;
        if token >= vocab {
            return Err(LossError::TargetOutOfRange { token, vocab });
        }
    }
    if any {
        Ok(())
    } else {
        Err(LossError::NoSupervisedTokens)
    }
}

/// Token cross-entropy on the tape, validating targets first.
pub fn token_cross_entropy<F: Scalar>(tape: &mut Tape<F>, logits: Var, targets: &[Option<usize>]) -> Result<Var, LossError> {
    let (rows, vocab) = tape.shape(logits);
    if rows != targets.len() {
        return Err(LossError::Shape { what: "targets", expected: (rows, 1), found: (targets.len(), 1) });
    }
    check_targets(targets, vocab)?;
    Ok(tape.cross_entropy(logits, targets))
}

/// Records the detector loss on `tape`. `tag` is the `1 x 3` domain logit row
/// and its label; without it the tag term is zero.
pub fn detection_loss_on<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    targets: &[Option<usize>],
    tag: Option<(Var, usize)>,
    lambda: f64,
) -> Result<(Var, DetectionLoss<F>), LossError> {
    check_weight(lambda, "lambda")?;
    let text = token_cross_entropy(tape, logits, targets)?;
    let text_value = tape.scalar(text);
    let Some((tag_logits, label)) = tag else {
        return Ok((text, DetectionLoss { total: text_value, text: text_value, tag: F::zero() }));
    };
    let tag_ce = token_cross_entropy(tape, tag_logits, &[Some(label)])?;
    let weighted = tape.scale(tag_ce, F::of(lambda));
    let total = tape.add(text, weighted);
    let breakdown = DetectionLoss { total: tape.scalar(total), text: text_value, tag: tape.scalar(weighted) };
    Ok((total, breakdown))
}

/// Detector loss on plain arrays.
pub fn detection_loss<F: Scalar>(
    pred_logits: &Array2<F>,
    targets: &[Option<usize>],
    tag_logits: &Array2<F>,
    tag_label: usize,
    lambda: f64,
) -> Result<DetectionLoss<F>, LossError> {
    let mut tape = Tape::new();
    let logits = tape.constant(pred_logits.clone());
    let tag = tape.constant(tag_logits.clone());
    detection_loss_on(&mut tape, logits, targets, Some((tag, tag_label)), lambda).map(|(_, b)| b)
}

/// Soft Dice loss on the tape.
pub fn dice_loss_on<F: Scalar>(tape: &mut Tape<F>, probs: Var, gt: &Array2<F>) -> Result<Var, LossError> {
    let shape = tape.shape(probs);
    if shape != gt.dim() {
        return Err(LossError::Shape { what: "dice ground truth", expected: shape, found: gt.dim() });
    }
    Ok(tape.dice(probs, gt, F::of(DICE_SMOOTH)))
}

/// `1 - (2 sum(p g) + 1) / (sum(p) + sum(g) + 1)`.
pub fn dice_loss<F: Scalar>(probs: &Array2<F>, gt: &Array2<F>) -> Result<F, LossError> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let loss = dice_loss_on(&mut tape, p, gt)?;
    Ok(tape.scalar(loss))
}

/// Records the locator loss on `tape`. `mask_logits` are pre-sigmoid.
pub fn localization_loss_on<F: Scalar>(
    tape: &mut Tape<F>,
    text_logits: Var,
    targets: &[Option<usize>],
    seg_token: usize,
    mask_logits: Var,
    gt_mask: &Array2<F>,
    weights: MaskLossWeights,
) -> Result<(Var, LocalizationLoss<F>), LossError> {
    check_weight(weights.alpha, "alpha")?;
    check_weight(weights.beta, "beta")?;
    if !targets.iter().any(|t| *t == Some(seg_token)) {
        return Err(LossError::MissingSegToken);
    }
    let shape = tape.shape(mask_logits);
    if shape != gt_mask.dim() {
        return Err(LossError::Shape { what: "ground-truth mask", expected: shape, found: gt_mask.dim() });
    }
    let text = token_cross_entropy(tape, text_logits, targets)?;
    let bce = tape.bce_with_logits(mask_logits, gt_mask);
    let bce = tape.scale(bce, F::of(weights.alpha));
    let probs = tape.sigmoid(mask_logits);
    let dice = dice_loss_on(tape, probs, gt_mask)?;
    let dice = tape.scale(dice, F::of(weights.beta));
    let sum = tape.add(text, bce);
    let total = tape.add(sum, dice);
    let breakdown = LocalizationLoss {
        total: tape.scalar(total),
        text: tape.scalar(text),
        bce: tape.scalar(bce),
        dice: tape.scalar(dice),
    };
    Ok((total, breakdown))
}

/// Locator loss on plain arrays.
pub fn localization_loss<F: Scalar>(
    text_logits: &Array2<F>,
    targets: &[Option<usize>],
    seg_token: usize,
    mask_logits: &Array2<F>,
    gt_mask: &Array2<F>,
    weights: MaskLossWeights,
) -> Result<LocalizationLoss<F>, LossError> {
    let mut tape = Tape::new();
    let t = tape.constant(text_logits.clone());
    let m = tape.constant(mask_logits.clone());
    localization_loss_on(&mut tape, t, targets, seg_token, m, gt_mask, weights).map(|(_, b)| b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_hot_predictions_give_zero_detection_loss() {
        let big: f64 = 60.0;
        let logits = array![[big, 0.0, 0.0], [0.0, big, 0.0]];
        let tag = array![[0.0, 0.0, big]];
        let loss = detection_loss(&logits, &[Some(0), Some(1)], &tag, 2, 1.0).unwrap();
        assert!(loss.total.abs() < 1e-12, "{loss:?}");
    }

    #[test]
    fn zero_lambda_keeps_only_text_term() {
        let logits = array![[0.3, -1.0, 2.0], [1.5, 0.1, -0.2]];
        let tag = array![[0.4, 0.1, -0.3]];
        let loss = detection_loss(&logits, &[Some(2), None], &tag, 1, 0.0).unwrap();
        assert_eq!(loss.total, loss.text);
        assert_eq!(loss.tag, 0.0);
    }

    #[test]
    fn fully_masked_targets_are_rejected() {
        let logits = array![[0.3, -1.0], [1.5, 0.1]];
        let tag = array![[0.4, 0.1, -0.3]];
        assert_eq!(detection_loss(&logits, &[None, None], &tag, 0, 1.0), Err(LossError::NoSupervisedTokens));
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let logits = array![[0.3, -1.0]];
        let tag = array![[0.4, 0.1, -0.3]];
        assert!(matches!(detection_loss(&logits, &[Some(0)], &tag, 0, -1.0), Err(LossError::BadWeight(_))));
    }

    #[test]
    fn dice_shape_mismatch_is_an_error() {
        let p = Array2::<f64>::zeros((4, 4));
        let g = Array2::<f64>::zeros((4, 5));
        assert!(matches!(dice_loss(&p, &g), Err(LossError::Shape { .. })));
    }

    #[test]
    fn localization_requires_seg_target() {
        let text = array![[0.0, 1.0, 0.0]];
        let mask = Array2::<f64>::zeros((2, 2));
        let err = localization_loss(&text, &[Some(1)], 2, &mask, &mask, MaskLossWeights::default());
        assert_eq!(err, Err(LossError::MissingSegToken));
    }
}
