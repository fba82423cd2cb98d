//! Loss values against scalar brute-force oracles and gradients against
//! central finite differences.

use ndarray::Array2;
use proptest::prelude::*;
use tamperscope_core::autograd::{Tape, Var};
use tamperscope_core::loss::{
    detection_loss, detection_loss_on, dice_loss, localization_loss, localization_loss_on, MaskLossWeights, DICE_SMOOTH,
};

const VALUE_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;

fn oracle_ce(logits: &Array2<f64>, targets: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let norm: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
        total -= (logits[[r, t]].exp() / norm).ln();
        count += 1;
    }
    total / count as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn oracle_bce(logits: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (x, t) in logits.iter().zip(gt) {
        let p = sigmoid(*x);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    total / logits.len() as f64
}

fn oracle_dice(probs: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_g = 0.0;
    for (p, g) in probs.iter().zip(gt) {
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    1.0 - (2.0 * inter + DICE_SMOOTH) / (sum_p + sum_g + DICE_SMOOTH)
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn binary(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(prop::bool::ANY, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v.into_iter().map(|b| f64::from(u8::from(b))).collect()).unwrap())
}

/// Token logits with targets, at least one of which is supervised.
fn text_case() -> impl Strategy<Value = (Array2<f64>, Vec<Option<usize>>)> {
    (1usize..=5, 2usize..=7).prop_flat_map(|(rows, vocab)| {
        let targets = prop::collection::vec(prop::option::weighted(0.8, 0..vocab), rows)
            .prop_map(|mut t| {
                if t.iter().all(Option::is_none) {
                    t[0] = Some(0);
                }
                t
            });
        (matrix(rows, vocab, -6.0, 6.0), targets)
    })
}

fn mask_case() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| (matrix(h, w, -5.0, 5.0), binary(h, w)))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Compares the tape gradient of `f` at `x` with central differences.
fn check_gradient(x: &Array2<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) -> Result<(), TestCaseError> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf);
    let grad = tape.backward(out).take(leaf).expect("gradient reaches the input");
    let eval = |v: &Array2<f64>| {
        let mut t = Tape::new();
        let l = t.leaf(v.clone(), false);
        let o = f(&mut t, l);
        t.scalar(o)
    };
    let h = 1e-5;
    for idx in ndarray::indices(x.dim()) {
        let mut plus = x.clone();
        plus[idx] += h;
        let mut minus = x.clone();
        minus[idx] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        prop_assert!(close(grad[idx], numeric, GRAD_TOL), "at {idx:?}: analytic {} numeric {}", grad[idx], numeric);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn detection_loss_matches_oracle((logits, targets) in text_case(), tag in matrix(1, 3, -4.0, 4.0), label in 0usize..3, lambda in 0.0f64..3.0) {
        let got = detection_loss(&logits, &targets, &tag, label, lambda).unwrap();
        let text = oracle_ce(&logits, &targets);
        let tag_term = lambda * oracle_ce(&tag, &[Some(label)]);
        prop_assert!(close(got.text, text, VALUE_TOL));
        prop_assert!(close(got.tag, tag_term, VALUE_TOL));
        prop_assert!(close(got.total, text + tag_term, VALUE_TOL));
    }

    #[test]
    fn dice_loss_matches_oracle((logits, gt) in mask_case()) {
        let probs = logits.mapv(sigmoid);
        let got = dice_loss(&probs, &gt).unwrap();
        prop_assert!(close(got, oracle_dice(&probs, &gt), VALUE_TOL));
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn localization_loss_matches_oracle(
        (logits, mut targets) in text_case(),
        (mask, gt) in mask_case(),
        alpha in 0.0f64..4.0,
        beta in 0.0f64..4.0,
    ) {
        let seg = logits.ncols() - 1;
        let last = targets.len() - 1;
        targets[last] = Some(seg);
        let weights = MaskLossWeights { alpha, beta };
        let got = localization_loss(&logits, &targets, seg, &mask, &gt, weights).unwrap();
        let text = oracle_ce(&logits, &targets);
        let bce = alpha * oracle_bce(&mask, &gt);
        let dice = beta * oracle_dice(&mask.mapv(sigmoid), &gt);
        prop_assert!(close(got.text, text, VALUE_TOL));
        prop_assert!(close(got.bce, bce, VALUE_TOL));
        prop_assert!(close(got.dice, dice, VALUE_TOL));
        prop_assert!(close(got.total, text + bce + dice, VALUE_TOL));
    }

    #[test]
    fn detection_loss_gradient_matches_finite_differences((logits, targets) in text_case(), tag in matrix(1, 3, -4.0, 4.0), label in 0usize..3) {
        check_gradient(&logits, |tape, x| {
            let t = tape.constant(tag.clone());
            detection_loss_on(tape, x, &targets, Some((t, label)), 0.7).unwrap().0
        })?;
        check_gradient(&tag, |tape, x| {
            let l = tape.constant(logits.clone());
            detection_loss_on(tape, l, &targets, Some((x, label)), 0.7).unwrap().0
        })?;
    }

    #[test]
    fn localization_loss_gradient_matches_finite_differences((logits, mut targets) in text_case(), (mask, gt) in mask_case()) {
        let seg = logits.ncols() - 1;
        targets[0] = Some(seg);
        let weights = MaskLossWeights { alpha: 2.0, beta: 0.5 };
        check_gradient(&mask, |tape, x| {
            let t = tape.constant(logits.clone());
            localization_loss_on(tape, t, &targets, seg, x, &gt, weights).unwrap().0
        })?;
        check_gradient(&logits, |tape, x| {
            let m = tape.constant(mask.clone());
            localization_loss_on(tape, x, &targets, seg, m, &gt, weights).unwrap().0
        })?;
    }

    #[test]
    fn losses_are_non_negative((logits, targets) in text_case(), (mask, gt) in mask_case()) {
        let tag = Array2::zeros((1, 3));
        prop_assert!(detection_loss(&logits, &targets, &tag, 0, 1.0).unwrap().total >= 0.0);
        prop_assert!(dice_loss(&mask.mapv(sigmoid), &gt).unwrap() >= 0.0);
    }
}

#[test]
fn perfect_mask_has_near_zero_dice() {
    let gt = Array2::from_shape_fn((8, 8), |(r, c)| f64::from(u8::from(r < 4 && c < 4)));
    let loss = dice_loss(&gt, &gt).unwrap();
    assert!(loss.abs() < 1e-12);
    let inverse = gt.mapv(|v| 1.0 - v);
    let worst = dice_loss(&inverse, &gt).unwrap();
    assert!(close(worst, 1.0 - 1.0 / 65.0, 1e-12));
}

#[test]
fn f32_losses_agree_with_f64() {
    let logits = Array2::from_shape_fn((3, 5), |(r, c)| (r as f64 - c as f64) * 0.7);
    let targets = [Some(1), None, Some(4)];
    let tag = Array2::from_shape_vec((1, 3), vec![0.2, -0.5, 1.0]).unwrap();
    let wide = detection_loss(&logits, &targets, &tag, 2, 1.0).unwrap();
    let narrow = detection_loss(&logits.mapv(|v| v as f32), &targets, &tag.mapv(|v| v as f32), 2, 1.0).unwrap();
    assert!((f64::from(narrow.total) - wide.total).abs() < 1e-5);
}
