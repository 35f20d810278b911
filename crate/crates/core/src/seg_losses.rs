//! Mask and text losses for segmentation-token training.
//!
//! Mask loss is a weighted sum of per-pixel binary cross-entropy and Dice;
//! text loss is token-level cross-entropy with ignored positions. Every loss
//! has an analytic gradient so the models can wrap them as custom ops.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

/// Probability clip applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: predicted {predicted:?}, target {target:?}")]
    Shape { predicted: Vec<usize>, target: Vec<usize> },
    #[error("predicted mask value {0} outside [0, 1]")]
    PredictionRange(f64),
    #[error("ground-truth mask value {0} is not 0 or 1")]
    NotBinary(f64),
    #[error("invalid loss weight {name} = {value}")]
    Weight { name: &'static str, value: f64 },
    #[error("vocabulary size {0} is below 2")]
    Vocabulary(usize),
    #[error("target token {token} at position {position} is outside vocabulary of {vocab}")]
    Token { position: usize, token: usize, vocab: usize },
    #[error("every target position is ignored")]
    AllIgnored,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_txt: f64,
    pub lambda_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            lambda_txt: 1.0,
            lambda_mask: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
            ("lambda_txt", self.lambda_txt),
            ("lambda_mask", self.lambda_mask),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Predicted soft mask alongside its binary ground truth.
#[derive(Clone, Copy, Debug)]
pub struct MaskPair<'a> {
    predicted: ArrayView2<'a, f64>,
    ground_truth: ArrayView2<'a, f64>,
}

impl<'a> MaskPair<'a> {
    pub fn new(predicted: ArrayView2<'a, f64>, ground_truth: ArrayView2<'a, f64>) -> Result<Self> {
        if predicted.dim() != ground_truth.dim() {
            return Err(LossError::Shape {
                predicted: predicted.shape().to_vec(),
                target: ground_truth.shape().to_vec(),
            });
        }
        if let Some(&p) = predicted.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(LossError::PredictionRange(p));
        }
        if let Some(&m) = ground_truth.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(LossError::NotBinary(m));
        }
        Ok(Self { predicted, ground_truth })
    }

    pub fn predicted(&self) -> ArrayView2<'a, f64> {
        self.predicted
    }

    pub fn ground_truth(&self) -> ArrayView2<'a, f64> {
        self.ground_truth
    }

    fn len(&self) -> f64 {
        self.predicted.len().max(1) as f64
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

pub fn bce_loss(pair: &MaskPair<'_>) -> f64 {
    let total: f64 = Zip::from(&pair.predicted)
        .and(&pair.ground_truth)
        .fold(0.0, |acc, &p, &m| {
            let p = clip(p);
            acc - (m * p.ln() + (1.0 - m) * (1.0 - p).ln())
        });
    total / pair.len()
}

/// Gradient of [`bce_loss`] w.r.t. the prediction; zero where the clip is active.
pub fn bce_grad(pair: &MaskPair<'_>) -> Array2<f64> {
    let n = pair.len();
    Zip::from(&pair.predicted)
        .and(&pair.ground_truth)
        .map_collect(|&p, &m| {
            if p < BCE_EPS || p > 1.0 - BCE_EPS {
                0.0
            } else {
                (-m / p + (1.0 - m) / (1.0 - p)) / n
            }
        })
}

fn dice_sums(pair: &MaskPair<'_>) -> (f64, f64, f64) {
    Zip::from(&pair.predicted)
        .and(&pair.ground_truth)
        .fold((0.0, 0.0, 0.0), |(i, p_sum, g_sum), &p, &m| (i + p * m, p_sum + p, g_sum + m))
}

pub fn dice_loss(pair: &MaskPair<'_>, smooth: f64) -> f64 {
    let (inter, p, g) = dice_sums(pair);
    1.0 - (2.0 * inter + smooth) / (p + g + smooth)
}

pub fn dice_grad(pair: &MaskPair<'_>, smooth: f64) -> Array2<f64> {
    let (inter, p, g) = dice_sums(pair);
    let denom = p + g + smooth;
    let num = 2.0 * inter + smooth;
    pair.ground_truth
        .mapv(|m| -(2.0 * m * denom - num) / (denom * denom))
}

pub fn mask_loss(pair: &MaskPair<'_>, w: &LossWeights) -> f64 {
    w.lambda_bce * bce_loss(pair) + w.lambda_dice * dice_loss(pair, DICE_SMOOTH)
}

pub fn mask_loss_grad(pair: &MaskPair<'_>, w: &LossWeights) -> Array2<f64> {
    bce_grad(pair) * w.lambda_bce + dice_grad(pair, DICE_SMOOTH) * w.lambda_dice
}

fn check_text(logits: &ArrayView2<'_, f64>, targets: &[Option<usize>]) -> Result<usize> {
    let (t, v) = logits.dim();
    if t != targets.len() {
        return Err(LossError::Shape {
            predicted: vec![t, v],
            target: vec![targets.len()],
        });
    }
    if v < 2 {
        return Err(LossError::Vocabulary(v));
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(LossError::NonFinite("logits"));
    }
    let mut count = 0;
    for (position, tok) in targets.iter().enumerate() {
        if let Some(token) = *tok {
            if token >= v {
                return Err(LossError::Token { position, token, vocab: v });
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(LossError::AllIgnored);
    }
    Ok(count)
}

fn log_softmax(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = row.fold(0.0, |s, &x| s + (x - max).exp()).ln() + max;
    row.mapv(|x| x - lse)
}

/// Mean cross-entropy over positions whose target is `Some`.
pub fn text_loss(logits: ArrayView2<'_, f64>, targets: &[Option<usize>]) -> Result<f64> {
    let count = check_text(&logits, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .filter_map(|(t, tok)| tok.map(|k| -log_softmax(logits.row(t))[k]))
        .sum();
    Ok(total / count as f64)
}

pub fn text_loss_grad(logits: ArrayView2<'_, f64>, targets: &[Option<usize>]) -> Result<Array2<f64>> {
    let count = check_text(&logits, targets)? as f64;
    let mut grad = Array2::zeros(logits.dim());
    for (t, tok) in targets.iter().enumerate() {
        if let Some(k) = *tok {
            let probs = log_softmax(logits.row(t)).mapv(f64::exp);
            let mut row = grad.row_mut(t);
            row.assign(&(probs / count));
            row[k] -= 1.0 / count;
        }
    }
    Ok(grad)
}

pub fn total_loss(txt: f64, mask: f64, w: &LossWeights) -> f64 {
    w.lambda_txt * txt + w.lambda_mask * mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn half(top: bool) -> Array2<f64> {
        Array2::from_shape_fn((4, 4), |(r, c)| if (top && r < 2) || (!top && c < 2) { 1.0 } else { 0.0 })
    }

    #[test]
    fn bce_examples() {
        let m = array![[1.0, 0.0], [0.0, 1.0]];
        let pair = MaskPair::new(m.view(), m.view()).unwrap();
        let perfect = bce_loss(&pair);
        assert!(perfect <= 1e-6);
        assert_abs_diff_eq!(perfect, -(1.0 - BCE_EPS).ln(), epsilon = 1e-15);

        let p = Array2::from_elem((2, 2), 0.5);
        let pair = MaskPair::new(p.view(), m.view()).unwrap();
        assert_abs_diff_eq!(bce_loss(&pair), std::f64::consts::LN_2, epsilon = 1e-12);

        let inv = m.mapv(|x| 1.0 - x);
        let pair = MaskPair::new(inv.view(), m.view()).unwrap();
        assert_abs_diff_eq!(bce_loss(&pair), 16.118, epsilon = 1e-3);
    }

    #[test]
    fn dice_examples() {
        let ones = Array2::ones((4, 4));
        let pair = MaskPair::new(ones.view(), ones.view()).unwrap();
        assert_abs_diff_eq!(dice_loss(&pair, 1.0), 0.0, epsilon = 1e-12);

        let top = half(true);
        let bottom = top.mapv(|x| 1.0 - x);
        let pair = MaskPair::new(top.view(), bottom.view()).unwrap();
        assert_abs_diff_eq!(dice_loss(&pair, 1.0), 1.0 - 1.0 / 17.0, epsilon = 1e-12);

        let left = half(false);
        let pair = MaskPair::new(top.view(), left.view()).unwrap();
        assert_abs_diff_eq!(dice_loss(&pair, 1.0), 1.0 - 9.0 / 17.0, epsilon = 1e-12);
    }

    #[test]
    fn mask_and_total_examples() {
        let p = Array2::from_elem((4, 4), 0.5);
        let m = Array2::ones((4, 4));
        let pair = MaskPair::new(p.view(), m.view()).unwrap();
        let w = LossWeights {
            lambda_bce: 2.0,
            lambda_dice: 0.5,
            ..Default::default()
        };
        let expected = 2.0 * std::f64::consts::LN_2 + 0.5 * (1.0 - 17.0 / 25.0);
        assert_abs_diff_eq!(mask_loss(&pair, &w), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(mask_loss(&pair, &w), 1.54629, epsilon = 1e-5);

        let no_bce = LossWeights { lambda_bce: 0.0, ..w };
        assert_eq!(mask_loss(&pair, &no_bce), 0.5 * dice_loss(&pair, 1.0));

        let w = LossWeights::default();
        assert_eq!(total_loss(0.5, 0.25, &w), 0.75);
        assert_abs_diff_eq!(total_loss(4f64.ln(), 1.54629, &w), 2.93258, epsilon = 1e-5);
        let no_txt = LossWeights { lambda_txt: 0.0, ..w };
        assert_eq!(total_loss(123.0, 0.25, &no_txt), 0.25);
    }

    #[test]
    fn text_examples() {
        let mut logits = Array2::zeros((3, 4));
        for t in 0..3 {
            logits[[t, t]] = 100.0;
        }
        let targets = [Some(0), Some(1), Some(2)];
        assert!(text_loss(logits.view(), &targets).unwrap() < 1e-30);

        let uniform = Array2::zeros((2, 4));
        let l = text_loss(uniform.view(), &[Some(3), None]).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-12);

        assert_eq!(text_loss(uniform.view(), &[None, None]), Err(LossError::AllIgnored));
        assert!(matches!(text_loss(uniform.view(), &[Some(4), None]), Err(LossError::Token { .. })));
        assert!(matches!(text_loss(Array2::zeros((1, 1)).view(), &[Some(0)]), Err(LossError::Vocabulary(1))));
    }

    #[test]
    fn validation() {
        let a = Array2::<f64>::zeros((2, 2));
        let b = Array2::<f64>::zeros((2, 3));
        assert!(matches!(MaskPair::new(a.view(), b.view()), Err(LossError::Shape { .. })));
        let bad = array![[0.5]];
        assert_eq!(MaskPair::new(bad.view(), bad.view()).unwrap_err(), LossError::NotBinary(0.5));
        let over = array![[1.5]];
        assert!(MaskPair::new(over.view(), array![[1.0]].view()).is_err());
        let w = LossWeights {
            lambda_dice: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn text_grad_matches_finite_differences() {
        let logits = array![[0.3, -1.2, 2.0], [0.0, 0.5, -0.5]];
        let targets = [Some(2), Some(0)];
        let g = text_loss_grad(logits.view(), &targets).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (0, 2), (1, 1)] {
            let mut p = logits.clone();
            p[idx] += h;
            let mut m = logits.clone();
            m[idx] -= h;
            let fd = (text_loss(p.view(), &targets).unwrap() - text_loss(m.view(), &targets).unwrap()) / (2.0 * h);
            assert_abs_diff_eq!(g[idx], fd, epsilon = 1e-8);
        }
    }

    fn pair_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (1usize..40).prop_flat_map(|n| (prop::collection::vec(0.0f64..=1.0, n), prop::collection::vec(any::<bool>(), n)))
    }

    proptest! {
        #[test]
        fn dice_bounded_and_permutation_invariant((p, g) in pair_strategy(), seed in any::<u64>()) {
            let n = p.len();
            let g: Vec<f64> = g.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
            let pa = Array2::from_shape_vec((1, n), p.clone()).unwrap();
            let ga = Array2::from_shape_vec((1, n), g.clone()).unwrap();
            let pair = MaskPair::new(pa.view(), ga.view()).unwrap();
            let d = dice_loss(&pair, 1.0);
            prop_assert!((0.0..1.0).contains(&d));

            let mut order: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                order.swap(i, (s >> 33) as usize % (i + 1));
            }
            let pp = Array2::from_shape_fn((1, n), |(_, i)| p[order[i]]);
            let gp = Array2::from_shape_fn((1, n), |(_, i)| g[order[i]]);
            let permuted = MaskPair::new(pp.view(), gp.view()).unwrap();
            prop_assert!((dice_loss(&permuted, 1.0) - d).abs() < 1e-12);
            prop_assert!((bce_loss(&permuted) - bce_loss(&pair)).abs() < 1e-12);
        }

        #[test]
        fn total_loss_is_linear(txt in 0.0f64..10.0, mask in 0.0f64..10.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let w = LossWeights { lambda_txt: a, lambda_mask: b, ..Default::default() };
            prop_assert!((total_loss(txt, mask, &w) - (a * txt + b * mask)).abs() < 1e-12);
            prop_assert!((total_loss(2.0 * txt, mask, &w) - total_loss(txt, mask, &w) - a * txt).abs() < 1e-9);
        }
    }

    #[test]
    fn dice_decreases_with_intersection() {
        // sums fixed: P = 2, G = 2, intersection 0, 1, 2
        let g = array![[1.0, 1.0, 0.0, 0.0]];
        let preds = [array![[0.0, 0.0, 1.0, 1.0]], array![[1.0, 0.0, 1.0, 0.0]], array![[1.0, 1.0, 0.0, 0.0]]];
        let losses: Vec<f64> = preds
            .iter()
            .map(|p| dice_loss(&MaskPair::new(p.view(), g.view()).unwrap(), 1.0))
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
    }
}
