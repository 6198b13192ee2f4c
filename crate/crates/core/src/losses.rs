//! Training objectives: soft Dice, (weighted) binary crossentropy and their
//! compound, each with an analytic gradient with respect to the predicted
//! probabilities.
//!
//! All functions work on flat `f64` slices: `s` holds predictions in `(0, 1)`
//! and `r` holds targets in `[0, 1]`. Soft targets are used as-is in every
//! formula; only [`class_weights_from_dataset`] binarizes.

use serde::{Deserialize, Serialize};

use crate::contour::Heatmap;
use crate::error::{invalid, Error, Result};

/// Probability clamp applied before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    #[serde(alias = "wc", alias = "wce")]
    WeightedCe,
    Compound,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::WeightedCe => "weighted_ce",
            LossKind::Compound => "compound",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(LossKind::Dice),
            "weighted_ce" | "wce" | "wc" => Ok(LossKind::WeightedCe),
            "compound" => Ok(LossKind::Compound),
            other => Err(invalid(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// How crossentropy terms are aggregated over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub epsilon: f64,
    pub lambda: f64,
    /// `None` means "derive from the training masks".
    pub w_pos: Option<f64>,
    pub w_neg: Option<f64>,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Compound,
            epsilon: 1.0,
            lambda: 5.0,
            w_pos: None,
            w_neg: None,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for w in [self.w_pos, self.w_neg].into_iter().flatten() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(invalid(format!("class weights must be > 0, got {w}")));
            }
        }
        Ok(())
    }

    fn weights(&self) -> (f64, f64) {
        (self.w_pos.unwrap_or(1.0), self.w_neg.unwrap_or(1.0))
    }
}

/// Prediction/target pair of equal length.
#[derive(Clone, Copy, Debug)]
pub struct PredictionPair<'a> {
    s: &'a [f64],
    r: &'a [f64],
}

impl<'a> PredictionPair<'a> {
    pub fn new(s: &'a [f64], r: &'a [f64]) -> Result<Self> {
        if s.len() != r.len() {
            return Err(Error::ShapeMismatch(format!(
                "prediction has {} values, target has {}",
                s.len(),
                r.len()
            )));
        }
        Ok(Self { s, r })
    }

    pub fn prediction(&self) -> &'a [f64] {
        self.s
    }

    pub fn target(&self) -> &'a [f64] {
        self.r
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

/// Converts a heatmap pair into owned `f64` buffers, checking dimensions.
pub fn heatmap_buffers(s: &Heatmap, r: &Heatmap) -> Result<(Vec<f64>, Vec<f64>)> {
    if (s.width(), s.height()) != (r.width(), r.height()) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} prediction vs {}x{} target",
            s.width(),
            s.height(),
            r.width(),
            r.height()
        )));
    }
    let f = |h: &Heatmap| h.values().iter().map(|&v| v as f64).collect::<Vec<_>>();
    Ok((f(s), f(r)))
}

/// −(2·Σ s·r + ε) / (Σ s + Σ r + ε)
pub fn dice_loss(pair: PredictionPair<'_>, epsilon: f64) -> f64 {
    let (inter, total) = dice_sums(pair);
    -(2.0 * inter + epsilon) / (total + epsilon)
}

fn dice_sums(pair: PredictionPair<'_>) -> (f64, f64) {
    let mut inter = 0.0;
    let mut total = 0.0;
    for (&s, &r) in pair.s.iter().zip(pair.r) {
        inter += s * r;
        total += s + r;
    }
    (inter, total)
}

fn dice_value_and_grad(pair: PredictionPair<'_>, epsilon: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let (inter, total) = dice_sums(pair);
    let num = 2.0 * inter + epsilon;
    let den = total + epsilon;
    let den2 = den * den;
    for (g, &r) in grad.iter_mut().zip(pair.r) {
        *g += scale * -(2.0 * r * den - num) / den2;
    }
    -num / den
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

fn reduction_scale(reduction: Reduction, n: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n.max(1) as f64,
    }
}

fn wce_value_and_grad(
    pair: PredictionPair<'_>,
    w_pos: f64,
    w_neg: f64,
    reduction: Reduction,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let red = reduction_scale(reduction, pair.len());
    let mut total = 0.0;
    for (&s, &y) in pair.s.iter().zip(pair.r) {
        let p = clamp_prob(s);
        total -= w_pos * y * p.ln() + w_neg * (1.0 - y) * (1.0 - p).ln();
    }
    if let Some(grad) = grad {
        for ((g, &s), &y) in grad.iter_mut().zip(pair.s).zip(pair.r) {
            // The clamp is flat outside its range, so the gradient vanishes there.
            if s > PROB_CLAMP && s < 1.0 - PROB_CLAMP {
                *g += scale * red * -(w_pos * y / s - w_neg * (1.0 - y) / (1.0 - s));
            }
        }
    }
    total * red
}

/// −Σ [y log p + (1−y) log(1−p)], with `p` clamped to `[δ, 1−δ]`.
pub fn crossentropy_loss(pair: PredictionPair<'_>, reduction: Reduction) -> f64 {
    wce_value_and_grad(pair, 1.0, 1.0, reduction, 1.0, None)
}

/// −Σ [w_p y log p + w_n (1−y) log(1−p)].
pub fn weighted_crossentropy_loss(
    pair: PredictionPair<'_>,
    w_pos: f64,
    w_neg: f64,
    reduction: Reduction,
) -> f64 {
    wce_value_and_grad(pair, w_pos, w_neg, reduction, 1.0, None)
}

/// Dice loss plus λ times standard (unweighted) crossentropy.
pub fn compound_loss(pair: PredictionPair<'_>, cfg: &LossConfig) -> f64 {
    dice_loss(pair, cfg.epsilon) + cfg.lambda * crossentropy_loss(pair, cfg.reduction)
}

/// Loss selected by `cfg.kind`.
pub fn loss_value(pair: PredictionPair<'_>, cfg: &LossConfig) -> f64 {
    match cfg.kind {
        LossKind::Dice => dice_loss(pair, cfg.epsilon),
        LossKind::WeightedCe => {
            let (wp, wn) = cfg.weights();
            weighted_crossentropy_loss(pair, wp, wn, cfg.reduction)
        }
        LossKind::Compound => compound_loss(pair, cfg),
    }
}

/// Loss selected by `cfg.kind` together with dL/ds for every prediction.
pub fn loss_value_and_grad(pair: PredictionPair<'_>, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; pair.len()];
    let value = match cfg.kind {
        LossKind::Dice => dice_value_and_grad(pair, cfg.epsilon, 1.0, &mut grad),
        LossKind::WeightedCe => {
            let (wp, wn) = cfg.weights();
            wce_value_and_grad(pair, wp, wn, cfg.reduction, 1.0, Some(&mut grad))
        }
        LossKind::Compound => {
            let d = dice_value_and_grad(pair, cfg.epsilon, 1.0, &mut grad);
            let ce = wce_value_and_grad(pair, 1.0, 1.0, cfg.reduction, cfg.lambda, Some(&mut grad));
            d + cfg.lambda * ce
        }
    };
    (value, grad)
}

/// Inverse-frequency class weights over a set of masks.
///
/// Pixels at or above 0.5 count as positive. The raw inverse ratios are
/// rescaled so the expected per-pixel weight is 1, which gives
/// `w_pos = 1 / (2·pos_frac)` and `w_neg = 1 / (2·neg_frac)`.
pub fn class_weights_from_dataset<'a, I>(masks: I) -> Result<(f64, f64)>
where
    I: IntoIterator<Item = &'a Heatmap>,
{
    let mut pos = 0usize;
    let mut total = 0usize;
    let mut seen = false;
    for m in masks {
        seen = true;
        total += m.values().len();
        pos += m.values().iter().filter(|&&v| v >= 0.5).count();
    }
    if !seen {
        return Err(Error::EmptyDataset);
    }
    if pos == 0 {
        return Err(Error::NoPositivePixels);
    }
    let neg = total - pos;
    if neg == 0 {
        return Err(invalid("masks contain no negative pixels"));
    }
    let pos_frac = pos as f64 / total as f64;
    let neg_frac = neg as f64 / total as f64;
    Ok((0.5 / pos_frac, 0.5 / neg_frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair<'a>(s: &'a [f64], r: &'a [f64]) -> PredictionPair<'a> {
        PredictionPair::new(s, r).unwrap()
    }

    #[test]
    fn dice_worked_values() {
        let mut m = vec![0.0; 30];
        m[..10].iter_mut().for_each(|v| *v = 1.0);
        assert_eq!(dice_loss(pair(&m, &m), 1.0), -1.0);

        let r = [1.0, 1.0, 1.0, 1.0];
        assert!((dice_loss(pair(&[0.0; 4], &r), 1.0) + 0.2).abs() < 1e-15);

        let r = [1.0, 1.0, 0.0, 0.0];
        assert!((dice_loss(pair(&[0.5; 4], &r), 1.0) + 0.6).abs() < 1e-15);

        assert_eq!(dice_loss(pair(&[0.0; 9], &[0.0; 9]), 1.0), -1.0);
    }

    #[test]
    fn crossentropy_worked_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((crossentropy_loss(pair(&[0.5], &[1.0]), Reduction::Sum) - ln2).abs() < 1e-15);
        assert!((crossentropy_loss(pair(&[0.5], &[0.0]), Reduction::Sum) - ln2).abs() < 1e-15);
        let d = PROB_CLAMP;
        assert!(crossentropy_loss(pair(&[1.0 - d, d], &[1.0, 0.0]), Reduction::Sum) < 1e-5);
        // Exact 0/1 predictions are clamped rather than producing infinities.
        assert!(crossentropy_loss(pair(&[0.0], &[1.0]), Reduction::Sum).is_finite());
    }

    #[test]
    fn weighted_crossentropy_worked_values() {
        let ln2 = std::f64::consts::LN_2;
        let s = [0.3, 0.8, 0.5];
        let r = [0.0, 1.0, 0.4];
        assert_eq!(
            weighted_crossentropy_loss(pair(&s, &r), 1.0, 1.0, Reduction::Sum),
            crossentropy_loss(pair(&s, &r), Reduction::Sum)
        );
        let v = weighted_crossentropy_loss(pair(&[0.5], &[1.0]), 50.0, 1.0, Reduction::Sum);
        assert!((v - 50.0 * ln2).abs() < 1e-12);
        assert!((v - 34.657).abs() < 1e-3);
        let v = weighted_crossentropy_loss(pair(&[0.5], &[0.0]), 50.0, 1.0, Reduction::Sum);
        assert!((v - ln2).abs() < 1e-15);
    }

    #[test]
    fn compound_worked_values() {
        let s = [0.5; 4];
        let r = [1.0, 1.0, 0.0, 0.0];
        let mut cfg = LossConfig {
            reduction: Reduction::Sum,
            ..LossConfig::default()
        };
        let v = compound_loss(pair(&s, &r), &cfg);
        assert!((v - (-0.6 + 5.0 * 4.0 * std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((v - 13.263).abs() < 1e-3);

        cfg.lambda = 0.0;
        assert_eq!(compound_loss(pair(&s, &r), &cfg), dice_loss(pair(&s, &r), 1.0));

        let d = PROB_CLAMP;
        let perfect_s = [1.0 - d, d, 1.0 - d];
        let perfect_r = [1.0, 0.0, 1.0];
        cfg.lambda = 5.0;
        assert!((compound_loss(pair(&perfect_s, &perfect_r), &cfg) + 1.0).abs() < 1e-5);
    }

    #[test]
    fn mean_reduction_divides_by_pixel_count() {
        let s = [0.2, 0.7, 0.9, 0.4];
        let r = [0.0, 1.0, 1.0, 0.0];
        let sum = crossentropy_loss(pair(&s, &r), Reduction::Sum);
        let mean = crossentropy_loss(pair(&s, &r), Reduction::Mean);
        assert!((sum / 4.0 - mean).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            PredictionPair::new(&[0.1, 0.2], &[1.0]),
            Err(Error::ShapeMismatch(_))
        ));
        let a = Heatmap::zeros(2, 2);
        let b = Heatmap::zeros(4, 1);
        assert!(heatmap_buffers(&a, &b).is_err());
    }

    #[test]
    fn class_weights_inverse_ratio() {
        // 2 positives in 100 pixels.
        let mut v = vec![0.0f32; 100];
        v[10] = 1.0;
        v[11] = 0.7;
        let m = Heatmap::from_values(10, 10, v).unwrap();
        let (wp, wn) = class_weights_from_dataset([&m]).unwrap();
        assert!((wp / wn - 49.0).abs() < 1e-9);
        assert!((wp * 0.02 + wn * 0.98 - 1.0).abs() < 1e-12);

        let half = Heatmap::from_values(2, 1, vec![1.0, 0.0]).unwrap();
        let (wp, wn) = class_weights_from_dataset([&half]).unwrap();
        assert_eq!(wp, wn);

        // An all-negative mask only adds to the negative count.
        let empty = Heatmap::zeros(10, 10);
        let (wp2, wn2) = class_weights_from_dataset([&m, &empty]).unwrap();
        assert!((wp2 / wn2 - 99.0).abs() < 1e-9);

        assert!(matches!(
            class_weights_from_dataset([&empty]),
            Err(Error::NoPositivePixels)
        ));
        assert!(matches!(
            class_weights_from_dataset(std::iter::empty()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn soft_values_below_half_are_negative_for_weights() {
        let m = Heatmap::from_values(4, 1, vec![0.49, 0.5, 0.0, 0.0]).unwrap();
        let (wp, wn) = class_weights_from_dataset([&m]).unwrap();
        assert!((wp / wn - 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            w_pos: Some(0.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("wc".parse::<LossKind>().unwrap(), LossKind::WeightedCe);
    }

    fn vec_pair(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(0.0..1.0f64, n),
            prop::collection::vec(0.0..=1.0f64, n),
        )
    }

    proptest! {
        #[test]
        fn dice_range_and_symmetry((s, r) in vec_pair(16)) {
            let d = dice_loss(pair(&s, &r), 1.0);
            prop_assert!((-1.0..0.0).contains(&d));
            let swapped = dice_loss(pair(&r, &s), 1.0);
            prop_assert!((d - swapped).abs() < 1e-12);
        }

        #[test]
        fn compound_monotone_in_lambda((s, r) in vec_pair(12), l1 in 0.0..10.0f64, dl in 0.0..10.0f64) {
            let a = LossConfig { lambda: l1, ..LossConfig::default() };
            let b = LossConfig { lambda: l1 + dl, ..LossConfig::default() };
            prop_assert!(compound_loss(pair(&s, &r), &a) <= compound_loss(pair(&s, &r), &b) + 1e-12);
        }

        #[test]
        fn value_and_grad_agrees_with_value((s, r) in vec_pair(10), kind in 0..3usize) {
            let kind = [LossKind::Dice, LossKind::WeightedCe, LossKind::Compound][kind];
            let cfg = LossConfig { kind, w_pos: Some(3.0), w_neg: Some(0.6), ..LossConfig::default() };
            let (v, g) = loss_value_and_grad(pair(&s, &r), &cfg);
            prop_assert_eq!(v, loss_value(pair(&s, &r), &cfg));
            prop_assert_eq!(g.len(), s.len());
        }
    }
}
