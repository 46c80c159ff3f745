//! Training objectives: weighted binary cross-entropy and soft dice.
//!
//! Both return the scalar together with its gradient with respect to the
//! probability map, so the tape can attach them as a single node.

use log::warn;

use crate::error::{Error, Result};
use crate::isolation::{BinaryMask, ProbabilityMap};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Additive smoothing in the soft dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Gradient of `value` w.r.t. each probability.
    pub grad: Vec<f64>,
}

/// Per-pixel loss weights: 1 on background, a shared ratio on foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    values: Vec<f64>,
}

impl WeightMap {
    pub fn uniform(len: usize) -> Self {
        Self { values: vec![1.0; len] }
    }

    /// Weight `ratio` on foreground pixels of `target`, 1 elsewhere.
    pub fn with_ratio(target: &BinaryMask, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::invalid(format!(
                "foreground weight must be positive, got {ratio}"
            )));
        }
        Ok(Self {
            values: target
                .bits()
                .iter()
                .map(|&b| if b != 0 { ratio } else { 1.0 })
                .collect(),
        })
    }

    /// Background/foreground balancing weights for one training sample.
    ///
    /// Targets without foreground, or without background, fall back to a
    /// ratio of 1.
    pub fn balanced(target: &BinaryMask) -> Self {
        let ratio = match foreground_weight(target) {
            Ok(r) if r > 0.0 => r,
            _ => 1.0,
        };
        Self::with_ratio(target, ratio).expect("ratio is positive")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|w| w * c).collect(),
        }
    }
}

impl From<Vec<f64>> for WeightMap {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}

/// `#background / #foreground` for a binary target.
///
/// An all-foreground target yields 0 with a warning; an all-background
/// target is an error (the sample carries no foreground signal).
pub fn foreground_weight(target: &BinaryMask) -> Result<f64> {
    let fg = target.count();
    if fg == 0 {
        return Err(Error::invalid(
            "target has no foreground pixels; cannot derive a class weight",
        ));
    }
    let bg = target.bits().len() - fg;
    if bg == 0 {
        warn!("target is entirely foreground; class weight is 0");
    }
    Ok(bg as f64 / fg as f64)
}

/// Mean over pixels of `-w * [t ln q + (1 - t) ln(1 - q)]` with `q` the
/// clamped prediction. The gradient is evaluated at the clamped value.
pub fn weighted_cross_entropy_raw(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<LossValue> {
    if pred.len() != target.len() || pred.len() != weights.len() {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!(
                "pred has {}, target {}, weights {} entries",
                pred.len(),
                target.len(),
                weights.len()
            ),
        ));
    }
    if pred.is_empty() {
        return Err(Error::invalid("weighted_cross_entropy on an empty map"));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for ((&p, &t), &w) in pred.iter().zip(target).zip(weights) {
        let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= w * (t * q.ln() + (1.0 - t) * (1.0 - q).ln());
        grad.push(-w * (t / q - (1.0 - t) / (1.0 - q)) / n);
    }
    Ok(LossValue { value: total / n, grad })
}

pub fn weighted_cross_entropy(pred: &ProbabilityMap, target: &BinaryMask, weights: &WeightMap) -> Result<LossValue> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("pred {:?} vs target {:?}", pred.dims(), target.dims()),
        ));
    }
    weighted_cross_entropy_raw(pred.values(), &target.to_f64(), weights.values())
}

/// Soft dice loss `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)`.
pub fn dice_loss_raw(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    if pred.len() != target.len() {
        return Err(Error::shape(
            "dice_loss",
            format!("pred has {} entries, target {}", pred.len(), target.len()),
        ));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let sp: f64 = pred.iter().sum();
    let st: f64 = target.iter().sum();
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + st + DICE_SMOOTH;
    let grad = target.iter().map(|&t| -(2.0 * t * den - num) / (den * den)).collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad,
    })
}

pub fn dice_loss(pred: &ProbabilityMap, target: &BinaryMask) -> Result<LossValue> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(
            "dice_loss",
            format!("pred {:?} vs target {:?}", pred.dims(), target.dims()),
        ));
    }
    dice_loss_raw(pred.values(), &target.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::new(h, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn foreground_weight_counts() {
        let mut bits = vec![0u8; 100];
        bits[..10].fill(1);
        assert_eq!(foreground_weight(&mask(10, 10, &bits)).unwrap(), 9.0);
        assert_eq!(foreground_weight(&mask(2, 2, &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(foreground_weight(&mask(2, 2, &[1, 1, 1, 1])).unwrap(), 0.0);
        assert!(foreground_weight(&mask(2, 2, &[0, 0, 0, 0])).is_err());
    }

    #[test]
    fn balanced_weights_apply_floor() {
        let all_fg = mask(1, 2, &[1, 1]);
        assert_eq!(WeightMap::balanced(&all_fg).values(), &[1.0, 1.0]);
        let none = mask(1, 2, &[0, 0]);
        assert_eq!(WeightMap::balanced(&none).values(), &[1.0, 1.0]);
        let m = mask(1, 4, &[1, 0, 0, 0]);
        assert_eq!(WeightMap::balanced(&m).values(), &[3.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let t = mask(2, 2, &[1, 0, 0, 1]);
        let p = ProbabilityMap::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = weighted_cross_entropy(&p, &t, &WeightMap::uniform(4)).unwrap();
        assert!(l.value <= 2.0 * PROB_EPS * PROB_EPS.ln().abs(), "{}", l.value);
    }

    #[test]
    fn half_probability_gives_ln2() {
        let t = mask(2, 2, &[1, 0, 1, 1]);
        let p = ProbabilityMap::new(2, 2, vec![0.5; 4]).unwrap();
        let l = weighted_cross_entropy(&p, &t, &WeightMap::uniform(4)).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_reference_value() {
        // Independent scalar evaluation:
        //   -(ln 0.9 + ln 0.9 + ln 0.8 + ln 0.8) / 4 = -(ln 0.9 + ln 0.8) / 2
        let t = mask(2, 2, &[1, 0, 1, 0]);
        let p = ProbabilityMap::new(2, 2, vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let w = WeightMap::with_ratio(&t, foreground_weight(&t).unwrap()).unwrap();
        let l = weighted_cross_entropy(&p, &t, &w).unwrap();
        assert!((l.value - 0.164_252_033_486_018_08).abs() < 1e-12, "{}", l.value);
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let t = mask(1, 4, &[1, 1, 0, 0]);
        let l = dice_loss(&t.to_probabilities(), &t).unwrap();
        assert!(l.value.abs() < 1e-15);

        let big = 400;
        let a: Vec<f64> = (0..2 * big).map(|i| f64::from(u8::from(i < big))).collect();
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let l = dice_loss_raw(&a, &b).unwrap();
        assert!(l.value > 0.99);
    }

    #[test]
    fn dice_half_overlap_with_smoothing() {
        let p = mask(1, 3, &[1, 1, 0]);
        let t = mask(1, 3, &[0, 1, 1]);
        let l = dice_loss(&p.to_probabilities(), &t).unwrap();
        assert!((l.value - 0.4).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = mask(1, 2, &[1, 0]);
        let p = ProbabilityMap::new(2, 1, vec![0.5, 0.5]).unwrap();
        assert!(dice_loss(&p, &t).is_err());
        assert!(weighted_cross_entropy(&p, &t, &WeightMap::uniform(2)).is_err());
    }
}
