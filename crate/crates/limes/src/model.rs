//! Log-linear multiclass classifier and analytic class-prior bias adaptation.
//!
//! The model scores class `y` on input `x` as `w_y . x + b_y`. Because the
//! posterior is a softmax over these scores, retargeting the classifier from
//! class prior `p` to class prior `q` only requires shifting each bias by
//! `ln(q_y / p_y)`; the weights are untouched.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default clamp applied to prior entries before taking logs, so adaptation
/// stays finite when a class was never observed.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature dimension mismatch: model expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("class count mismatch: expected {expected}, got {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("prior weights must be non-negative and finite, got {0}")]
    InvalidPriorWeight(f64),
    #[error("probability floor must be positive and finite, got {0}")]
    NonPositiveFloor(f64),
    #[error("model parameters must be finite")]
    NonFiniteParameter,
}

/// Probability vector over the label set `{0, .., L-1}`.
///
/// Entries are non-negative and sum to one within `1e-9`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    /// Validate and wrap a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::InvalidDistribution(
                "distribution must have at least one class".into(),
            ));
        }
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(ModelError::InvalidDistribution(format!(
                    "entry {p} is negative or non-finite"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// The uniform distribution over `num_classes` classes.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Construct without re-validation, for values that sum to one by
    /// construction (softmax outputs, normalized counts).
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        Self { probs }
    }
}

/// Log-linear classifier: a `d x L` weight matrix and per-class biases.
///
/// Weights are stored class-major, so the weight vector of class `y` is the
/// contiguous slice `weights[y*d .. (y+1)*d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    feature_dim: usize,
    num_classes: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) biases: Vec<f64>,
}

impl LinearModel {
    /// The all-zero model. Predicts class 0 everywhere via the tie-break rule.
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            num_classes,
            weights: vec![0.0; feature_dim * num_classes],
            biases: vec![0.0; num_classes],
        }
    }

    /// Build a model from explicit parameters, validating shapes and finiteness.
    pub fn from_parts(
        feature_dim: usize,
        num_classes: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if weights.len() != feature_dim * num_classes {
            return Err(ModelError::DimensionMismatch {
                expected: feature_dim * num_classes,
                actual: weights.len(),
            });
        }
        if biases.len() != num_classes {
            return Err(ModelError::ClassCountMismatch {
                expected: num_classes,
                actual: biases.len(),
            });
        }
        if weights.iter().chain(biases.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteParameter);
        }
        Ok(Self {
            feature_dim,
            num_classes,
            weights,
            biases,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    /// Weight vector of class `y`.
    pub fn class_weights(&self, y: usize) -> &[f64] {
        &self.weights[y * self.feature_dim..(y + 1) * self.feature_dim]
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.feature_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.feature_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Unnormalized per-class scores `w_y . x + b_y`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        let mut scores = Vec::with_capacity(self.num_classes);
        for y in 0..self.num_classes {
            let w = self.class_weights(y);
            let dot: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
            scores.push(dot + self.biases[y]);
        }
        Ok(scores)
    }

    /// Softmax posterior over classes.
    pub fn posterior(&self, x: &[f64]) -> Result<ClassDistribution, ModelError> {
        let scores = self.logits(x)?;
        Ok(ClassDistribution::from_normalized(softmax(&scores)))
    }

    /// Predicted label: argmax score, ties broken by lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        let scores = self.logits(x)?;
        Ok(argmax(&scores))
    }

    /// Retarget the classifier from prior `source` to prior `target`.
    ///
    /// Returns a new model with `b'_y = b_y + ln(target_y / source_y)` and
    /// unchanged weights; both priors are clamped at `floor` before the log.
    /// The priors are accepted as raw non-negative weight vectors: scaling
    /// either one by a positive constant shifts every bias equally, which the
    /// softmax cancels.
    pub fn adapt_bias(
        &self,
        source: &[f64],
        target: &[f64],
        floor: f64,
    ) -> Result<LinearModel, ModelError> {
        if floor <= 0.0 || !floor.is_finite() {
            return Err(ModelError::NonPositiveFloor(floor));
        }
        if source.len() != self.num_classes {
            return Err(ModelError::ClassCountMismatch {
                expected: self.num_classes,
                actual: source.len(),
            });
        }
        if target.len() != self.num_classes {
            return Err(ModelError::ClassCountMismatch {
                expected: self.num_classes,
                actual: target.len(),
            });
        }
        for &v in source.iter().chain(target.iter()) {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::InvalidPriorWeight(v));
            }
        }
        let mut biases = self.biases.clone();
        for y in 0..self.num_classes {
            biases[y] += (target[y].max(floor) / source[y].max(floor)).ln();
        }
        Ok(LinearModel {
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
            weights: self.weights.clone(),
            biases,
        })
    }
}

/// Numerically stable softmax: subtracts the maximum score before
/// exponentiating, so scores up to around `|1e4|` stay finite.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx_eq(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn logits_zero_model_are_zero() {
        let m = LinearModel::zeros(3, 4);
        let s = m.logits(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(s, vec![0.0; 4]);
    }

    #[test]
    fn logits_unit_basis_weights() {
        // w_0 = (1,0), w_1 = (0,1), b = 0, x = (2,1) -> scores (2,1)
        let m = LinearModel::from_parts(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(m.logits(&[2.0, 1.0]).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn logits_bias_only_model() {
        let m = LinearModel::from_parts(2, 3, vec![0.0; 6], vec![0.5, -0.5, 0.0]).unwrap();
        assert_eq!(m.logits(&[3.0, -7.0]).unwrap(), vec![0.5, -0.5, 0.0]);
    }

    #[test]
    fn logits_rejects_dimension_mismatch() {
        let m = LinearModel::zeros(3, 2);
        assert!(matches!(
            m.logits(&[1.0, 2.0]),
            Err(ModelError::DimensionMismatch {
                expected: 3,
                actual: 2
            })
        ));
    }

    #[test]
    fn posterior_zero_model_is_uniform() {
        let m = LinearModel::zeros(2, 3);
        let p = m.posterior(&[0.3, 0.4]).unwrap();
        for &v in p.probs() {
            assert_eq!(v, 1.0 / 3.0);
        }
    }

    #[test]
    fn posterior_matches_softmax_reference() {
        // softmax(2,1) = (1/(1+e^-1), e^-1/(1+e^-1))
        let m = LinearModel::from_parts(1, 2, vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        let p = m.posterior(&[0.0]).unwrap();
        assert!(approx_eq(p.probs()[0], 0.731_058_578_630_004_9, 1e-12));
        assert!(approx_eq(p.probs()[1], 0.268_941_421_369_995_1, 1e-12));
    }

    #[test]
    fn posterior_is_shift_invariant() {
        let scores = [1.3, -0.2, 0.7];
        let shifted: Vec<f64> = scores.iter().map(|s| s + 57.25).collect();
        let a = softmax(&scores);
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            assert!(approx_eq(*x, *y, 1e-12));
        }
    }

    #[test]
    fn posterior_finite_for_large_scores() {
        let m = LinearModel::from_parts(1, 3, vec![0.0; 3], vec![1e4, -1e4, 0.0]).unwrap();
        let p = m.posterior(&[0.0]).unwrap();
        assert!(p.probs().iter().all(|v| v.is_finite()));
        assert!(approx_eq(p.probs().iter().sum::<f64>(), 1.0, 1e-9));
    }

    #[test]
    fn predict_strict_maximum() {
        let m = LinearModel::from_parts(1, 2, vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        assert_eq!(m.predict(&[0.0]).unwrap(), 0);
    }

    #[test]
    fn predict_tie_breaks_to_lowest_index() {
        let m = LinearModel::zeros(2, 4);
        assert_eq!(m.predict(&[1.0, 1.0]).unwrap(), 0);
        let m = LinearModel::from_parts(1, 3, vec![0.0; 3], vec![-1.0, 5.0, 5.0]).unwrap();
        assert_eq!(m.predict(&[0.0]).unwrap(), 1);
    }

    #[test]
    fn adapt_identity_keeps_biases_exactly() {
        let m = LinearModel::from_parts(2, 2, vec![0.1, 0.2, 0.3, 0.4], vec![0.5, -0.25]).unwrap();
        let p = [0.6, 0.4];
        let adapted = m.adapt_bias(&p, &p, DEFAULT_PROB_FLOOR).unwrap();
        assert_eq!(adapted.biases(), m.biases());
        assert_eq!(adapted.weights(), m.weights());
    }

    #[test]
    fn adapt_matches_log_ratio_reference() {
        let m = LinearModel::zeros(1, 2);
        let adapted = m
            .adapt_bias(&[0.5, 0.5], &[0.8, 0.2], DEFAULT_PROB_FLOOR)
            .unwrap();
        // ln 1.6 and ln 0.4
        assert!(approx_eq(
            adapted.biases()[0],
            0.470_003_629_245_735_6,
            1e-12
        ));
        assert!(approx_eq(
            adapted.biases()[1],
            -0.916_290_731_874_155,
            1e-12
        ));
    }

    #[test]
    fn adapt_round_trip_recovers_biases() {
        let m = LinearModel::from_parts(1, 3, vec![1.0, -1.0, 0.5], vec![0.2, -0.7, 1.1]).unwrap();
        let p = [0.5, 0.3, 0.2];
        let q = [0.1, 0.6, 0.3];
        let back = m
            .adapt_bias(&p, &q, DEFAULT_PROB_FLOOR)
            .unwrap()
            .adapt_bias(&q, &p, DEFAULT_PROB_FLOOR)
            .unwrap();
        for (a, b) in back.biases().iter().zip(m.biases()) {
            assert!(approx_eq(*a, *b, 1e-12));
        }
    }

    #[test]
    fn adapt_rejects_bad_inputs() {
        let m = LinearModel::zeros(1, 2);
        assert!(matches!(
            m.adapt_bias(&[0.5, 0.5], &[1.0], DEFAULT_PROB_FLOOR),
            Err(ModelError::ClassCountMismatch { .. })
        ));
        assert!(matches!(
            m.adapt_bias(&[0.5, 0.5], &[0.5, 0.5], 0.0),
            Err(ModelError::NonPositiveFloor(_))
        ));
        assert!(matches!(
            m.adapt_bias(&[0.5, 0.5], &[-0.1, 1.1], DEFAULT_PROB_FLOOR),
            Err(ModelError::InvalidPriorWeight(_))
        ));
    }

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(ClassDistribution::new(vec![0.5, 0.49]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassDistribution::new(vec![]).is_err());
        let u = ClassDistribution::uniform(4);
        assert_eq!(u.probs(), &[0.25, 0.25, 0.25, 0.25]);
    }
}
