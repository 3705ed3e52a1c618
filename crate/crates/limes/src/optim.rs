//! Surrogate training: softmax cross-entropy with fixed prior offsets,
//! analytic gradients, Adam updates, and a one-pass incremental step.
//!
//! The offset realizes the adaptation of the base model toward the current
//! step's class prior during training: logits become `w_y . x + b_y + o_y`
//! with `o_y = ln p_t(y)`, the offset is held constant, and gradients flow to
//! the base parameters only.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LinearModel;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Hyperparameters of the incremental training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub minibatch_size: usize,
    pub epochs_per_step: usize,
    /// Reset Adam moments at every time step instead of carrying them across
    /// steps. Off by default; exposed for ablation.
    pub reset_moments_per_step: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            minibatch_size: 100,
            epochs_per_step: 1,
            reset_moments_per_step: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(OptimError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(OptimError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(OptimError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.minibatch_size == 0 {
            return Err(OptimError::InvalidConfig(
                "minibatch_size must be at least 1".into(),
            ));
        }
        if self.epochs_per_step == 0 {
            return Err(OptimError::InvalidConfig(
                "epochs_per_step must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment accumulators, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m_weights: Vec<f64>,
    v_weights: Vec<f64>,
    m_biases: Vec<f64>,
    v_biases: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            m_weights: vec![0.0; feature_dim * num_classes],
            v_weights: vec![0.0; feature_dim * num_classes],
            m_biases: vec![0.0; num_classes],
            v_biases: vec![0.0; num_classes],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    fn matches(&self, model: &LinearModel) -> bool {
        self.m_weights.len() == model.weights().len() && self.m_biases.len() == model.biases().len()
    }
}

/// Gradient of the mean cross-entropy loss, class-major like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub d_weights: Vec<f64>,
    pub d_biases: Vec<f64>,
}

impl Gradient {
    pub fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            d_weights: vec![0.0; feature_dim * num_classes],
            d_biases: vec![0.0; num_classes],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_weights
            .iter()
            .chain(self.d_biases.iter())
            .all(|v| v.is_finite())
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.d_weights
            .iter()
            .chain(self.d_biases.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Mean cross-entropy of `softmax(logits + offset)` against the labels, with
/// its exact gradient in the model parameters.
///
/// The offset is normalized by subtracting its maximum before use. Softmax is
/// shift invariant, so this changes nothing mathematically, and it makes a
/// constant offset vector behave bit-identically to a zero offset.
pub fn loss_and_gradient(
    model: &LinearModel,
    offset: &[f64],
    batch: &[(Vec<f64>, usize)],
) -> Result<(f64, Gradient), OptimError> {
    let refs: Vec<&(Vec<f64>, usize)> = batch.iter().collect();
    loss_and_gradient_refs(model, offset, &refs)
}

fn loss_and_gradient_refs(
    model: &LinearModel,
    offset: &[f64],
    batch: &[&(Vec<f64>, usize)],
) -> Result<(f64, Gradient), OptimError> {
    if batch.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    let num_classes = model.num_classes();
    let feature_dim = model.feature_dim();
    if offset.len() != num_classes {
        return Err(OptimError::DimensionMismatch {
            expected: num_classes,
            actual: offset.len(),
        });
    }
    let offset_max = offset.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let offset_norm: Vec<f64> = offset.iter().map(|o| o - offset_max).collect();

    let mut loss = 0.0;
    let mut grad = Gradient::zeros(feature_dim, num_classes);
    let inv_n = 1.0 / batch.len() as f64;
    let mut scores = vec![0.0; num_classes];

    for &(x, y) in batch {
        if x.len() != feature_dim {
            return Err(OptimError::DimensionMismatch {
                expected: feature_dim,
                actual: x.len(),
            });
        }
        if *y >= num_classes {
            return Err(OptimError::LabelOutOfRange {
                label: *y,
                num_classes,
            });
        }
        for (z, score) in scores.iter_mut().enumerate() {
            let w = model.class_weights(z);
            let dot: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
            *score = dot + model.biases()[z] + offset_norm[z];
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z_sum = 0.0;
        for &s in &scores {
            z_sum += (s - m).exp();
        }
        loss += (m + z_sum.ln() - scores[*y]) * inv_n;

        for (z, &score) in scores.iter().enumerate() {
            let p = (score - m).exp() / z_sum;
            let coef = (p - if z == *y { 1.0 } else { 0.0 }) * inv_n;
            grad.d_biases[z] += coef;
            let dw = &mut grad.d_weights[z * feature_dim..(z + 1) * feature_dim];
            for (gw, xi) in dw.iter_mut().zip(x) {
                *gw += coef * xi;
            }
        }
    }
    Ok((loss, grad))
}

/// One Adam update with bias-corrected moments. Inputs are untouched; the
/// updated model and state are returned as new values.
pub fn adam_step(
    model: &LinearModel,
    state: &AdamState,
    grad: &Gradient,
    config: &TrainConfig,
) -> Result<(LinearModel, AdamState), OptimError> {
    config.validate()?;
    if grad.d_weights.len() != model.weights().len() || grad.d_biases.len() != model.biases().len()
    {
        return Err(OptimError::DimensionMismatch {
            expected: model.weights().len(),
            actual: grad.d_weights.len(),
        });
    }
    if !state.matches(model) {
        return Err(OptimError::DimensionMismatch {
            expected: model.weights().len(),
            actual: state.m_weights.len(),
        });
    }
    if !grad.is_finite() {
        return Err(OptimError::NonFiniteGradient);
    }

    let mut next_model = model.clone();
    let mut next_state = state.clone();
    next_state.step_count += 1;
    let t = next_state.step_count as f64;
    let bc1 = 1.0 - config.beta1.powf(t);
    let bc2 = 1.0 - config.beta2.powf(t);

    let update = |theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..theta.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    };
    update(
        &mut next_model.weights,
        &mut next_state.m_weights,
        &mut next_state.v_weights,
        &grad.d_weights,
    );
    update(
        &mut next_model.biases,
        &mut next_state.m_biases,
        &mut next_state.v_biases,
        &grad.d_biases,
    );
    Ok((next_model, next_state))
}

/// One incremental training pass: shuffle the examples with `rng_seed`,
/// partition into minibatches (the trailing partial minibatch is kept), and
/// apply one Adam update per minibatch, `epochs_per_step` times over.
pub fn train_one_step(
    model: &LinearModel,
    state: &AdamState,
    examples: &[(Vec<f64>, usize)],
    offset: &[f64],
    config: &TrainConfig,
    rng_seed: u64,
) -> Result<(LinearModel, AdamState), OptimError> {
    if examples.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut current = model.clone();
    let mut adam = state.clone();
    for _ in 0..config.epochs_per_step {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.minibatch_size) {
            let minibatch: Vec<&(Vec<f64>, usize)> = chunk.iter().map(|&i| &examples[i]).collect();
            let (_, grad) = loss_and_gradient_refs(&current, offset, &minibatch)?;
            let (next_model, next_adam) = adam_step(&current, &adam, &grad, config)?;
            current = next_model;
            adam = next_adam;
        }
    }
    Ok((current, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn approx_eq(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, l: usize) -> LinearModel {
        let weights: Vec<f64> = (0..d * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let biases: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        LinearModel::from_parts(d, l, weights, biases).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, d: usize, l: usize, n: usize) -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                (x, rng.random_range(0..l))
            })
            .collect()
    }

    #[test]
    fn zero_model_loss_is_log_num_classes() {
        let model = LinearModel::zeros(3, 2);
        let batch = vec![
            (vec![1.0, 2.0, -1.0], 0),
            (vec![0.5, -0.5, 3.0], 1),
            (vec![0.0, 0.0, 0.0], 0),
        ];
        let (loss, _) = loss_and_gradient(&model, &[0.0, 0.0], &batch).unwrap();
        assert!(approx_eq(loss, std::f64::consts::LN_2, 1e-9));
    }

    #[test]
    fn gradient_at_uniform_point_matches_hand_derivation() {
        // Single example (x = (1,0), y = 0), zero model, zero offset, L = 2:
        // p = (0.5, 0.5), so d_biases = p - onehot = (-0.5, 0.5) and
        // d_weights[z] = (p_z - [z==y]) * x.
        let model = LinearModel::zeros(2, 2);
        let batch = vec![(vec![1.0, 0.0], 0usize)];
        let (_, grad) = loss_and_gradient(&model, &[0.0, 0.0], &batch).unwrap();
        assert_eq!(grad.d_biases, vec![-0.5, 0.5]);
        assert_eq!(grad.d_weights, vec![-0.5, 0.0, 0.5, 0.0]);
    }

    /// Central finite differences of the loss, the independent gradient oracle.
    fn finite_difference_gradient(
        model: &LinearModel,
        offset: &[f64],
        batch: &[(Vec<f64>, usize)],
        h: f64,
    ) -> Gradient {
        let d = model.feature_dim();
        let l = model.num_classes();
        let mut grad = Gradient::zeros(d, l);
        let eval = |weights: Vec<f64>, biases: Vec<f64>| {
            let m = LinearModel::from_parts(d, l, weights, biases).unwrap();
            loss_and_gradient(&m, offset, batch).unwrap().0
        };
        for i in 0..d * l {
            let mut wp = model.weights().to_vec();
            let mut wm = model.weights().to_vec();
            wp[i] += h;
            wm[i] -= h;
            let fp = eval(wp, model.biases().to_vec());
            let fm = eval(wm, model.biases().to_vec());
            grad.d_weights[i] = (fp - fm) / (2.0 * h);
        }
        for i in 0..l {
            let mut bp = model.biases().to_vec();
            let mut bm = model.biases().to_vec();
            bp[i] += h;
            bm[i] -= h;
            let fp = eval(model.weights().to_vec(), bp);
            let fm = eval(model.weights().to_vec(), bm);
            grad.d_biases[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    pub(crate) fn max_relative_error(a: &Gradient, b: &Gradient) -> f64 {
        a.d_weights
            .iter()
            .chain(a.d_biases.iter())
            .zip(b.d_weights.iter().chain(b.d_biases.iter()))
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let l = rng.random_range(2..=10);
            let d = rng.random_range(1..=8);
            let n = rng.random_range(1..=16);
            let model = random_model(&mut rng, d, l);
            let offset: Vec<f64> = (0..l).map(|_| rng.random_range(-1.5..1.5)).collect();
            let batch = random_batch(&mut rng, d, l, n);
            let (_, analytic) = loss_and_gradient(&model, &offset, &batch).unwrap();
            let numeric = finite_difference_gradient(&model, &offset, &batch, 1e-5);
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-4, "relative error {err} exceeds 1e-4");
        }
    }

    #[test]
    fn constant_offset_is_bitwise_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 3, 4);
        let batch = random_batch(&mut rng, 3, 4, 10);
        let c = -1.098_612_288_668_109_8; // ln(1/3); any shared value works
        let (loss_zero, grad_zero) = loss_and_gradient(&model, &[0.0; 4], &batch).unwrap();
        let (loss_c, grad_c) = loss_and_gradient(&model, &[c; 4], &batch).unwrap();
        assert_eq!(loss_zero, loss_c);
        assert_eq!(grad_zero, grad_c);
    }

    #[test]
    fn offset_shift_changes_nothing_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = random_model(&mut rng, 2, 3);
        let batch = random_batch(&mut rng, 2, 3, 8);
        let offset = [0.3, -1.2, 0.8];
        let shifted: Vec<f64> = offset.iter().map(|o| o + 4.5).collect();
        let (l0, g0) = loss_and_gradient(&model, &offset, &batch).unwrap();
        let (l1, g1) = loss_and_gradient(&model, &shifted, &batch).unwrap();
        assert!(approx_eq(l0, l1, 1e-12));
        for (a, b) in g0
            .d_weights
            .iter()
            .chain(g0.d_biases.iter())
            .zip(g1.d_weights.iter().chain(g1.d_biases.iter()))
        {
            assert!(approx_eq(*a, *b, 1e-12));
        }
    }

    #[test]
    fn loss_rejects_empty_batch_and_bad_shapes() {
        let model = LinearModel::zeros(2, 2);
        assert!(matches!(
            loss_and_gradient(&model, &[0.0, 0.0], &[]),
            Err(OptimError::EmptyBatch)
        ));
        assert!(matches!(
            loss_and_gradient(&model, &[0.0], &[(vec![0.0, 0.0], 0)]),
            Err(OptimError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            loss_and_gradient(&model, &[0.0, 0.0], &[(vec![0.0], 0)]),
            Err(OptimError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            loss_and_gradient(&model, &[0.0, 0.0], &[(vec![0.0, 0.0], 2)]),
            Err(OptimError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let model =
            LinearModel::from_parts(2, 2, vec![0.1, -0.2, 0.3, 0.4], vec![1.0, -1.0]).unwrap();
        let state = AdamState::zeros(2, 2);
        let grad = Gradient::zeros(2, 2);
        let (next, ns) = adam_step(&model, &state, &grad, &TrainConfig::default()).unwrap();
        assert_eq!(next, model);
        assert_eq!(ns.step_count(), 1);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let cfg = TrainConfig::default();
        let g = 0.5;
        let model = LinearModel::zeros(1, 1);
        let state = AdamState::zeros(1, 1);
        let grad = Gradient {
            d_weights: vec![g],
            d_biases: vec![g],
        };
        let (next, _) = adam_step(&model, &state, &grad, &cfg).unwrap();
        // First step: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps).
        let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
        assert!(approx_eq(next.weights()[0], expected, 1e-15));
        assert!(approx_eq(next.biases()[0], expected, 1e-15));
        assert!(approx_eq(expected, -0.000_999_999_98, 1e-9));
    }

    #[test]
    fn adam_constant_gradient_moves_against_sign() {
        let cfg = TrainConfig::default();
        let model = LinearModel::zeros(1, 2);
        let state = AdamState::zeros(1, 2);
        let grad = Gradient {
            d_weights: vec![0.7, -0.3],
            d_biases: vec![0.7, -0.3],
        };
        let (m1, s1) = adam_step(&model, &state, &grad, &cfg).unwrap();
        let (m2, _) = adam_step(&m1, &s1, &grad, &cfg).unwrap();
        assert!(m2.weights()[0] < m1.weights()[0] && m1.weights()[0] < 0.0);
        assert!(m2.weights()[1] > m1.weights()[1] && m1.weights()[1] > 0.0);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let model = LinearModel::zeros(1, 1);
        let state = AdamState::zeros(1, 1);
        let grad = Gradient {
            d_weights: vec![f64::NAN],
            d_biases: vec![0.0],
        };
        assert!(matches!(
            adam_step(&model, &state, &grad, &TrainConfig::default()),
            Err(OptimError::NonFiniteGradient)
        ));
    }

    #[test]
    fn train_step_count_matches_minibatch_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = random_batch(&mut rng, 2, 2, 250);
        let model = LinearModel::zeros(2, 2);
        let state = AdamState::zeros(2, 2);
        let cfg = TrainConfig::default();
        let (_, s) = train_one_step(&model, &state, &batch, &[0.0, 0.0], &cfg, 1).unwrap();
        assert_eq!(s.step_count(), 3); // ceil(250/100)
        let cfg2 = TrainConfig {
            epochs_per_step: 2,
            ..cfg
        };
        let (_, s2) = train_one_step(&model, &state, &batch, &[0.0, 0.0], &cfg2, 1).unwrap();
        assert_eq!(s2.step_count(), 6);
    }

    #[test]
    fn train_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = random_batch(&mut rng, 3, 3, 120);
        let model = random_model(&mut rng, 3, 3);
        let state = AdamState::zeros(3, 3);
        let cfg = TrainConfig::default();
        let offset = [0.1, -0.4, 0.2];
        let (m1, s1) = train_one_step(&model, &state, &batch, &offset, &cfg, 77).unwrap();
        let (m2, s2) = train_one_step(&model, &state, &batch, &offset, &cfg, 77).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn train_reduces_loss_on_separable_batch() {
        // Two well-separated clusters, one per class.
        let mut batch = Vec::new();
        for i in 0..40 {
            let off = (i % 5) as f64 * 0.1;
            batch.push((vec![2.0 + off, 2.0 - off], 0));
            batch.push((vec![-2.0 - off, -2.0 + off], 1));
        }
        let model = LinearModel::zeros(2, 2);
        let state = AdamState::zeros(2, 2);
        let cfg = TrainConfig {
            minibatch_size: 10,
            ..TrainConfig::default()
        };
        let zero_offset = [0.0, 0.0];
        let (before, _) = loss_and_gradient(&model, &zero_offset, &batch).unwrap();
        let (trained, _) = train_one_step(&model, &state, &batch, &zero_offset, &cfg, 13).unwrap();
        let (after, _) = loss_and_gradient(&trained, &zero_offset, &batch).unwrap();
        assert!(after < before, "loss {after} not below {before}");
    }
}
