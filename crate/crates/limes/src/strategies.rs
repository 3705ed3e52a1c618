//! The streaming-learner contract and the method zoo.
//!
//! Every method exposes the same cycle: `observe` the newest training batch,
//! then hand out a `predictor_for_next` to classify the following step.
//!
//! * `limes` — one base model trained against a uniform reference via a
//!   per-step logit offset `ln p_t(y)`; prediction adapts the biases toward
//!   the forecast of the next class prior.
//! * `incremental` — the same single model, trained without offsets and
//!   predicted as-is.
//! * `random` — trains like limes but adapts toward a uniformly sampled
//!   historical class distribution instead of the forecast.
//! * `ensemble` — one incrementally trained model per within-period slot;
//!   slot `(t+1) mod K` predicts step `t+1`.
//! * `restart` — retrains from scratch on the newest batch only.
//! * `erm_full` — retrains from scratch on every batch observed so far
//!   (requires batch retention; the reference point the streaming methods
//!   approximate).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{empirical_distribution, DistributionHistory, ForecastError};
use crate::model::{LinearModel, ModelError, DEFAULT_PROB_FLOOR};
use crate::optim::{train_one_step, AdamState, OptimError, TrainConfig};
use crate::seeds;
use crate::stream::TimeStepBatch;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("invalid dimensions: need num_classes >= 2 and feature_dim >= 1, got ({num_classes}, {feature_dim})")]
    InvalidDimensions {
        num_classes: usize,
        feature_dim: usize,
    },
    #[error("erm_full requires batch retention to be enabled")]
    RetentionDisabled,
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("batch out of order: expected time step {expected}, got {got}")]
    OutOfOrderBatch { expected: usize, got: usize },
    #[error("batch must be non-empty")]
    EmptyBatch,
    #[error("no predictor available before the first observed batch")]
    NotObserved,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The available streaming methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Limes,
    Incremental,
    Random,
    Ensemble,
    Restart,
    ErmFull,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Limes,
        MethodKind::Incremental,
        MethodKind::Random,
        MethodKind::Ensemble,
        MethodKind::Restart,
        MethodKind::ErmFull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Limes => "limes",
            MethodKind::Incremental => "incremental",
            MethodKind::Random => "random",
            MethodKind::Ensemble => "ensemble",
            MethodKind::Restart => "restart",
            MethodKind::ErmFull => "erm_full",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = StrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MethodKind::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| StrategyError::UnknownMethod(s.to_string()))
    }
}

/// Method-level settings shared by all learners of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub train: TrainConfig,
    /// Number of ensemble members (one per within-period slot).
    pub ensemble_size: usize,
    /// Clamp applied to prior entries before logs.
    pub prob_floor: f64,
    /// Laplace smoothing of the per-step empirical class distribution.
    pub pseudo_count: f64,
    /// Keep every observed batch; required by `erm_full`.
    pub retain_batches: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ensemble_size: 24,
            prob_floor: DEFAULT_PROB_FLOOR,
            pseudo_count: 0.0,
            retain_batches: false,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        self.train.validate()?;
        if self.ensemble_size == 0 {
            return Err(StrategyError::InvalidConfig(
                "ensemble_size must be at least 1".into(),
            ));
        }
        if self.prob_floor <= 0.0 || !self.prob_floor.is_finite() {
            return Err(StrategyError::InvalidConfig(format!(
                "prob_floor must be positive and finite, got {}",
                self.prob_floor
            )));
        }
        if !self.pseudo_count.is_finite() || self.pseudo_count < 0.0 {
            return Err(StrategyError::InvalidConfig(format!(
                "pseudo_count must be non-negative, got {}",
                self.pseudo_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainedModel {
    model: LinearModel,
    adam: AdamState,
}

impl TrainedModel {
    fn zeros(feature_dim: usize, num_classes: usize) -> Self {
        Self {
            model: LinearModel::zeros(feature_dim, num_classes),
            adam: AdamState::zeros(feature_dim, num_classes),
        }
    }
}

/// Per-method payload; each variant carries exactly the state its method needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum MethodState {
    Limes {
        base: TrainedModel,
        history: DistributionHistory,
    },
    Incremental {
        base: TrainedModel,
    },
    Random {
        base: TrainedModel,
        history: DistributionHistory,
    },
    Ensemble {
        members: Vec<TrainedModel>,
    },
    Restart {
        base: TrainedModel,
    },
    ErmFull {
        base: TrainedModel,
        retained: Vec<TimeStepBatch>,
    },
}

/// One streaming learner: a method plus everything it has accumulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    num_classes: usize,
    feature_dim: usize,
    config: StrategyConfig,
    seed: u64,
    step: usize,
    state: MethodState,
}

impl LearnerState {
    /// Fresh learner: zero-initialized models, empty history, step 0.
    pub fn new(
        kind: MethodKind,
        num_classes: usize,
        feature_dim: usize,
        config: StrategyConfig,
        seed: u64,
    ) -> Result<Self, StrategyError> {
        if num_classes < 2 || feature_dim == 0 {
            return Err(StrategyError::InvalidDimensions {
                num_classes,
                feature_dim,
            });
        }
        config.validate()?;
        let zero = || TrainedModel::zeros(feature_dim, num_classes);
        let state = match kind {
            MethodKind::Limes => MethodState::Limes {
                base: zero(),
                history: DistributionHistory::new(num_classes),
            },
            MethodKind::Incremental => MethodState::Incremental { base: zero() },
            MethodKind::Random => MethodState::Random {
                base: zero(),
                history: DistributionHistory::new(num_classes),
            },
            MethodKind::Ensemble => MethodState::Ensemble {
                members: (0..config.ensemble_size).map(|_| zero()).collect(),
            },
            MethodKind::Restart => MethodState::Restart { base: zero() },
            MethodKind::ErmFull => {
                if !config.retain_batches {
                    return Err(StrategyError::RetentionDisabled);
                }
                MethodState::ErmFull {
                    base: zero(),
                    retained: Vec::new(),
                }
            }
        };
        Ok(Self {
            num_classes,
            feature_dim,
            config,
            seed,
            step: 0,
            state,
        })
    }

    pub fn kind(&self) -> MethodKind {
        match &self.state {
            MethodState::Limes { .. } => MethodKind::Limes,
            MethodState::Incremental { .. } => MethodKind::Incremental,
            MethodState::Random { .. } => MethodKind::Random,
            MethodState::Ensemble { .. } => MethodKind::Ensemble,
            MethodState::Restart { .. } => MethodKind::Restart,
            MethodState::ErmFull { .. } => MethodKind::ErmFull,
        }
    }

    /// Number of batches observed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// The per-step class-distribution record, for methods that keep one.
    pub fn history(&self) -> Option<&DistributionHistory> {
        match &self.state {
            MethodState::Limes { history, .. } | MethodState::Random { history, .. } => {
                Some(history)
            }
            _ => None,
        }
    }

    /// The current base model (first ensemble member for `ensemble`).
    pub fn base_model(&self) -> &LinearModel {
        match &self.state {
            MethodState::Limes { base, .. }
            | MethodState::Incremental { base }
            | MethodState::Random { base, .. }
            | MethodState::Restart { base }
            | MethodState::ErmFull { base, .. } => &base.model,
            MethodState::Ensemble { members } => &members[0].model,
        }
    }

    /// Ingest the batch of time step `self.step() + 1` and update the
    /// method's model(s).
    pub fn observe(&mut self, batch: &TimeStepBatch) -> Result<(), StrategyError> {
        if batch.examples.is_empty() {
            return Err(StrategyError::EmptyBatch);
        }
        let t = self.step + 1;
        if batch.t != t {
            return Err(StrategyError::OutOfOrderBatch {
                expected: t,
                got: batch.t,
            });
        }
        let train_cfg = self.config.train.clone();
        let train_seed = seeds::derive(self.seed, seeds::STREAM_TRAIN, t as u64);
        let zero_offset = vec![0.0; self.num_classes];
        let reset = train_cfg.reset_moments_per_step;
        let num_classes = self.num_classes;
        let feature_dim = self.feature_dim;
        let pseudo_count = self.config.pseudo_count;

        let train =
            |trained: &mut TrainedModel, offset: &[f64], seed: u64| -> Result<(), StrategyError> {
                if reset {
                    trained.adam = AdamState::zeros(feature_dim, num_classes);
                }
                let (model, adam) = train_one_step(
                    &trained.model,
                    &trained.adam,
                    &batch.examples,
                    offset,
                    &train_cfg,
                    seed,
                )?;
                trained.model = model;
                trained.adam = adam;
                Ok(())
            };

        match &mut self.state {
            MethodState::Limes { base, history } | MethodState::Random { base, history } => {
                let labels: Vec<usize> = batch.labels().collect();
                let freq = empirical_distribution(&labels, num_classes, pseudo_count)?;
                history.push(freq.clone())?;
                let offset: Vec<f64> = freq
                    .probs()
                    .iter()
                    .map(|p| p.max(self.config.prob_floor).ln())
                    .collect();
                train(base, &offset, train_seed)?;
            }
            MethodState::Incremental { base } => {
                train(base, &zero_offset, train_seed)?;
            }
            MethodState::Ensemble { members } => {
                let slot = t % members.len();
                train(&mut members[slot], &zero_offset, train_seed)?;
            }
            MethodState::Restart { base } => {
                *base = TrainedModel::zeros(feature_dim, num_classes);
                // Constant seed: the retrained model depends only on the batch.
                let seed = seeds::derive(self.seed, seeds::STREAM_TRAIN, 0);
                train(base, &zero_offset, seed)?;
            }
            MethodState::ErmFull { base, retained } => {
                retained.push(batch.clone());
                *base = TrainedModel::zeros(feature_dim, num_classes);
                let all: Vec<(Vec<f64>, usize)> = retained
                    .iter()
                    .flat_map(|b| b.examples.iter().cloned())
                    .collect();
                if reset {
                    base.adam = AdamState::zeros(feature_dim, num_classes);
                }
                let (model, adam) = train_one_step(
                    &base.model,
                    &base.adam,
                    &all,
                    &zero_offset,
                    &train_cfg,
                    train_seed,
                )?;
                base.model = model;
                base.adam = adam;
            }
        }
        self.step = t;
        Ok(())
    }

    /// The model to evaluate on all of the next step's data.
    ///
    /// Adapting methods shift the base biases from the uniform reference
    /// toward their target prior; the others return their current model.
    pub fn predictor_for_next(&self) -> Result<LinearModel, StrategyError> {
        if self.step == 0 {
            return Err(StrategyError::NotObserved);
        }
        let uniform = vec![1.0 / self.num_classes as f64; self.num_classes];
        match &self.state {
            MethodState::Limes { base, history } => {
                let target = history.forecast_next()?;
                Ok(base
                    .model
                    .adapt_bias(&uniform, target.probs(), self.config.prob_floor)?)
            }
            MethodState::Random { base, history } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
                    self.seed,
                    seeds::STREAM_RANDOM_TARGET,
                    self.step as u64,
                ));
                let idx = rng.random_range(0..history.len());
                let target = history.get(idx).expect("history index in range");
                Ok(base
                    .model
                    .adapt_bias(&uniform, target.probs(), self.config.prob_floor)?)
            }
            MethodState::Ensemble { members } => {
                let slot = (self.step + 1) % members.len();
                Ok(members[slot].model.clone())
            }
            MethodState::Incremental { base }
            | MethodState::Restart { base }
            | MethodState::ErmFull { base, .. } => Ok(base.model.clone()),
        }
    }
}
