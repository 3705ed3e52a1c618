//! Streaming multiclass classification under class-prior shift.
//!
//! The library is built around a single log-linear base model whose per-class
//! bias terms can be re-targeted analytically from one class prior to another.
//! A learner trains the base model incrementally against a uniform reference
//! prior and, at each time step, derives the classifier for the next step by
//! forecasting the upcoming class distribution and shifting the biases by the
//! corresponding log prior ratios.
//!
//! Modules:
//!
//! * [`model`] — the log-linear classifier and the bias adaptation step.
//! * [`optim`] — cross-entropy loss with prior offsets, analytic gradients,
//!   Adam updates, and one-pass incremental training.
//! * [`forecast`] — empirical class distributions, distribution history, and
//!   nearest-history extrapolation of the next prior.
//! * [`strategies`] — the streaming learner contract and the method zoo
//!   (limes, incremental, random, ensemble, restart, erm_full).
//! * [`stream`] — time-step batches, a synthetic prior-shift generator with a
//!   Bayes oracle, dataset I/O, splitting, and realization subsampling.
//! * [`metrics`] — 0/1 accuracy, per-day aggregation, cross-realization
//!   summaries, and the Wilcoxon signed-rank test.
//! * [`experiment`] — config parsing, the evaluation loop, checkpoints, and
//!   report emission backing the command-line interface.

pub mod experiment;
pub mod forecast;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod strategies;
pub mod stream;

mod seeds;

pub use forecast::{empirical_distribution, l1_distance, DistributionHistory};
pub use model::{ClassDistribution, LinearModel, DEFAULT_PROB_FLOOR};
pub use optim::{AdamState, Gradient, TrainConfig};
pub use strategies::{LearnerState, MethodKind, StrategyConfig};
pub use stream::{GeneratorConfig, SplitSpec, StreamDataset, TimeStepBatch};
