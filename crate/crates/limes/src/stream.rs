//! Time-step data model, synthetic class-prior-shift stream generation with a
//! Bayes oracle, dataset I/O, train/eval splitting, and realization
//! subsampling.
//!
//! The generator holds the class-conditional densities fixed across time
//! (isotropic Gaussians per class) while the class priors follow per-class
//! sinusoids pushed through a softmax, so they are strictly positive and
//! exactly periodic. Because only the priors move, the Bayes-optimal
//! classifier at any step is the uniform-prior one with bias-adapted priors.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{softmax, ClassDistribution};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid generator config: {field}: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error("batch needs at least {needed} examples, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("invalid split fraction {0}, must lie in (0, 1)")]
    InvalidSplitFraction(f64),
    #[error("realization offset {offset} out of range for stride {stride}")]
    OffsetOutOfRange { offset: usize, stride: usize },
    #[error("realization (stride {stride}, offset {offset}) leaves time step {t} empty")]
    EmptyRealization {
        stride: usize,
        offset: usize,
        t: usize,
    },
    #[error("feature dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{path}: line {line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: missing manifest key `{key}`")]
    MissingManifestKey { path: PathBuf, key: &'static str },
    #[error("{path}: dataset is empty")]
    EmptyDataset { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Labeled examples observed during one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeStepBatch {
    /// 1-based time-step index.
    pub t: usize,
    pub examples: Vec<(Vec<f64>, usize)>,
}

impl TimeStepBatch {
    pub fn n(&self) -> usize {
        self.examples.len()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|(_, y)| *y)
    }
}

/// Dataset-level metadata carried by the sidecar manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub seed: u64,
    pub period: usize,
}

/// An ordered stream of time-step batches with shared dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub batches: Vec<TimeStepBatch>,
    pub meta: DatasetMeta,
}

impl StreamDataset {
    pub fn num_steps(&self) -> usize {
        self.batches.len()
    }
}

/// Parameters of the synthetic class-prior-shift generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Length of one prior cycle in time steps.
    pub period: usize,
    pub num_steps: usize,
    pub examples_per_step: usize,
    pub class_means: Vec<Vec<f64>>,
    pub class_stddev: f64,
    /// Per-class sinusoid amplitude of the prior scores.
    pub prior_amplitudes: Vec<f64>,
    /// Per-class sinusoid phase, in radians.
    pub prior_phases: Vec<f64>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let num_classes = 3;
        let feature_dim = 2;
        let class_stddev = 1.0;
        Self {
            num_classes,
            feature_dim,
            period: 24,
            num_steps: 480,
            examples_per_step: 6000,
            class_means: ring_means(num_classes, feature_dim, 1.3 * class_stddev),
            class_stddev,
            prior_amplitudes: vec![1.3; num_classes],
            prior_phases: default_phases(num_classes),
            seed: 42,
        }
    }
}

/// Evenly spaced class means on a circle of the given radius (on a line for
/// `feature_dim == 1`).
pub fn ring_means(num_classes: usize, feature_dim: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|y| {
            let mut mean = vec![0.0; feature_dim];
            if feature_dim >= 2 {
                let angle = 2.0 * std::f64::consts::PI * y as f64 / num_classes as f64;
                mean[0] = radius * angle.cos();
                mean[1] = radius * angle.sin();
            } else if num_classes > 1 {
                mean[0] = radius * (2.0 * y as f64 / (num_classes - 1) as f64 - 1.0);
            }
            mean
        })
        .collect()
}

/// Evenly staggered phases, one per class.
pub fn default_phases(num_classes: usize) -> Vec<f64> {
    (0..num_classes)
        .map(|y| 2.0 * std::f64::consts::PI * y as f64 / num_classes as f64)
        .collect()
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        let fail =
            |field: &'static str, message: String| StreamError::InvalidConfig { field, message };
        if self.num_classes < 2 {
            return Err(fail("num_classes", "need at least 2 classes".into()));
        }
        if self.feature_dim == 0 {
            return Err(fail("feature_dim", "must be at least 1".into()));
        }
        if self.period == 0 {
            return Err(fail("period", "must be at least 1".into()));
        }
        if self.num_steps == 0 {
            return Err(fail("num_steps", "must be at least 1".into()));
        }
        if self.examples_per_step < self.num_classes {
            return Err(fail(
                "examples_per_step",
                format!(
                    "need at least num_classes = {} examples per step",
                    self.num_classes
                ),
            ));
        }
        if self.class_stddev <= 0.0 || !self.class_stddev.is_finite() {
            return Err(fail(
                "class_stddev",
                format!("must be positive and finite, got {}", self.class_stddev),
            ));
        }
        if self.class_means.len() != self.num_classes {
            return Err(fail(
                "class_means",
                format!(
                    "expected {} means, got {}",
                    self.num_classes,
                    self.class_means.len()
                ),
            ));
        }
        for (y, mean) in self.class_means.iter().enumerate() {
            if mean.len() != self.feature_dim {
                return Err(fail(
                    "class_means",
                    format!(
                        "mean of class {y} has dimension {}, expected {}",
                        mean.len(),
                        self.feature_dim
                    ),
                ));
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(fail("class_means", format!("class {y} mean is non-finite")));
            }
        }
        for (field, values) in [
            ("prior_amplitudes", &self.prior_amplitudes),
            ("prior_phases", &self.prior_phases),
        ] {
            if values.len() != self.num_classes {
                return Err(fail(
                    field,
                    format!(
                        "expected {} entries, got {}",
                        self.num_classes,
                        values.len()
                    ),
                ));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(fail(field, "entries must be finite".into()));
            }
        }
        Ok(())
    }

    /// True class prior at step `t`: softmax over classes of
    /// `a_y * sin(2*pi*t/P + phi_y)`. Strictly positive and exactly periodic
    /// (the angle is computed from `t mod P`, so periodicity is bitwise).
    pub fn true_prior(&self, t: usize) -> ClassDistribution {
        let frac = (t % self.period) as f64 / self.period as f64;
        let base_angle = 2.0 * std::f64::consts::PI * frac;
        let scores: Vec<f64> = (0..self.num_classes)
            .map(|y| self.prior_amplitudes[y] * (base_angle + self.prior_phases[y]).sin())
            .collect();
        ClassDistribution::from_normalized(softmax(&scores))
    }

    /// Draw the full stream: at each step, labels i.i.d. from the true prior,
    /// then features from the class-conditional Gaussian.
    pub fn generate(&self) -> Result<StreamDataset, StreamError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut batches = Vec::with_capacity(self.num_steps);
        for t in 1..=self.num_steps {
            let prior = self.true_prior(t);
            let mut examples = Vec::with_capacity(self.examples_per_step);
            for _ in 0..self.examples_per_step {
                let y = sample_label(&mut rng, prior.probs());
                let x = self.class_means[y]
                    .iter()
                    .map(|&mu| mu + self.class_stddev * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                examples.push((x, y));
            }
            batches.push(TimeStepBatch { t, examples });
        }
        Ok(StreamDataset {
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            batches,
            meta: DatasetMeta {
                source: "synthetic".into(),
                seed: self.seed,
                period: self.period,
            },
        })
    }

    /// True posterior `p(y | x, t)` under the generator's densities:
    /// proportional to `prior_t(y) * exp(-|x - mean_y|^2 / (2 sigma^2))`.
    /// Its argmax is the Bayes-optimal prediction at step `t`.
    pub fn bayes_posterior(&self, x: &[f64], t: usize) -> Result<ClassDistribution, StreamError> {
        if x.len() != self.feature_dim {
            return Err(StreamError::DimensionMismatch {
                expected: self.feature_dim,
                actual: x.len(),
            });
        }
        let prior = self.true_prior(t);
        let inv_two_var = 1.0 / (2.0 * self.class_stddev * self.class_stddev);
        let log_scores: Vec<f64> = (0..self.num_classes)
            .map(|y| {
                let sq_dist: f64 = self.class_means[y]
                    .iter()
                    .zip(x)
                    .map(|(m, xi)| (xi - m) * (xi - m))
                    .sum();
                prior.probs()[y].ln() - sq_dist * inv_two_var
            })
            .collect();
        Ok(ClassDistribution::from_normalized(softmax(&log_scores)))
    }

    /// Bayes-optimal label at step `t`.
    pub fn bayes_predict(&self, x: &[f64], t: usize) -> Result<usize, StreamError> {
        Ok(crate::model::argmax(self.bayes_posterior(x, t)?.probs()))
    }
}

fn sample_label<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (y, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return y;
        }
    }
    probs.len() - 1
}

/// How to partition a time-step batch into train and eval parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// The index sets behind [`split_train_eval`]: a seeded permutation of
/// `0..n` cut at `ceil(train_fraction * n)`, capped at `n - 1` so both sides
/// stay non-empty.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>), StreamError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(StreamError::InvalidSplitFraction(spec.train_fraction));
    }
    if n < 2 {
        return Err(StreamError::BatchTooSmall { needed: 2, got: n });
    }
    // Epsilon guard keeps exact products like 0.8 * 35 from ceiling to 29.
    let train_size = ((spec.train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let eval = order.split_off(train_size);
    Ok((order, eval))
}

/// Seeded random partition of a batch: `ceil(train_fraction * n)` examples
/// train, the remainder evaluates.
pub fn split_train_eval(
    batch: &TimeStepBatch,
    spec: &SplitSpec,
) -> Result<(TimeStepBatch, TimeStepBatch), StreamError> {
    let (train_idx, eval_idx) = split_indices(batch.n(), spec)?;
    let pick = |indices: &[usize]| TimeStepBatch {
        t: batch.t,
        examples: indices.iter().map(|&i| batch.examples[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&eval_idx)))
}

/// Deterministic strided slice of the stream: within each batch, keep the
/// examples at positions congruent to `offset` modulo `stride`.
pub fn subsample_realization(
    dataset: &StreamDataset,
    stride: usize,
    offset: usize,
) -> Result<StreamDataset, StreamError> {
    if stride == 0 || offset >= stride {
        return Err(StreamError::OffsetOutOfRange { offset, stride });
    }
    let mut batches = Vec::with_capacity(dataset.batches.len());
    for batch in &dataset.batches {
        let examples: Vec<(Vec<f64>, usize)> = batch
            .examples
            .iter()
            .enumerate()
            .filter(|(i, _)| i % stride == offset)
            .map(|(_, ex)| ex.clone())
            .collect();
        if examples.is_empty() {
            return Err(StreamError::EmptyRealization {
                stride,
                offset,
                t: batch.t,
            });
        }
        batches.push(TimeStepBatch {
            t: batch.t,
            examples,
        });
    }
    Ok(StreamDataset {
        num_classes: dataset.num_classes,
        feature_dim: dataset.feature_dim,
        batches,
        meta: dataset.meta.clone(),
    })
}

fn manifest_path(data_path: &Path) -> PathBuf {
    data_path.with_extension("manifest")
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> StreamError + '_ {
    move |source| StreamError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write the dataset as `t,y,f0,...,f{d-1}` CSV rows plus a key=value sidecar
/// manifest next to it. Floats are written in shortest round-trip form, so a
/// save/load cycle is lossless.
pub fn save_dataset(dataset: &StreamDataset, path: &Path) -> Result<(), StreamError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let write_all = |w: &mut BufWriter<File>| -> io::Result<()> {
        write!(w, "t,y")?;
        for i in 0..dataset.feature_dim {
            write!(w, ",f{i}")?;
        }
        writeln!(w)?;
        for batch in &dataset.batches {
            for (x, y) in &batch.examples {
                write!(w, "{},{}", batch.t, y)?;
                for v in x {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()
    };
    write_all(&mut w).map_err(io_err(path))?;

    let mpath = manifest_path(path);
    let mut m = BufWriter::new(File::create(&mpath).map_err(io_err(&mpath))?);
    let write_manifest = |m: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(m, "num_classes={}", dataset.num_classes)?;
        writeln!(m, "feature_dim={}", dataset.feature_dim)?;
        writeln!(m, "period={}", dataset.meta.period)?;
        writeln!(m, "source={}", dataset.meta.source)?;
        writeln!(m, "seed={}", dataset.meta.seed)?;
        m.flush()
    };
    write_manifest(&mut m).map_err(io_err(&mpath))?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`], validating every row.
pub fn load_dataset(path: &Path) -> Result<StreamDataset, StreamError> {
    let mpath = manifest_path(path);
    let manifest = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mut num_classes = None;
    let mut feature_dim = None;
    let mut period = None;
    let mut source = None;
    let mut seed = None;
    for (i, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| StreamError::MalformedRow {
                path: mpath.clone(),
                line: i + 1,
                message: "expected key=value".into(),
            })?;
        let parse_count = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| StreamError::MalformedRow {
                    path: mpath.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })
        };
        match key.trim() {
            "num_classes" => num_classes = Some(parse_count(value)?),
            "feature_dim" => feature_dim = Some(parse_count(value)?),
            "period" => period = Some(parse_count(value)?),
            "source" => source = Some(value.trim().to_string()),
            "seed" => {
                seed = Some(
                    value
                        .trim()
                        .parse::<u64>()
                        .map_err(|e| StreamError::MalformedRow {
                            path: mpath.clone(),
                            line: i + 1,
                            message: e.to_string(),
                        })?,
                )
            }
            _ => {}
        }
    }
    let missing = |key| StreamError::MissingManifestKey {
        path: mpath.clone(),
        key,
    };
    let num_classes = num_classes.ok_or_else(|| missing("num_classes"))?;
    let feature_dim = feature_dim.ok_or_else(|| missing("feature_dim"))?;
    let meta = DatasetMeta {
        source: source.ok_or_else(|| missing("source"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        period: period.ok_or_else(|| missing("period"))?,
    };

    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let bad_row = |line: usize, message: String| StreamError::MalformedRow {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (_, header) = lines.next().ok_or_else(|| StreamError::EmptyDataset {
        path: path.to_path_buf(),
    })?;
    let header = header.map_err(io_err(path))?;
    let expected_fields = feature_dim + 2;
    if header.split(',').count() != expected_fields {
        return Err(bad_row(
            1,
            format!(
                "header has {} fields, manifest declares feature_dim {}",
                header.split(',').count(),
                feature_dim
            ),
        ));
    }

    let mut batches: Vec<TimeStepBatch> = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_fields {
            return Err(bad_row(
                line_no,
                format!("expected {expected_fields} fields, got {}", fields.len()),
            ));
        }
        let t: usize = fields[0]
            .parse()
            .map_err(|e| bad_row(line_no, format!("bad time step: {e}")))?;
        let y: usize = fields[1]
            .parse()
            .map_err(|e| bad_row(line_no, format!("bad label: {e}")))?;
        if y >= num_classes {
            return Err(bad_row(
                line_no,
                format!("label {y} out of range for {num_classes} classes"),
            ));
        }
        let mut x = Vec::with_capacity(feature_dim);
        for f in &fields[2..] {
            let v: f64 = f
                .parse()
                .map_err(|e| bad_row(line_no, format!("bad feature: {e}")))?;
            if !v.is_finite() {
                return Err(bad_row(line_no, format!("non-finite feature {v}")));
            }
            x.push(v);
        }
        match batches.last_mut() {
            Some(last) if last.t == t => last.examples.push((x, y)),
            Some(last) if t == last.t + 1 => batches.push(TimeStepBatch {
                t,
                examples: vec![(x, y)],
            }),
            Some(last) => {
                return Err(bad_row(
                    line_no,
                    format!("time step {t} does not follow {}", last.t),
                ))
            }
            None if t == 1 => batches.push(TimeStepBatch {
                t,
                examples: vec![(x, y)],
            }),
            None => {
                return Err(bad_row(
                    line_no,
                    format!("first time step must be 1, got {t}"),
                ))
            }
        }
    }
    if batches.is_empty() {
        return Err(StreamError::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    Ok(StreamDataset {
        num_classes,
        feature_dim,
        batches,
        meta,
    })
}
