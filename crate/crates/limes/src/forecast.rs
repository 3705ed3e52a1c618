//! Empirical class distributions, the per-step distribution history, and
//! nearest-history extrapolation of the next step's class prior.
//!
//! The forecast picks the earlier step whose class distribution is closest in
//! L1 distance to the current one and returns the distribution that followed
//! it. For exactly periodic priors this is exact from the second period on.

use std::collections::VecDeque;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ClassDistribution;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("distribution length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("labels are empty and pseudo_count is zero")]
    EmptyLabels,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("pseudo_count must be non-negative and finite, got {0}")]
    InvalidPseudoCount(f64),
    #[error("malformed history row at line {line}: {message}")]
    MalformedRow { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Observed class frequencies, optionally Laplace-smoothed:
/// `(count_y + pseudo_count) / (n + L * pseudo_count)`.
pub fn empirical_distribution(
    labels: &[usize],
    num_classes: usize,
    pseudo_count: f64,
) -> Result<ClassDistribution, ForecastError> {
    if num_classes < 2 {
        return Err(ForecastError::TooFewClasses(num_classes));
    }
    if !pseudo_count.is_finite() || pseudo_count < 0.0 {
        return Err(ForecastError::InvalidPseudoCount(pseudo_count));
    }
    if labels.is_empty() && pseudo_count == 0.0 {
        return Err(ForecastError::EmptyLabels);
    }
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(ForecastError::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        counts[y] += 1;
    }
    let denom = labels.len() as f64 + num_classes as f64 * pseudo_count;
    let probs = counts
        .into_iter()
        .map(|c| (c as f64 + pseudo_count) / denom)
        .collect();
    Ok(ClassDistribution::from_normalized(probs))
}

/// L1 distance between two distributions; lies in `[0, 2]`.
pub fn l1_distance(p: &ClassDistribution, q: &ClassDistribution) -> Result<f64, ForecastError> {
    if p.num_classes() != q.num_classes() {
        return Err(ForecastError::LengthMismatch {
            expected: p.num_classes(),
            actual: q.num_classes(),
        });
    }
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Ordered record of per-step empirical class distributions.
///
/// Entries are appended once per time step. With a capacity set, only the
/// most recent `capacity` entries are retained (rolling buffer); by default
/// the history is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionHistory {
    entries: VecDeque<ClassDistribution>,
    num_classes: usize,
    capacity: Option<usize>,
}

impl DistributionHistory {
    pub fn new(num_classes: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            num_classes,
            capacity: None,
        }
    }

    pub fn with_capacity(num_classes: usize, capacity: usize) -> Self {
        Self {
            entries: VecDeque::new(),
            num_classes,
            capacity: Some(capacity),
        }
    }

    pub fn push(&mut self, dist: ClassDistribution) -> Result<(), ForecastError> {
        if dist.num_classes() != self.num_classes {
            return Err(ForecastError::LengthMismatch {
                expected: self.num_classes,
                actual: dist.num_classes(),
            });
        }
        self.entries.push_back(dist);
        if let Some(cap) = self.capacity {
            while self.entries.len() > cap {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ClassDistribution> {
        self.entries.get(index)
    }

    pub fn last(&self) -> Option<&ClassDistribution> {
        self.entries.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassDistribution> {
        self.entries.iter()
    }

    /// Forecast the class distribution of the next time step.
    ///
    /// Call after appending the current step's distribution; the last entry
    /// is treated as the current one. Among all earlier entries, the one
    /// closest to the current in L1 distance is located (ties resolve to the
    /// most recent), and the entry that followed it is returned. With a
    /// single entry there is no history to search, so the current
    /// distribution itself is the forecast (persistence fallback).
    pub fn forecast_next(&self) -> Result<ClassDistribution, ForecastError> {
        let current = self.entries.back().ok_or(ForecastError::EmptyHistory)?;
        let n = self.entries.len();
        if n == 1 {
            return Ok(current.clone());
        }
        let mut best_idx = 0;
        let mut best_dist = f64::INFINITY;
        for (idx, entry) in self.entries.iter().take(n - 1).enumerate() {
            let dist = l1_distance(entry, current)?;
            if dist <= best_dist {
                best_dist = dist;
                best_idx = idx;
            }
        }
        Ok(self.entries[best_idx + 1].clone())
    }

    /// Write rows `t,p0,...,p{L-1}` with a header; `t` is 1-based over the
    /// retained entries.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> io::Result<()> {
        write!(writer, "t")?;
        for y in 0..self.num_classes {
            write!(writer, ",p{y}")?;
        }
        writeln!(writer)?;
        for (i, entry) in self.entries.iter().enumerate() {
            write!(writer, "{}", i + 1)?;
            for p in entry.probs() {
                write!(writer, ",{p}")?;
            }
            writeln!(writer)?;
        }
        Ok(())
    }

    /// Read a history written by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self, ForecastError> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(ForecastError::MalformedRow {
            line: 1,
            message: "missing header".into(),
        })??;
        let num_classes = header.split(',').count().saturating_sub(1);
        if num_classes < 2 {
            return Err(ForecastError::TooFewClasses(num_classes));
        }
        let mut history = Self::new(num_classes);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != num_classes + 1 {
                return Err(ForecastError::MalformedRow {
                    line: line_no,
                    message: format!("expected {} fields, got {}", num_classes + 1, fields.len()),
                });
            }
            let probs: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.parse()).collect();
            let probs = probs.map_err(|e| ForecastError::MalformedRow {
                line: line_no,
                message: e.to_string(),
            })?;
            let dist = ClassDistribution::new(probs).map_err(|e| ForecastError::MalformedRow {
                line: line_no,
                message: e.to_string(),
            })?;
            history.push(dist)?;
        }
        Ok(history)
    }
}
