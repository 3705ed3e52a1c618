//! Accuracy evaluation under 0/1 loss, per-day aggregation, summaries across
//! realizations, and the Wilcoxon signed-rank test for paired comparisons.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::model::{LinearModel, ModelError};
use crate::strategies::MethodKind;
use crate::stream::TimeStepBatch;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("evaluation batch must be non-empty")]
    EmptyBatch,
    #[error("accuracy series must be non-empty")]
    EmptySeries,
    #[error("period must be at least 1")]
    ZeroPeriod,
    #[error("paired samples have different lengths: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("series lengths differ: expected {expected} steps, got {actual}")]
    SeriesLengthMismatch { expected: usize, actual: usize },
    #[error("methods have different realization counts: {0}")]
    RealizationMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: line {line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Per-step accuracies of one (method, realization) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySeries {
    pub method: MethodKind,
    pub realization: usize,
    /// `(t, accuracy)` pairs with strictly increasing `t`.
    pub per_step: Vec<(usize, f64)>,
}

/// Fraction of evaluation examples the model labels correctly.
pub fn step_accuracy(model: &LinearModel, eval: &TimeStepBatch) -> Result<f64, MetricsError> {
    if eval.examples.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let mut correct = 0usize;
    for (x, y) in &eval.examples {
        if model.predict(x)? == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.n() as f64)
}

/// Mean and minimum accuracy of one day (one window of `period` steps).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayAggregate {
    pub day: usize,
    pub avg: f64,
    pub min: f64,
}

/// Aggregate a per-step series into consecutive non-overlapping windows of
/// `period` steps; a trailing partial window is dropped.
pub fn day_aggregate(
    per_step: &[(usize, f64)],
    period: usize,
) -> Result<Vec<DayAggregate>, MetricsError> {
    if per_step.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    if period == 0 {
        return Err(MetricsError::ZeroPeriod);
    }
    Ok(per_step
        .chunks_exact(period)
        .enumerate()
        .map(|(i, window)| {
            let avg = window.iter().map(|(_, a)| a).sum::<f64>() / period as f64;
            let min = window.iter().map(|(_, a)| *a).fold(f64::INFINITY, f64::min);
            DayAggregate {
                day: i + 1,
                avg,
                min,
            }
        })
        .collect())
}

/// Mean with a sample standard deviation when two or more values exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: Option<f64>,
}

fn summary_stat(values: &[f64]) -> SummaryStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() >= 2 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        Some(var.sqrt())
    } else {
        None
    };
    SummaryStat { mean, std }
}

/// Per-realization day-level aggregates of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationAggregate {
    pub realization: usize,
    /// Mean over days of the per-day average accuracy.
    pub avg_of_avg: f64,
    /// Mean over days of the per-day minimum accuracy.
    pub avg_of_min: f64,
    pub days: Vec<DayAggregate>,
}

/// Cross-realization statistics of one day, for curve plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayStats {
    pub day: usize,
    pub avg: SummaryStat,
    pub min: SummaryStat,
}

/// Everything reported for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: MethodKind,
    pub avg_of_avg: SummaryStat,
    pub avg_of_min: SummaryStat,
    pub per_realization: Vec<RealizationAggregate>,
    pub per_day: Vec<DayStats>,
}

/// Which metric a pairwise test compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedMetric {
    AvgOfAvg,
    AvgOfMin,
}

impl PairedMetric {
    pub fn name(&self) -> &'static str {
        match self {
            PairedMetric::AvgOfAvg => "avg_of_avg",
            PairedMetric::AvgOfMin => "avg_of_min",
        }
    }
}

/// How pairwise tests pair their samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairingMode {
    /// One pair per realization (aggregates over all days).
    PerRealization,
    /// One pair per (realization, day).
    PerDay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub method_a: MethodKind,
    pub method_b: MethodKind,
    pub metric: PairedMetric,
    pub statistic: f64,
    pub p_value: f64,
}

/// Aggregated comparison of all methods in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub summaries: Vec<MethodSummary>,
    pub pairwise: Vec<PairwiseTest>,
}

impl MetricsReport {
    pub fn summary_for(&self, method: MethodKind) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

/// Summarize accuracy series across realizations.
///
/// Every series must cover the same number of steps. Methods are summarized
/// in `MethodKind` order; pairwise Wilcoxon tests run for every method pair
/// and both metrics when at least two methods have matching realization
/// counts.
pub fn summarize_realizations(
    all_series: &[AccuracySeries],
    period: usize,
    pairing: PairingMode,
) -> Result<MetricsReport, MetricsError> {
    if all_series.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let expected = all_series[0].per_step.len();
    for series in all_series {
        if series.per_step.len() != expected {
            return Err(MetricsError::SeriesLengthMismatch {
                expected,
                actual: series.per_step.len(),
            });
        }
    }
    let mut by_method: BTreeMap<MethodKind, Vec<&AccuracySeries>> = BTreeMap::new();
    for series in all_series {
        by_method.entry(series.method).or_default().push(series);
    }

    let mut summaries = Vec::new();
    for (method, mut series_list) in by_method {
        series_list.sort_by_key(|s| s.realization);
        let mut per_realization = Vec::new();
        for series in &series_list {
            let days = day_aggregate(&series.per_step, period)?;
            if days.is_empty() {
                return Err(MetricsError::EmptySeries);
            }
            let avg_of_avg = days.iter().map(|d| d.avg).sum::<f64>() / days.len() as f64;
            let avg_of_min = days.iter().map(|d| d.min).sum::<f64>() / days.len() as f64;
            per_realization.push(RealizationAggregate {
                realization: series.realization,
                avg_of_avg,
                avg_of_min,
                days,
            });
        }
        let num_days = per_realization[0].days.len();
        let per_day = (0..num_days)
            .map(|i| DayStats {
                day: i + 1,
                avg: summary_stat(
                    &per_realization
                        .iter()
                        .map(|r| r.days[i].avg)
                        .collect::<Vec<_>>(),
                ),
                min: summary_stat(
                    &per_realization
                        .iter()
                        .map(|r| r.days[i].min)
                        .collect::<Vec<_>>(),
                ),
            })
            .collect();
        summaries.push(MethodSummary {
            method,
            avg_of_avg: summary_stat(
                &per_realization
                    .iter()
                    .map(|r| r.avg_of_avg)
                    .collect::<Vec<_>>(),
            ),
            avg_of_min: summary_stat(
                &per_realization
                    .iter()
                    .map(|r| r.avg_of_min)
                    .collect::<Vec<_>>(),
            ),
            per_realization,
            per_day,
        });
    }

    let mut pairwise = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let (a, b) = (&summaries[i], &summaries[j]);
            if a.per_realization.len() != b.per_realization.len() {
                return Err(MetricsError::RealizationMismatch(format!(
                    "{} has {}, {} has {}",
                    a.method,
                    a.per_realization.len(),
                    b.method,
                    b.per_realization.len()
                )));
            }
            for metric in [PairedMetric::AvgOfAvg, PairedMetric::AvgOfMin] {
                let collect = |s: &MethodSummary| -> Vec<f64> {
                    match pairing {
                        PairingMode::PerRealization => s
                            .per_realization
                            .iter()
                            .map(|r| match metric {
                                PairedMetric::AvgOfAvg => r.avg_of_avg,
                                PairedMetric::AvgOfMin => r.avg_of_min,
                            })
                            .collect(),
                        PairingMode::PerDay => s
                            .per_realization
                            .iter()
                            .flat_map(|r| {
                                r.days.iter().map(|d| match metric {
                                    PairedMetric::AvgOfAvg => d.avg,
                                    PairedMetric::AvgOfMin => d.min,
                                })
                            })
                            .collect(),
                    }
                };
                let result = wilcoxon_signed_rank(&collect(a), &collect(b))?;
                pairwise.push(PairwiseTest {
                    method_a: a.method,
                    method_b: b.method,
                    metric,
                    statistic: result.statistic,
                    p_value: result.p_value,
                });
            }
        }
    }
    Ok(MetricsReport {
        summaries,
        pairwise,
    })
}

/// Outcome of a Wilcoxon signed-rank test.
#[derive(Debug, Clone, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Sum of ranks of negative differences.
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`, the reported statistic.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    /// True when the exact enumeration path was taken.
    pub exact: bool,
    /// All differences were zero; `p_value` is 1 by convention.
    pub degenerate: bool,
}

/// Exact enumeration is used up to this many non-zero differences; beyond it
/// the normal approximation with tie and continuity corrections applies.
pub const WILCOXON_EXACT_MAX_N: usize = 20;

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped, tied absolute differences receive mid-ranks,
/// and for `n <= 20` the p-value is computed by enumerating all `2^n` sign
/// assignments of the observed ranks.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            n_effective: 0,
            exact: true,
            degenerate: true,
        });
    }

    // Rank |d| ascending with mid-ranks for ties. Ranks are kept doubled so
    // they stay integers and the enumeration compares exactly.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().total_cmp(&diffs[j].abs()));
    let mut ranks2 = vec![0u64; n];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && diffs[order[j]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i+1 ..= j hold the same |d|; mid-rank doubled = (i+1 + j).
        let rank2 = (i + 1 + j) as u64;
        for &idx in &order[i..j] {
            ranks2[idx] = rank2;
        }
        tie_sizes.push(j - i);
        i = j;
    }

    let mut w_plus2: u64 = 0;
    let mut w_minus2: u64 = 0;
    for (d, &r2) in diffs.iter().zip(&ranks2) {
        if *d > 0.0 {
            w_plus2 += r2;
        } else {
            w_minus2 += r2;
        }
    }
    let w2 = w_plus2.min(w_minus2);
    let total2: u64 = ranks2.iter().sum();

    let (p_value, exact) = if n <= WILCOXON_EXACT_MAX_N {
        // Count sign assignments at least as extreme on either side.
        let mut low = 0u64;
        let mut high = 0u64;
        for mask in 0u64..(1u64 << n) {
            let mut wp2 = 0u64;
            for (bit, &r2) in ranks2.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    wp2 += r2;
                }
            }
            if wp2 <= w2 {
                low += 1;
            }
            if wp2 >= total2 - w2 {
                high += 1;
            }
        }
        let p = (low + high) as f64 / (1u64 << n) as f64;
        (p.min(1.0), true)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_sizes
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let w = w2 as f64 / 2.0;
        // Continuity correction pulls the statistic half a unit toward the mean.
        let z = ((w - mean + 0.5) / var.sqrt()).min(0.0);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        ((2.0 * normal.cdf(z)).min(1.0), false)
    };

    Ok(WilcoxonResult {
        w_plus: w_plus2 as f64 / 2.0,
        w_minus: w_minus2 as f64 / 2.0,
        statistic: w2 as f64 / 2.0,
        p_value,
        n_effective: n,
        exact,
        degenerate: false,
    })
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> MetricsError + '_ {
    move |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write the long-form time-series CSV: `method,realization,t,accuracy`.
pub fn write_series_csv(all_series: &[AccuracySeries], path: &Path) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let inner = |w: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(w, "method,realization,t,accuracy")?;
        for series in all_series {
            for (t, acc) in &series.per_step {
                writeln!(w, "{},{},{t},{acc}", series.method, series.realization)?;
            }
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err(path))
}

/// Read a CSV written by [`write_series_csv`].
pub fn read_series_csv(path: &Path) -> Result<Vec<AccuracySeries>, MetricsError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let bad_row = |line: usize, message: String| MetricsError::MalformedRow {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(header))) if header == "method,realization,t,accuracy" => {}
        Some((_, Ok(header))) => {
            return Err(bad_row(1, format!("unexpected header `{header}`")));
        }
        Some((_, Err(e))) => return Err(io_err(path)(e)),
        None => return Err(bad_row(1, "missing header".into())),
    }
    let mut ordered: Vec<(MethodKind, usize)> = Vec::new();
    let mut collected: BTreeMap<(MethodKind, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad_row(
                line_no,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let method: MethodKind = fields[0]
            .parse()
            .map_err(|_| bad_row(line_no, format!("unknown method `{}`", fields[0])))?;
        let realization: usize = fields[1]
            .parse()
            .map_err(|e| bad_row(line_no, format!("bad realization: {e}")))?;
        let t: usize = fields[2]
            .parse()
            .map_err(|e| bad_row(line_no, format!("bad time step: {e}")))?;
        let accuracy: f64 = fields[3]
            .parse()
            .map_err(|e| bad_row(line_no, format!("bad accuracy: {e}")))?;
        let key = (method, realization);
        if !collected.contains_key(&key) {
            ordered.push(key);
        }
        collected.entry(key).or_default().push((t, accuracy));
    }
    Ok(ordered
        .into_iter()
        .map(|key| AccuracySeries {
            method: key.0,
            realization: key.1,
            per_step: collected.remove(&key).unwrap(),
        })
        .collect())
}

fn fmt_opt(std: Option<f64>) -> String {
    std.map(|s| s.to_string()).unwrap_or_default()
}

/// Write the summary CSV:
/// `method,avg_of_avg_mean,avg_of_avg_std,avg_of_min_mean,avg_of_min_std`.
pub fn write_summary_csv(report: &MetricsReport, path: &Path) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let inner = |w: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(
            w,
            "method,avg_of_avg_mean,avg_of_avg_std,avg_of_min_mean,avg_of_min_std"
        )?;
        for s in &report.summaries {
            writeln!(
                w,
                "{},{},{},{},{}",
                s.method,
                s.avg_of_avg.mean,
                fmt_opt(s.avg_of_avg.std),
                s.avg_of_min.mean,
                fmt_opt(s.avg_of_min.std)
            )?;
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err(path))
}

/// Write the pairwise-test CSV: `method_a,method_b,metric,W,p`.
pub fn write_pairwise_csv(report: &MetricsReport, path: &Path) -> Result<(), MetricsError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let inner = |w: &mut BufWriter<File>| -> io::Result<()> {
        writeln!(w, "method_a,method_b,metric,W,p")?;
        for t in &report.pairwise {
            writeln!(
                w,
                "{},{},{},{},{}",
                t.method_a,
                t.method_b,
                t.metric.name(),
                t.statistic,
                t.p_value
            )?;
        }
        w.flush()
    };
    inner(&mut w).map_err(io_err(path))
}
