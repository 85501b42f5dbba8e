//! Brier score, accuracy, expected calibration error and multi-run
//! aggregation of metric curves.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{BmaError, Result};
use crate::nn::argmax;

pub const DEFAULT_ECE_BINS: usize = 15;
const ROW_SUM_TOL: f64 = 1e-6;

/// Predicted class probabilities paired with true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    probs: Array2<f64>,
    labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(probs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if probs.nrows() != labels.len() {
            return Err(BmaError::Dimension(format!(
                "{} probability rows but {} labels",
                probs.nrows(),
                labels.len()
            )));
        }
        let classes = probs.ncols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(BmaError::Validation(format!("label {bad} outside [0, {classes})")));
        }
        for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0 + ROW_SUM_TOL).contains(&p)) {
                return Err(BmaError::Validation(format!("row {i} has an entry outside [0, 1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(BmaError::Validation(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { probs, labels })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `(1/N) Σ_i Σ_c (y_ic − p_ic)²`, ranging over `[0, 2]`.
pub fn brier(ps: &PredictionSet) -> f64 {
    if ps.is_empty() {
        return 0.0;
    }
    let total: f64 = ps
        .probs
        .axis_iter(Axis(0))
        .zip(&ps.labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(c, &p)| {
                    let t = if c == y { 1.0 } else { 0.0 };
                    (t - p) * (t - p)
                })
                .sum::<f64>()
        })
        .sum();
    total / ps.len() as f64
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn accuracy(ps: &PredictionSet) -> f64 {
    if ps.is_empty() {
        return 0.0;
    }
    let correct = ps
        .probs
        .axis_iter(Axis(0))
        .zip(&ps.labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    correct as f64 / ps.len() as f64
}

/// Expected calibration error over `n_bins` equal-width, right-closed
/// confidence bins on (0, 1]; confidence is the max class probability.
pub fn ece(ps: &PredictionSet, n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(BmaError::Validation("ECE needs at least one bin".into()));
    }
    if ps.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    for (row, &y) in ps.probs.axis_iter(Axis(0)).zip(&ps.labels) {
        let pred = argmax(row.iter().copied());
        let conf = row[pred];
        let bin = ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[bin] += 1;
        conf_sum[bin] += conf;
        if pred == y {
            correct[bin] += 1;
        }
    }
    let n = ps.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n) * (correct[b] as f64 / m - conf_sum[b] / m).abs()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub brier: f64,
    pub accuracy: f64,
    pub ece: f64,
}

impl Scores {
    pub fn evaluate(ps: &PredictionSet, n_bins: usize) -> Result<Self> {
        Ok(Self {
            brier: brier(ps),
            accuracy: accuracy(ps),
            ece: ece(ps, n_bins)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Arithmetic mean and sample standard deviation (divisor `R − 1`, 0 when `R = 1`).
    pub fn of(values: &[f64]) -> Self {
        let r = values.len() as f64;
        let mean = values.iter().sum::<f64>() / r;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_models: usize,
    pub brier: Summary,
    pub accuracy: Summary,
    pub ece: Summary,
}

/// Mean ± one standard deviation of each metric against ensemble size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCurve {
    pub method: String,
    pub runs: usize,
    pub points: Vec<CurvePoint>,
}

/// Aggregates `per_run[r][k]`, the scores of run `r` at ensemble size `k + 1`.
pub fn aggregate_runs(method: &str, per_run: &[Vec<Scores>]) -> Result<MetricsCurve> {
    let first = per_run
        .first()
        .ok_or_else(|| BmaError::Validation("no runs to aggregate".into()))?;
    if per_run.iter().any(|r| r.len() != first.len()) {
        return Err(BmaError::Validation(
            "runs cover different ensemble sizes".into(),
        ));
    }
    let points = (0..first.len())
        .map(|k| {
            let column = |f: fn(&Scores) -> f64| -> Vec<f64> { per_run.iter().map(|r| f(&r[k])).collect() };
            CurvePoint {
                n_models: k + 1,
                brier: Summary::of(&column(|s| s.brier)),
                accuracy: Summary::of(&column(|s| s.accuracy)),
                ece: Summary::of(&column(|s| s.ece)),
            }
        })
        .collect();
    Ok(MetricsCurve {
        method: method.to_string(),
        runs: per_run.len(),
        points,
    })
}
