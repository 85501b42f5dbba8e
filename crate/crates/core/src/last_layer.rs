//! Softmax output layer evaluated on frozen backbone features.
//!
//! A last-layer parameter vector holds the `feature_dim × classes` weight
//! matrix (row-major) followed by the `classes` biases, the same layout the
//! output layer has inside a [`Network`](crate::nn::Network).

use ndarray::{Array2, ArrayView2};

use crate::error::{BmaError, Result};

/// Backbone features and labels of a dataset, viewed by the output layer.
#[derive(Clone, Copy, Debug)]
pub struct LastLayerData<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub classes: usize,
}

impl<'a> LastLayerData<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize], classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(BmaError::Dimension(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(BmaError::Validation(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of last-layer parameters, `(feature_dim + 1) · classes`.
    pub fn dim(&self) -> usize {
        param_dim(self.feature_dim(), self.classes)
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(BmaError::Dimension(format!(
                "last layer has {} parameters, got {}",
                self.dim(),
                theta.len()
            )));
        }
        Ok(())
    }

    fn log_probs_into(&self, theta: &[f64], n: usize, out: &mut [f64]) {
        logits_into(theta, self.features.row(n).iter().copied(), self.classes, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in out.iter_mut() {
            *v -= lse;
        }
    }

    /// `log softmax(θ·[x_n; 1])[y_n]`.
    pub fn datum_loglik(&self, theta: &[f64], n: usize, scratch: &mut [f64]) -> f64 {
        self.log_probs_into(theta, n, scratch);
        scratch[self.labels[n]]
    }

    /// Per-datum log-likelihoods for every example.
    pub fn loglik_rows(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mut scratch = vec![0.0; self.classes];
        Ok((0..self.len())
            .map(|n| self.datum_loglik(theta, n, &mut scratch))
            .collect())
    }

    /// `Σ w_n ℓ_n(θ)` over `(index, weight)` pairs, accumulating its gradient
    /// into `grad`.
    pub fn weighted_loglik_accumulate(
        &self,
        theta: &[f64],
        terms: impl IntoIterator<Item = (usize, f64)>,
        grad: &mut [f64],
    ) -> f64 {
        let f = self.feature_dim();
        let c = self.classes;
        let mut lp = vec![0.0; c];
        let mut total = 0.0;
        for (n, w) in terms {
            if w == 0.0 {
                continue;
            }
            self.log_probs_into(theta, n, &mut lp);
            let y = self.labels[n];
            total += w * lp[y];
            // d ℓ / d logits = onehot(y) - softmax
            for (k, v) in lp.iter_mut().enumerate() {
                let p = v.exp();
                *v = w * (if k == y { 1.0 } else { 0.0 } - p);
            }
            let x = self.features.row(n);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let g = &mut grad[i * c..(i + 1) * c];
                for (gk, &dk) in g.iter_mut().zip(&lp) {
                    *gk += xi * dk;
                }
            }
            for (gk, &dk) in grad[f * c..].iter_mut().zip(&lp) {
                *gk += dk;
            }
        }
        total
    }

    /// Unweighted log-likelihood over all examples and its gradient.
    pub fn loglik_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        let mut grad = vec![0.0; self.dim()];
        let value = self.weighted_loglik_accumulate(theta, (0..self.len()).map(|n| (n, 1.0)), &mut grad);
        Ok((value, grad))
    }
}

pub fn param_dim(feature_dim: usize, classes: usize) -> usize {
    (feature_dim + 1) * classes
}

fn logits_into(theta: &[f64], x: impl Iterator<Item = f64>, classes: usize, out: &mut [f64]) {
    let f = theta.len() / classes - 1;
    out.copy_from_slice(&theta[f * classes..]);
    for (i, xi) in x.enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(&theta[i * classes..(i + 1) * classes]) {
            *o += xi * w;
        }
    }
}

/// Softmax class probabilities of the output layer `theta` on `features`.
pub fn predict(theta: &[f64], features: ArrayView2<f64>, classes: usize) -> Result<Array2<f64>> {
    if theta.len() != param_dim(features.ncols(), classes) {
        return Err(BmaError::Dimension(format!(
            "last layer of length {} does not fit {} features and {classes} classes",
            theta.len(),
            features.ncols()
        )));
    }
    let mut out = Array2::zeros((features.nrows(), classes));
    for (row, mut o) in features.outer_iter().zip(out.outer_iter_mut()) {
        let o = o.as_slice_mut().expect("contiguous");
        logits_into(theta, row.iter().copied(), classes, o);
        let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in o.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}
