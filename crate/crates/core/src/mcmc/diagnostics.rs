use serde::{Deserialize, Serialize};

use crate::error::{BmaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub r_hat: Vec<f64>,
    pub ess: Vec<f64>,
    /// Coordinates with zero within-chain variance; reported with R̂ = 1 and
    /// ESS = 0.
    pub degenerate: Vec<usize>,
}

impl ChainDiagnostics {
    pub fn max_r_hat(&self) -> f64 {
        self.r_hat.iter().copied().fold(f64::NAN, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::NAN, f64::min)
    }
}

/// Split-R̂ and multi-chain effective sample size per coordinate.
///
/// `chains[c][t][i]` is coordinate `i` of draw `t` in chain `c`. Requires at
/// least two chains of equal length with at least ten draws each.
pub fn chain_diagnostics(chains: &[Vec<Vec<f64>>]) -> Result<ChainDiagnostics> {
    if chains.len() < 2 {
        return Err(BmaError::Validation("R-hat needs at least two chains".into()));
    }
    diagnose(chains)
}

/// Diagnostics of one chain, whose halves serve as the split chains.
pub fn single_chain_diagnostics(draws: &[Vec<f64>]) -> Result<ChainDiagnostics> {
    diagnose(std::slice::from_ref(&draws.to_vec()))
}

fn diagnose(chains: &[Vec<Vec<f64>>]) -> Result<ChainDiagnostics> {
    let n = chains[0].len();
    if n < 10 {
        return Err(BmaError::Validation(format!("chains need at least 10 draws, got {n}")));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(BmaError::Dimension("chains differ in length".into()));
    }
    let d = chains[0][0].len();
    if chains.iter().flatten().any(|x| x.len() != d) {
        return Err(BmaError::Dimension("draws differ in dimension".into()));
    }
    let half = n / 2;
    let mut r_hat = Vec::with_capacity(d);
    let mut ess = Vec::with_capacity(d);
    let mut degenerate = Vec::new();
    for i in 0..d {
        // Split every chain into its first and last `half` draws.
        let split: Vec<Vec<f64>> = chains
            .iter()
            .flat_map(|c| [c[..half].iter().map(|x| x[i]).collect(), c[n - half..].iter().map(|x| x[i]).collect()])
            .collect();
        match coordinate(&split) {
            Some((r, e)) => {
                r_hat.push(r);
                ess.push(e);
            }
            None => {
                log::warn!("coordinate {i} has zero within-chain variance");
                degenerate.push(i);
                r_hat.push(1.0);
                ess.push(0.0);
            }
        }
    }
    Ok(ChainDiagnostics { r_hat, ess, degenerate })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Biased autocovariance at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|t| (x[t] - m) * (x[t + lag] - m)).sum::<f64>() / n as f64
}

/// `(R̂, ESS)` for one coordinate over split chains, or `None` when the
/// within-chain variance vanishes.
fn coordinate(chains: &[Vec<f64>]) -> Option<(f64, f64)> {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let grand = mean(&means);
    let b_over_n = means.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let b_over_n = if chains.len() > 1 { b_over_n } else { 0.0 };
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    if !(w > 0.0) || !w.is_finite() {
        return None;
    }
    let var_plus = (nf - 1.0) / nf * w + b_over_n;
    let r_hat = (var_plus / w).sqrt();

    // Geyer's initial monotone sequence on the combined autocorrelation.
    let rho = |lag: usize| {
        let acov = chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).sum::<f64>() / m;
        1.0 - (w - acov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let total = m * nf;
    let tau = tau.max(1.0 / total.log10().max(1.0));
    Some((r_hat, total / tau))
}
