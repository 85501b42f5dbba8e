//! Mean-field Gaussian variational inference over the softmax output layer,
//! with the backbone frozen at its SGD solution.

use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, Tensor, POSTERIOR_MAGIC};
use crate::error::{BmaError, Result};
use crate::last_layer::LastLayerData;
use crate::rng::rng_from_seed;

/// Isotropic Gaussian prior `N(0, std² I)` over last-layer parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { std: 1.0 }
    }
}

impl PriorSpec {
    pub fn new(std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(BmaError::Validation(format!("prior std must be positive, got {std}")));
        }
        Ok(Self { std })
    }

    /// Normalized log density and its gradient `-θ / std²`.
    pub fn log_density_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let var = self.std * self.std;
        let d = theta.len() as f64;
        let mut sq = 0.0;
        for (g, &t) in grad.iter_mut().zip(theta) {
            sq += t * t;
            *g = -t / var;
        }
        -0.5 * sq / var - d * (self.std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(BmaError::Dimension(format!(
                "mean has {} entries, log_std {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(BmaError::numerical("non-finite posterior parameter"));
        }
        Ok(Self { mean, log_std })
    }

    /// Centered on `mean` with a shared initial standard deviation.
    pub fn around(mean: Vec<f64>, std: f64) -> Result<Self> {
        let log_std = vec![std.ln(); mean.len()];
        Self::new(mean, log_std)
    }

    /// The prior itself, as a variational distribution.
    pub fn from_prior(prior: &PriorSpec, dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_std: vec![prior.std.ln(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    /// Rounds every parameter to the 32-bit precision it is persisted in.
    pub fn to_f32_precision(&self) -> Self {
        let round = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
        Self {
            mean: round(&self.mean),
            log_std: round(&self.log_std),
        }
    }

    pub fn to_container(&self) -> Container {
        let f = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        Container {
            magic: POSTERIOR_MAGIC,
            tensors: vec![Tensor::vector(f(&self.mean)), Tensor::vector(f(&self.log_std))],
            span: 0..self.dim() as u64,
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.magic != POSTERIOR_MAGIC || c.tensors.len() != 2 {
            return Err(BmaError::Format("expected mean and log_std tensors".into()));
        }
        let widen = |t: &Tensor| t.data.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        Self::new(widen(&c.tensors[0]), widen(&c.tensors[1]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, POSTERIOR_MAGIC)?)
    }
}

/// `KL(q ‖ prior) = Σ_i [ln(s/σ_i) + (σ_i² + μ_i²)/(2s²) − 1/2]`.
pub fn kl_divergence(q: &GaussianPosterior, prior: &PriorSpec) -> f64 {
    let var = prior.std * prior.std;
    q.mean
        .iter()
        .zip(&q.log_std)
        .map(|(&m, &ls)| prior.std.ln() - ls + ((2.0 * ls).exp() + m * m) / (2.0 * var) - 0.5)
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub expected_loglik: f64,
    pub kl: f64,
    pub grad_mean: Vec<f64>,
    pub grad_log_std: Vec<f64>,
}

/// ELBO estimate and reparameterization gradient for fixed standard-normal
/// draws `noise` (one vector per Monte-Carlo sample).
///
/// The batch log-likelihood is rescaled by `full_n / batch.len()` so the
/// estimate is unbiased for the full-data ELBO.
pub fn elbo_with_noise(
    q: &GaussianPosterior,
    prior: &PriorSpec,
    batch: &LastLayerData,
    full_n: usize,
    noise: &[Vec<f64>],
) -> Result<ElboEstimate> {
    if noise.is_empty() {
        return Err(BmaError::Validation("need at least one Monte-Carlo sample".into()));
    }
    if batch.is_empty() {
        return Err(BmaError::Validation("empty batch".into()));
    }
    batch.check_theta(&q.mean)?;
    let d = q.dim();
    let std = q.std();
    let scale = full_n as f64 / batch.len() as f64 / noise.len() as f64;
    let mut grad_mean = vec![0.0; d];
    let mut grad_log_std = vec![0.0; d];
    let mut theta = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut expected = 0.0;
    for eps in noise {
        if eps.len() != d {
            return Err(BmaError::Dimension(format!(
                "noise of length {} for a {d}-dimensional posterior",
                eps.len()
            )));
        }
        for i in 0..d {
            theta[i] = q.mean[i] + std[i] * eps[i];
        }
        g.iter_mut().for_each(|v| *v = 0.0);
        let ll = batch.weighted_loglik_accumulate(&theta, (0..batch.len()).map(|n| (n, 1.0)), &mut g);
        expected += scale * ll;
        for i in 0..d {
            grad_mean[i] += scale * g[i];
            grad_log_std[i] += scale * g[i] * eps[i] * std[i];
        }
    }
    let var = prior.std * prior.std;
    for i in 0..d {
        grad_mean[i] -= q.mean[i] / var;
        grad_log_std[i] -= std[i] * std[i] / var - 1.0;
    }
    let kl = kl_divergence(q, prior);
    Ok(ElboEstimate {
        value: expected - kl,
        expected_loglik: expected,
        kl,
        grad_mean,
        grad_log_std,
    })
}

pub fn draw_noise<R: Rng>(rng: &mut R, n_mc: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n_mc)
        .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Single-batch ELBO estimate with `n_mc` fresh reparameterization draws.
pub fn elbo_and_grad<R: Rng>(
    q: &GaussianPosterior,
    prior: &PriorSpec,
    batch: &LastLayerData,
    n_mc: usize,
    full_n: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if n_mc == 0 {
        return Err(BmaError::Validation("n_mc must be >= 1".into()));
    }
    let noise = draw_noise(rng, n_mc, q.dim());
    elbo_with_noise(q, prior, batch, full_n, &noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViConfig {
    pub steps: usize,
    pub rate: f64,
    pub batch_size: usize,
    pub n_mc: usize,
    /// Initial posterior standard deviation around the SGD weights.
    pub init_std: f64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            rate: 1e-3,
            batch_size: 128,
            n_mc: 1,
            init_std: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ViTrace {
    pub elbo: Vec<f64>,
}

/// Stochastic gradient ascent on the ELBO, starting from `N(init_mean, init_std²)`.
///
/// Each step moves the parameters by `rate · ∇ELBO / N`, the gradient of the
/// per-example ELBO, so the step size does not scale with the dataset size.
/// Deterministic given `seed`.
pub fn fit_vi(
    data: &LastLayerData,
    init_mean: &[f64],
    prior: &PriorSpec,
    cfg: &ViConfig,
    seed: u64,
) -> Result<(GaussianPosterior, ViTrace)> {
    if cfg.steps == 0 {
        return Err(BmaError::Validation("VI needs at least one step".into()));
    }
    if cfg.batch_size == 0 || cfg.n_mc == 0 {
        return Err(BmaError::Validation("batch_size and n_mc must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(BmaError::Validation("empty dataset".into()));
    }
    data.check_theta(init_mean)?;
    let n = data.len();
    let mut q = GaussianPosterior::around(init_mean.to_vec(), cfg.init_std)?;
    let mut rng = rng_from_seed(seed);
    let mut trace = ViTrace {
        elbo: Vec::with_capacity(cfg.steps),
    };
    let full_batch = cfg.batch_size >= n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let step_scale = cfg.rate / n as f64;
    for step in 0..cfg.steps {
        let est = if full_batch {
            elbo_and_grad(&q, prior, data, cfg.n_mc, n, &mut rng)?
        } else {
            if cursor + cfg.batch_size > n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..cursor + cfg.batch_size];
            cursor += cfg.batch_size;
            let feats = data.features.select(Axis(0), idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let batch = LastLayerData::new(feats.view(), &labels, data.classes)?;
            elbo_and_grad(&q, prior, &batch, cfg.n_mc, n, &mut rng)?
        };
        if !est.value.is_finite() {
            return Err(BmaError::numerical_at("ELBO diverged", step));
        }
        trace.elbo.push(est.value);
        for i in 0..q.dim() {
            q.mean[i] += step_scale * est.grad_mean[i];
            q.log_std[i] += step_scale * est.grad_log_std[i];
        }
        if q.mean.iter().chain(&q.log_std).any(|v| !v.is_finite()) {
            return Err(BmaError::numerical_at("variational parameters diverged", step));
        }
    }
    Ok((q, trace))
}

/// `k` i.i.d. draws `mean + std ⊙ ε`; deterministic given `seed`.
pub fn sample_last_layer(q: &GaussianPosterior, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(BmaError::Validation("need at least one sample".into()));
    }
    let mut rng = rng_from_seed(seed);
    let std = q.std();
    Ok((0..k)
        .map(|_| {
            q.mean
                .iter()
                .zip(&std)
                .map(|(&m, &s)| {
                    let e: f64 = rng.sample(StandardNormal);
                    m + s * e
                })
                .collect()
        })
        .collect())
}
