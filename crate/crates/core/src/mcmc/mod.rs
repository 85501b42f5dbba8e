//! No-U-Turn Hamiltonian Monte Carlo over last-layer weights, targeting the
//! prior times the coreset-weighted likelihood.

mod diagnostics;
mod nuts;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, Tensor, SAMPLES_MAGIC};
use crate::coresets::Coreset;
use crate::error::{BmaError, Result};
use crate::last_layer::LastLayerData;
use crate::vi::PriorSpec;

pub use diagnostics::{chain_diagnostics, single_chain_diagnostics, ChainDiagnostics};
pub use nuts::{leapfrog, nuts_sample, NutsConfig, NutsOutput, Phase};

/// A differentiable log density. Non-finite values are allowed and are
/// treated by the sampler as divergences.
pub trait LogDensity {
    fn dim(&self) -> usize;
    fn log_density_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// Prior times coreset-weighted softmax likelihood of the output layer.
#[derive(Clone, Debug)]
pub struct HmcTarget<'a> {
    pub coreset: &'a Coreset,
    pub data: LastLayerData<'a>,
    pub prior: PriorSpec,
}

impl<'a> HmcTarget<'a> {
    pub fn new(coreset: &'a Coreset, data: LastLayerData<'a>, prior: PriorSpec) -> Result<Self> {
        if let Some(&i) = coreset.indices.iter().find(|&&i| i >= data.len()) {
            return Err(BmaError::Validation(format!(
                "coreset index {i} outside a dataset of {}",
                data.len()
            )));
        }
        if coreset.indices.len() != coreset.weights.len() {
            return Err(BmaError::Dimension("coreset indices and weights differ in length".into()));
        }
        Ok(Self { coreset, data, prior })
    }
}

impl LogDensity for HmcTarget<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn log_density_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let lp = self.prior.log_density_and_grad(theta, grad);
        lp + self.data.weighted_loglik_accumulate(theta, self.coreset.entries(), grad)
    }
}

/// Checked evaluation of the target: dimension and finiteness are errors.
pub fn log_target_and_grad<D: LogDensity>(target: &D, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
    if theta.len() != target.dim() {
        return Err(BmaError::Dimension(format!(
            "target has dimension {}, got {}",
            target.dim(),
            theta.len()
        )));
    }
    let mut grad = vec![0.0; theta.len()];
    let v = target.log_density_and_grad(theta, &mut grad);
    if !v.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(BmaError::numerical("log target is not finite"));
    }
    Ok((v, grad))
}

/// Thinned last-layer samples of one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub samples: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn to_container(&self) -> Result<Container> {
        let d = self.samples.first().map_or(0, Vec::len);
        if self.samples.iter().any(|s| s.len() != d) {
            return Err(BmaError::Dimension("samples of unequal length".into()));
        }
        let data = self.samples.iter().flatten().map(|&v| v as f32).collect();
        Ok(Container {
            magic: SAMPLES_MAGIC,
            tensors: vec![Tensor::new(vec![self.samples.len(), d], data)?],
            span: 0..d as u64,
        })
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.magic != SAMPLES_MAGIC || c.tensors.len() != 1 || c.tensors[0].shape.len() != 2 {
            return Err(BmaError::Format("expected one K×D sample tensor".into()));
        }
        let t = &c.tensors[0];
        let d = t.shape[1];
        let samples = if d == 0 {
            vec![Vec::new(); t.shape[0]]
        } else {
            t.data.chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
        };
        Ok(Self { samples })
    }

    /// Rounds to the 32-bit precision the file stores.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| s.iter().map(|&v| v as f32 as f64).collect())
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, SAMPLES_MAGIC)?)
    }
}

/// Sidecar summary written next to a sample file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    pub step_size: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept: f64,
    pub r_hat: Vec<f64>,
    pub ess: Vec<f64>,
    pub degenerate: Vec<usize>,
    /// More than 10% of post-warm-up transitions diverged.
    pub failed: bool,
}

impl SamplerReport {
    pub fn new(out: &NutsOutput, diag: &ChainDiagnostics) -> Self {
        Self {
            step_size: out.step_size,
            divergences: out.divergences,
            warmup_divergences: out.warmup_divergences,
            mean_accept: out.mean_accept,
            r_hat: diag.r_hat.clone(),
            ess: diag.ess.clone(),
            degenerate: diag.degenerate.clone(),
            failed: out.divergences * 10 > out.draws.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use ndarray::Array2;
    use rand::Rng;

    fn toy(n: usize) -> (Array2<f64>, Vec<usize>) {
        let mut rng = rng_from_seed(1);
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
        let y = (0..n).map(|i| usize::from(x[[i, 0]] + 0.5 * x[[i, 1]] > 0.0)).collect();
        (x, y)
    }

    #[test]
    fn zero_weights_reduce_to_the_prior() {
        let (x, y) = toy(10);
        let data = LastLayerData::new(x.view(), &y, 2).unwrap();
        let c = Coreset {
            indices: vec![0, 3],
            weights: vec![0.0, 0.0],
            n: 10,
            n_star: 2,
        };
        let prior = PriorSpec::new(2.0).unwrap();
        let t = HmcTarget::new(&c, data, prior).unwrap();
        let theta = vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1];
        let (v, g) = log_target_and_grad(&t, &theta).unwrap();
        let mut pg = vec![0.0; 6];
        assert_eq!(v, prior.log_density_and_grad(&theta, &mut pg));
        assert_eq!(g, pg);
    }

    #[test]
    fn full_coreset_is_the_full_posterior() {
        let (x, y) = toy(25);
        let data = LastLayerData::new(x.view(), &y, 2).unwrap();
        let c = Coreset::full(25);
        let prior = PriorSpec::default();
        let t = HmcTarget::new(&c, data, prior).unwrap();
        let theta = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let (v, _) = log_target_and_grad(&t, &theta).unwrap();
        let mut pg = vec![0.0; 6];
        let expect = prior.log_density_and_grad(&theta, &mut pg) + data.loglik_and_grad(&theta).unwrap().0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn target_gradient_matches_differences() {
        let (x, y) = toy(15);
        let data = LastLayerData::new(x.view(), &y, 2).unwrap();
        let c = Coreset {
            indices: vec![1, 4, 7],
            weights: vec![3.0, 0.5, 2.0],
            n: 15,
            n_star: 3,
        };
        let t = HmcTarget::new(&c, data, PriorSpec::new(0.7).unwrap()).unwrap();
        let theta = vec![0.4, -1.1, 0.2, 0.9, -0.3, 0.05];
        let (_, g) = log_target_and_grad(&t, &theta).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut p = theta.clone();
            p[i] += h;
            let mut m = theta.clone();
            m[i] -= h;
            let fd = (log_target_and_grad(&t, &p).unwrap().0 - log_target_and_grad(&t, &m).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
        assert!(log_target_and_grad(&t, &theta[..5]).is_err());
        let bad = Coreset {
            indices: vec![20],
            weights: vec![1.0],
            n: 21,
            n_star: 1,
        };
        assert!(HmcTarget::new(&bad, data, PriorSpec::default()).is_err());
    }

    #[test]
    fn sample_file_round_trip() {
        let s = SampleSet {
            samples: vec![vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 1e-3]],
        };
        let bytes = s.to_container().unwrap().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MCS1");
        let back = SampleSet::from_container(Container::read_from(&mut bytes.as_slice(), SAMPLES_MAGIC).unwrap()).unwrap();
        assert_eq!(back, s.to_f32_precision());
    }
}
