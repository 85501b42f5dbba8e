use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::LogDensity;
use crate::error::{BmaError, Result};
use crate::rng::rng_from_seed;

/// Energy error beyond which a trajectory is declared divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NutsConfig {
    pub warmup: usize,
    pub n_draws: usize,
    pub thin: usize,
    pub max_depth: usize,
    pub target_accept: f64,
    /// Skips the step-size search when set.
    pub init_step_size: Option<f64>,
}

impl Default for NutsConfig {
    fn default() -> Self {
        Self {
            warmup: 1000,
            n_draws: 200,
            thin: 20,
            max_depth: 10,
            target_accept: 0.8,
            init_step_size: None,
        }
    }
}

impl NutsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 || self.n_draws < self.thin {
            return Err(BmaError::Validation(format!(
                "need n_draws >= thin >= 1, got n_draws={} thin={}",
                self.n_draws, self.thin
            )));
        }
        if !self.n_draws.is_multiple_of(self.thin) {
            return Err(BmaError::Validation(format!(
                "n_draws={} is not divisible by thin={}",
                self.n_draws, self.thin
            )));
        }
        if self.max_depth == 0 {
            return Err(BmaError::Validation("max_depth must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(BmaError::Validation("target_accept must lie in (0, 1)".into()));
        }
        if let Some(e) = self.init_step_size {
            if !(e > 0.0 && e.is_finite()) {
                return Err(BmaError::Validation("init_step_size must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NutsOutput {
    /// Every `thin`-th post-warm-up draw; `n_draws / thin` of them.
    pub samples: Vec<Vec<f64>>,
    /// All post-warm-up draws.
    pub draws: Vec<Vec<f64>>,
    pub step_size: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept: f64,
    pub n_leapfrog: usize,
}

/// A point in phase space with its cached log density and gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Phase {
    pub fn new<D: LogDensity>(target: &D, q: Vec<f64>, p: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_and_grad(&q, &mut grad);
        Self { q, p, grad, logp }
    }

    pub fn hamiltonian(&self) -> f64 {
        -self.logp + 0.5 * self.p.iter().map(|v| v * v).sum::<f64>()
    }

    fn is_finite(&self) -> bool {
        self.logp.is_finite() && self.q.iter().chain(&self.p).chain(&self.grad).all(|v| v.is_finite())
    }
}

/// One velocity-Verlet step with identity mass matrix. A negative `step`
/// integrates backwards in time.
pub fn leapfrog<D: LogDensity>(target: &D, z: &Phase, step: f64) -> Phase {
    let half = 0.5 * step;
    let mut p: Vec<f64> = z.p.iter().zip(&z.grad).map(|(p, g)| p + half * g).collect();
    let q: Vec<f64> = z.q.iter().zip(&p).map(|(q, p)| q + step * p).collect();
    let mut grad = vec![0.0; q.len()];
    let logp = target.log_density_and_grad(&q, &mut grad);
    for (pi, g) in p.iter_mut().zip(&grad) {
        *pi += half * g;
    }
    Phase { q, p, grad, logp }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Generalized no-U-turn condition on a momentum sum `rho`.
fn no_u_turn(p_minus: &[f64], p_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_minus, rho) > 0.0 && dot(p_plus, rho) > 0.0
}

struct Tree {
    minus: Phase,
    plus: Phase,
    rho: Vec<f64>,
    log_w: f64,
    sample: Phase,
}

#[derive(Default)]
struct Stats {
    sum_accept: f64,
    n_leapfrog: usize,
    divergent: bool,
}

/// Criterion for merging `a` (earlier in time) with `b` (later), including
/// the checks across the seam between the two subtrees.
fn merged_ok(a: &Tree, b: &Tree, rho: &[f64]) -> bool {
    no_u_turn(&a.minus.p, &b.plus.p, rho)
        && no_u_turn(&a.minus.p, &b.minus.p, &add(&a.rho, &b.minus.p))
        && no_u_turn(&a.plus.p, &b.plus.p, &add(&b.rho, &a.plus.p))
}

struct Sampler<'a, D> {
    target: &'a D,
    rng: ChaCha8Rng,
}

impl<D: LogDensity> Sampler<'_, D> {
    /// Builds a subtree of `2^depth` leapfrog steps from `start` in the
    /// direction of `step`'s sign. Returns `None` when the subtree diverged
    /// or contains a U-turn.
    fn build(&mut self, start: &Phase, step: f64, depth: usize, h0: f64, stats: &mut Stats) -> Option<Tree> {
        if depth == 0 {
            let z = leapfrog(self.target, start, step);
            stats.n_leapfrog += 1;
            let h = z.hamiltonian();
            if !z.is_finite() || !h.is_finite() || h - h0 > DIVERGENCE_THRESHOLD {
                stats.divergent = true;
                return None;
            }
            stats.sum_accept += (h0 - h).exp().min(1.0);
            return Some(Tree {
                rho: z.p.clone(),
                log_w: h0 - h,
                minus: z.clone(),
                plus: z.clone(),
                sample: z,
            });
        }
        let first = self.build(start, step, depth - 1, h0, stats)?;
        let edge = if step > 0.0 { &first.plus } else { &first.minus };
        let second = self.build(&edge.clone(), step, depth - 1, h0, stats)?;
        let log_w = log_add_exp(first.log_w, second.log_w);
        let take_second = self.rng.random::<f64>().ln() < second.log_w - log_w;
        let (a, b) = if step > 0.0 { (first, second) } else { (second, first) };
        let rho = add(&a.rho, &b.rho);
        if !merged_ok(&a, &b, &rho) {
            return None;
        }
        let later_is_second = step > 0.0;
        let sample = match (take_second, later_is_second) {
            (true, true) | (false, false) => b.sample,
            _ => a.sample,
        };
        Some(Tree {
            minus: a.minus,
            plus: b.plus,
            rho,
            log_w,
            sample,
        })
    }

    /// One NUTS transition from `z0`; returns the new point and its stats.
    fn transition(&mut self, z0: &Phase, eps: f64, max_depth: usize) -> (Phase, Stats) {
        let p: Vec<f64> = (0..z0.q.len()).map(|_| self.rng.sample(StandardNormal)).collect();
        let start = Phase { p, ..z0.clone() };
        let h0 = start.hamiltonian();
        let mut tree = Tree {
            minus: start.clone(),
            plus: start.clone(),
            rho: start.p.clone(),
            log_w: 0.0,
            sample: start,
        };
        let mut stats = Stats::default();
        for depth in 0..max_depth {
            let forward = self.rng.random::<bool>();
            let step = if forward { eps } else { -eps };
            let edge = if forward { tree.plus.clone() } else { tree.minus.clone() };
            let Some(sub) = self.build(&edge, step, depth, h0, &mut stats) else {
                break;
            };
            // Biased progressive sampling favors the new subtree.
            if self.rng.random::<f64>().ln() < sub.log_w - tree.log_w {
                tree.sample = sub.sample.clone();
            }
            let (a, b) = if forward { (tree, sub) } else { (sub, tree) };
            let rho = add(&a.rho, &b.rho);
            let ok = merged_ok(&a, &b, &rho);
            let sample = if forward { a.sample } else { b.sample };
            tree = Tree {
                log_w: log_add_exp(a.log_w, b.log_w),
                minus: a.minus,
                plus: b.plus,
                rho,
                sample,
            };
            if !ok {
                break;
            }
        }
        (tree.sample, stats)
    }

    /// Doubles or halves the step until one leapfrog step's acceptance
    /// probability crosses 0.8.
    fn initial_step_size(&mut self, z0: &Phase) -> Result<f64> {
        let log_target = 0.8f64.ln();
        let mut eps = 1.0;
        let mut direction = 0.0;
        for _ in 0..100 {
            let p: Vec<f64> = (0..z0.q.len()).map(|_| self.rng.sample(StandardNormal)).collect();
            let start = Phase { p, ..z0.clone() };
            let z = leapfrog(self.target, &start, eps);
            let mut delta = start.hamiltonian() - z.hamiltonian();
            if !delta.is_finite() {
                delta = f64::NEG_INFINITY;
            }
            if direction == 0.0 {
                direction = if delta > log_target { 1.0 } else { -1.0 };
            }
            if (direction > 0.0 && delta <= log_target) || (direction < 0.0 && delta >= log_target) {
                return Ok(eps);
            }
            eps = if direction > 0.0 { eps * 2.0 } else { eps * 0.5 };
            if !(1e-12..=1e7).contains(&eps) {
                break;
            }
        }
        Err(BmaError::Convergence {
            message: "could not find a usable initial step size".into(),
            diagnostics: format!("last step size {eps:e}"),
        })
    }
}

/// Dual-averaging step-size adaptation.
struct DualAveraging {
    mu: f64,
    target: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            target,
            s_bar: 0.0,
            x_bar: 0.0,
            counter: 0.0,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Runs one NUTS chain from `init`: `warmup` adaptation transitions, then
/// `n_draws` draws of which every `thin`-th is returned. Deterministic given
/// `seed`.
pub fn nuts_sample<D: LogDensity>(target: &D, init: &[f64], cfg: &NutsConfig, seed: u64) -> Result<NutsOutput> {
    cfg.validate()?;
    if init.len() != target.dim() {
        return Err(BmaError::Dimension(format!(
            "initial point has {} entries, target dimension is {}",
            init.len(),
            target.dim()
        )));
    }
    let mut z = Phase::new(target, init.to_vec(), vec![0.0; init.len()]);
    if !z.is_finite() {
        return Err(BmaError::numerical("log target is not finite at the initial point"));
    }
    let mut sampler = Sampler {
        target,
        rng: rng_from_seed(seed),
    };
    let mut eps = match cfg.init_step_size {
        Some(e) => e,
        None => sampler.initial_step_size(&z)?,
    };
    let mut adapt = DualAveraging::new(eps, cfg.target_accept);
    let mut warmup_divergences = 0;
    let mut n_leapfrog = 0;
    for _ in 0..cfg.warmup {
        let (next, stats) = sampler.transition(&z, eps, cfg.max_depth);
        z = next;
        n_leapfrog += stats.n_leapfrog;
        warmup_divergences += usize::from(stats.divergent);
        let accept = if stats.n_leapfrog > 0 {
            stats.sum_accept / stats.n_leapfrog as f64
        } else {
            0.0
        };
        eps = adapt.update(accept);
    }
    if cfg.warmup > 0 {
        if warmup_divergences == cfg.warmup {
            return Err(BmaError::Convergence {
                message: "every warm-up transition diverged".into(),
                diagnostics: format!("warmup={} final step size {:e}", cfg.warmup, eps),
            });
        }
        eps = adapt.final_step();
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(BmaError::Convergence {
            message: "step-size adaptation failed".into(),
            diagnostics: format!("step size {eps}"),
        });
    }
    let mut draws = Vec::with_capacity(cfg.n_draws);
    let mut divergences = 0;
    let mut accept_total = 0.0;
    for _ in 0..cfg.n_draws {
        let (next, stats) = sampler.transition(&z, eps, cfg.max_depth);
        z = next;
        n_leapfrog += stats.n_leapfrog;
        divergences += usize::from(stats.divergent);
        if stats.n_leapfrog > 0 {
            accept_total += stats.sum_accept / stats.n_leapfrog as f64;
        }
        draws.push(z.q.clone());
    }
    let samples = draws
        .iter()
        .skip(cfg.thin - 1)
        .step_by(cfg.thin)
        .cloned()
        .collect();
    Ok(NutsOutput {
        samples,
        draws,
        step_size: eps,
        divergences,
        warmup_divergences,
        mean_accept: accept_total / cfg.n_draws as f64,
        n_leapfrog,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coresets::Coreset;
    use crate::last_layer::LastLayerData;
    use crate::mcmc::{single_chain_diagnostics, HmcTarget};
    use crate::vi::PriorSpec;
    use ndarray::Array2;
    use statrs::distribution::{ContinuousCDF, Normal};

    /// Independent Gaussian with per-coordinate scales.
    struct Gaussian {
        scale: Vec<f64>,
    }

    impl LogDensity for Gaussian {
        fn dim(&self) -> usize {
            self.scale.len()
        }
        fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let mut lp = 0.0;
            for ((g, &xi), &s) in grad.iter_mut().zip(x).zip(&self.scale) {
                *g = -xi / (s * s);
                lp -= 0.5 * xi * xi / (s * s);
            }
            lp
        }
    }

    struct Flat(usize);

    impl LogDensity for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density_and_grad(&self, _: &[f64], grad: &mut [f64]) -> f64 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            0.0
        }
    }

    struct Nowhere;

    impl LogDensity for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn log_density_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            grad[0] = 0.0;
            if x[0] == 0.0 {
                0.0
            } else {
                f64::NAN
            }
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let t = Gaussian {
            scale: vec![1.0, 0.5, 2.0],
        };
        let z = Phase::new(&t, vec![0.3, -1.2, 2.0], vec![0.7, 0.1, -0.4]);
        let mut w = z.clone();
        for _ in 0..25 {
            w = leapfrog(&t, &w, 0.1);
        }
        w.p.iter_mut().for_each(|p| *p = -*p);
        for _ in 0..25 {
            w = leapfrog(&t, &w, 0.1);
        }
        for (a, b) in w.q.iter().zip(&z.q) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in w.p.iter().zip(&z.p) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_error_is_bounded() {
        let t = Gaussian { scale: vec![1.0] };
        let z0 = Phase::new(&t, vec![1.0], vec![0.0]);
        let mut z = z0.clone();
        for _ in 0..100 {
            z = leapfrog(&t, &z, 0.1);
        }
        assert!((z.hamiltonian() - z0.hamiltonian()).abs() < 1e-2);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            z = leapfrog(&t, &z, 0.1);
            worst = worst.max((z.hamiltonian() - z0.hamiltonian()).abs());
        }
        assert!(worst < 1e-2);
    }

    #[test]
    fn free_particle_moves_straight() {
        let z = Phase::new(&Flat(2), vec![1.0, 2.0], vec![0.5, -1.0]);
        let w = leapfrog(&Flat(2), &z, 0.3);
        assert_eq!(w.q, vec![1.0 + 0.3 * 0.5, 2.0 - 0.3]);
        assert_eq!(w.p, z.p);
    }

    #[test]
    fn standard_gaussian_moments() {
        let t = Gaussian { scale: vec![1.0; 10] };
        let cfg = NutsConfig {
            warmup: 1000,
            n_draws: 5000,
            thin: 1,
            ..NutsConfig::default()
        };
        let start = std::time::Instant::now();
        let out = nuts_sample(&t, &[0.5; 10], &cfg, 17).unwrap();
        assert!(start.elapsed().as_secs() < 60);
        let diag = single_chain_diagnostics(&out.draws).unwrap();
        let n = out.draws.len() as f64;
        for i in 0..10 {
            let ess = diag.ess[i];
            assert!(ess >= 200.0, "coordinate {i} ess {ess}");
            let mean = out.draws.iter().map(|d| d[i]).sum::<f64>() / n;
            let var = out.draws.iter().map(|d| (d[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 4.0 / ess.sqrt(), "mean {mean}");
            assert!((var - 1.0).abs() < 0.15, "var {var}");
        }
        assert_eq!(out.divergences, 0);
    }

    #[test]
    fn one_dimensional_gaussian_passes_ks() {
        let t = Gaussian { scale: vec![1.0] };
        let cfg = NutsConfig {
            warmup: 500,
            n_draws: 20_000,
            thin: 2,
            ..NutsConfig::default()
        };
        let out = nuts_sample(&t, &[0.0], &cfg, 5).unwrap();
        let mut xs: Vec<f64> = out.samples.iter().map(|s| s[0]).collect();
        assert_eq!(xs.len(), 10_000);
        xs.sort_by(f64::total_cmp);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = normal.cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic critical value at α = 0.01.
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }

    #[test]
    fn thinning_contract() {
        let t = Gaussian { scale: vec![1.0; 3] };
        let cfg = NutsConfig {
            warmup: 20,
            n_draws: 30,
            thin: 30,
            ..NutsConfig::default()
        };
        let out = nuts_sample(&t, &[0.0; 3], &cfg, 1).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0], out.draws[29]);
        assert!(out.samples[0].iter().all(|v| v.is_finite()));
        let bad = NutsConfig { n_draws: 31, ..cfg };
        assert!(matches!(nuts_sample(&t, &[0.0; 3], &bad, 1), Err(BmaError::Validation(_))));
        let bad = NutsConfig { thin: 0, ..cfg };
        assert!(nuts_sample(&t, &[0.0; 3], &bad, 1).is_err());
        assert!(nuts_sample(&t, &[0.0; 2], &cfg, 1).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let t = Gaussian { scale: vec![1.0, 3.0] };
        let cfg = NutsConfig {
            warmup: 50,
            n_draws: 40,
            thin: 4,
            ..NutsConfig::default()
        };
        let a = nuts_sample(&t, &[0.1, 0.2], &cfg, 9).unwrap();
        let b = nuts_sample(&t, &[0.1, 0.2], &cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = nuts_sample(&t, &[0.1, 0.2], &cfg, 10).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn all_divergent_warmup_is_a_convergence_failure() {
        let cfg = NutsConfig {
            warmup: 10,
            n_draws: 10,
            thin: 1,
            init_step_size: Some(0.5),
            ..NutsConfig::default()
        };
        assert!(matches!(
            nuts_sample(&Nowhere, &[0.0], &cfg, 0),
            Err(BmaError::Convergence { .. })
        ));
    }

    #[test]
    fn adaptation_hits_the_target_acceptance() {
        let t = Gaussian {
            scale: vec![0.1, 1.0, 5.0],
        };
        let cfg = NutsConfig {
            warmup: 1000,
            n_draws: 1000,
            thin: 1,
            ..NutsConfig::default()
        };
        let out = nuts_sample(&t, &[0.0; 3], &cfg, 3).unwrap();
        assert!((out.mean_accept - 0.8).abs() < 0.1, "{}", out.mean_accept);
    }

    fn logistic_chain_mean(target: &HmcTarget, init: &[f64], draws: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let cfg = NutsConfig {
            warmup: 500,
            n_draws: draws,
            thin: 1,
            ..NutsConfig::default()
        };
        let out = nuts_sample(target, init, &cfg, seed).unwrap();
        let diag = single_chain_diagnostics(&out.draws).unwrap();
        let n = draws as f64;
        let d = init.len();
        let mut mean = vec![0.0; d];
        let mut se = vec![0.0; d];
        for i in 0..d {
            mean[i] = out.draws.iter().map(|x| x[i]).sum::<f64>() / n;
            let var = out.draws.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0);
            se[i] = (var / diag.ess[i].max(1.0)).sqrt();
        }
        (mean, se)
    }

    #[test]
    fn logistic_posterior_mean_is_self_consistent() {
        let mut rng = crate::rng::rng_from_seed(2);
        let n = 40;
        let x = Array2::from_shape_fn((n, 1), |_| rng.random_range(-2.0f64..2.0));
        let y: Vec<usize> = (0..n)
            .map(|i| usize::from(rng.random::<f64>() < 1.0 / (1.0 + (-1.5 * x[[i, 0]]).exp())))
            .collect();
        let data = LastLayerData::new(x.view(), &y, 2).unwrap();
        let c = Coreset::full(n);
        let target = HmcTarget::new(&c, data, PriorSpec::default()).unwrap();
        let (m1, s1) = logistic_chain_mean(&target, &[0.0; 4], 1000, 1);
        let (m2, s2) = logistic_chain_mean(&target, &[0.0; 4], 10_000, 2);
        for i in 0..4 {
            let tol = 3.0 * (s1[i].powi(2) + s2[i].powi(2)).sqrt();
            assert!((m1[i] - m2[i]).abs() < tol, "coordinate {i}: {} vs {} (tol {tol})", m1[i], m2[i]);
        }
    }
}
