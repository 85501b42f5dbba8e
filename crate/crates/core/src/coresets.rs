//! Bayesian coresets for the last-layer likelihood.
//!
//! Each datum's log-likelihood function is represented by its centered
//! evaluations at `S` draws from a weighting posterior π. Greedy iterative
//! geodesic ascent (GIGA) then picks a sparse nonnegative combination of those
//! vectors whose direction matches the full sum.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{BmaError, Result};
use crate::last_layer::LastLayerData;
use crate::vi::{sample_last_layer, GaussianPosterior};

/// Per-datum log-likelihood functions projected onto `S` posterior draws.
#[derive(Clone, Debug)]
pub struct ProjectedLikelihood {
    /// `N × S`; row `n` is `(ℓ_n(θ_s) − mean_s ℓ_n(θ_s)) / √S`.
    pub vectors: Array2<f64>,
    pub draw_seed: u64,
}

impl ProjectedLikelihood {
    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn s(&self) -> usize {
        self.vectors.ncols()
    }
}

pub fn project_loglik(
    data: &LastLayerData,
    pi: &GaussianPosterior,
    s: usize,
    seed: u64,
) -> Result<ProjectedLikelihood> {
    if s < 2 {
        return Err(BmaError::Validation(format!("projection needs S >= 2, got {s}")));
    }
    data.check_theta(&pi.mean)?;
    let draws = sample_last_layer(pi, s, seed)?;
    let mut vectors = Array2::<f64>::zeros((data.len(), s));
    let mut scratch = vec![0.0; data.classes];
    for (j, theta) in draws.iter().enumerate() {
        for n in 0..data.len() {
            let v = data.datum_loglik(theta, n, &mut scratch);
            if !v.is_finite() {
                return Err(BmaError::numerical(format!(
                    "log-likelihood of datum {n} is not finite at projection draw {j}"
                )));
            }
            vectors[[n, j]] = v;
        }
    }
    let scale = 1.0 / (s as f64).sqrt();
    for mut row in vectors.outer_iter_mut() {
        let mean = row.sum() / s as f64;
        row.mapv_inplace(|v| (v - mean) * scale);
    }
    Ok(ProjectedLikelihood {
        vectors,
        draw_seed: seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coreset {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub n: usize,
    pub n_star: usize,
}

impl Coreset {
    /// Every datum with weight one.
    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
            weights: vec![1.0; n],
            n,
            n_star: n,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.weights.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.weights.len() {
            return Err(BmaError::Dimension("coreset indices and weights differ in length".into()));
        }
        if self.indices.len() > self.n_star {
            return Err(BmaError::Validation(format!(
                "{} coreset points exceed the cap {}",
                self.indices.len(),
                self.n_star
            )));
        }
        if let Some(&i) = self.indices.iter().find(|&&i| i >= self.n) {
            return Err(BmaError::Validation(format!("coreset index {i} outside [0, {})", self.n)));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(BmaError::Validation("coreset weights must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Greedy run limits. The default allows up to four iterations per
/// permitted point since reselection refines weights without adding points.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GigaOptions {
    pub max_iters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GigaTrace {
    /// `‖L/‖L‖ − y‖` after each accepted iteration, where `y` is the unit
    /// direction of the current weighted sum.
    pub residuals: Vec<f64>,
}

/// GIGA coreset of at most `n_star` points. A budget covering every point
/// returns the full data set with unit weights, which is exact.
pub fn build_coreset(proj: &ProjectedLikelihood, n_star: usize) -> Result<Coreset> {
    if n_star >= proj.n() && proj.n() > 0 {
        return Ok(Coreset {
            n_star,
            ..Coreset::full(proj.n())
        });
    }
    giga(proj, n_star, GigaOptions::default()).map(|(c, _)| c)
}

fn dot(a: ArrayView1<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Greedy iterative geodesic ascent.
pub fn giga(proj: &ProjectedLikelihood, n_star: usize, opts: GigaOptions) -> Result<(Coreset, GigaTrace)> {
    if n_star == 0 {
        return Err(BmaError::Validation("coreset size cap must be >= 1".into()));
    }
    let u = &proj.vectors;
    let n = u.nrows();
    let sigma: Vec<f64> = u.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let max_sigma = sigma.iter().copied().fold(0.0, f64::max);
    if !max_sigma.is_finite() {
        return Err(BmaError::numerical("non-finite projection row"));
    }
    let usable: Vec<bool> = sigma.iter().map(|&s| s > 1e-12 * max_sigma && s > 0.0).collect();
    if !usable.iter().any(|&b| b) {
        return Err(BmaError::Degenerate("every projected log-likelihood has zero norm".into()));
    }
    let mut unit = u.to_owned();
    for (mut row, (&s, &ok)) in unit.outer_iter_mut().zip(sigma.iter().zip(&usable)) {
        if ok {
            row.mapv_inplace(|v| v / s);
        } else {
            row.fill(0.0);
        }
    }
    let total = u.sum_axis(Axis(0)).to_vec();
    let total_norm = norm(&total);
    if !(total_norm > 1e-12 * max_sigma) {
        return Err(BmaError::Degenerate("the summed log-likelihood vector is zero".into()));
    }
    let ell: Vec<f64> = total.iter().map(|v| v / total_norm).collect();
    let ell_dot: Vec<f64> = unit.outer_iter().map(|r| dot(r, &ell)).collect();

    let cap = n_star.min(n);
    let max_iters = opts.max_iters.unwrap_or(4 * cap);
    let s = proj.s();
    let mut w = vec![0.0; n];
    let mut selected = 0usize;
    let mut y = vec![0.0; s];
    let mut trace = GigaTrace { residuals: Vec::new() };
    let diff_norm = |y: &[f64]| norm(&ell.iter().zip(y).map(|(a, b)| a - b).collect::<Vec<_>>());

    for iter in 0..max_iters {
        let allow_new = selected < cap;
        let eligible = |m: usize| usable[m] && (allow_new || w[m] > 0.0);
        if iter == 0 {
            let mut best: Option<usize> = None;
            for m in (0..n).filter(|&m| eligible(m)) {
                if best.is_none_or(|b| ell_dot[m] > ell_dot[b]) {
                    best = Some(m);
                }
            }
            let b = best.expect("a usable row exists");
            w[b] = 1.0;
            selected = 1;
            y.copy_from_slice(unit.row(b).as_slice().expect("contiguous"));
            trace.residuals.push(diff_norm(&y));
            continue;
        }
        let ell_y = dot(ArrayView1::from(&ell[..]), &y);
        let r: Vec<f64> = ell.iter().zip(&y).map(|(a, b)| a - ell_y * b).collect();
        if norm(&r) < 1e-15 {
            break;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for m in (0..n).filter(|&m| eligible(m)) {
            let row = unit.row(m);
            let yd = dot(row, &y);
            let den = (1.0 - yd * yd).max(0.0).sqrt();
            if den < 1e-15 {
                continue;
            }
            let score = dot(row, &r) / den;
            if best.is_none_or(|(_, bs, _)| score > bs) {
                best = Some((m, score, yd));
            }
        }
        let Some((m, score, yd)) = best else { break };
        if !(score > 0.0) {
            break;
        }
        let a = ell_dot[m] - ell_y * yd;
        let b = ell_y - ell_dot[m] * yd;
        if !(a > 0.0) {
            break;
        }
        let gamma = if a + b > 0.0 { (a / (a + b)).clamp(0.0, 1.0) } else { 1.0 };
        let row = unit.row(m);
        let mut y_new: Vec<f64> = y.iter().zip(row.iter()).map(|(yi, li)| (1.0 - gamma) * yi + gamma * li).collect();
        let y_norm = norm(&y_new);
        if !(y_norm > 0.0) {
            break;
        }
        y_new.iter_mut().for_each(|v| *v /= y_norm);
        let new_align = dot(ArrayView1::from(&ell[..]), &y_new);
        if !(new_align > ell_y) {
            break;
        }
        for wi in w.iter_mut() {
            *wi *= (1.0 - gamma) / y_norm;
        }
        w[m] += gamma / y_norm;
        selected = w.iter().filter(|&&v| v > 0.0).count();
        y = y_new;
        trace.residuals.push(diff_norm(&y));
    }

    let ell_y = dot(ArrayView1::from(&ell[..]), &y);
    let scale = total_norm * ell_y;
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for m in 0..n {
        if w[m] > 0.0 {
            let v = w[m] * scale / sigma[m];
            if v > 0.0 && v.is_finite() {
                indices.push(m);
                weights.push(v);
            }
        }
    }
    if indices.is_empty() {
        return Err(BmaError::Degenerate("greedy selection produced no positive weight".into()));
    }
    let coreset = Coreset {
        indices,
        weights,
        n,
        n_star,
    };
    Ok((coreset, trace))
}

/// `‖L − Σ w_n u_n‖ / ‖L‖` in the projected space.
pub fn relative_residual(proj: &ProjectedLikelihood, coreset: &Coreset) -> f64 {
    let total = proj.vectors.sum_axis(Axis(0));
    let mut approx = ndarray::Array1::<f64>::zeros(proj.s());
    for (i, w) in coreset.entries() {
        approx.scaled_add(w, &proj.vectors.row(i));
    }
    let diff = &total - &approx;
    diff.dot(&diff).sqrt() / total.dot(&total).sqrt()
}

/// `Σ w_n ℓ_n(θ)` over the coreset and its gradient.
pub fn weighted_loglik_and_grad(
    coreset: &Coreset,
    data: &LastLayerData,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    data.check_theta(theta)?;
    if let Some(&i) = coreset.indices.iter().find(|&&i| i >= data.len()) {
        return Err(BmaError::Validation(format!(
            "coreset index {i} outside a dataset of {}",
            data.len()
        )));
    }
    let mut grad = vec![0.0; data.dim()];
    let value = data.weighted_loglik_accumulate(theta, coreset.entries(), &mut grad);
    Ok((value, grad))
}

/// `N_star` distinct indices drawn uniformly, each weighted `N / N_star`.
pub fn uniform_subset(n: usize, n_star: usize, seed: u64) -> Result<Coreset> {
    if n_star == 0 || n_star > n {
        return Err(BmaError::Validation(format!("cannot draw {n_star} of {n} points")));
    }
    let mut rng = crate::rng::rng_from_seed(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, n_star).into_vec();
    indices.sort_unstable();
    Ok(Coreset {
        indices,
        weights: vec![n as f64 / n_star as f64; n_star],
        n,
        n_star,
    })
}

/// Relative error of the coreset log-likelihood over posterior draws, up to
/// an additive constant: `‖(a − ā) − (f − f̄)‖ / ‖f − f̄‖`, where `f` and `a`
/// are the full and weighted log-likelihoods at each draw and bars are means
/// over the draws. Constants do not change the posterior and are invisible to
/// the centered projection.
pub fn approximation_error(data: &LastLayerData, coreset: &Coreset, draws: &[Vec<f64>]) -> Result<f64> {
    if draws.len() < 2 {
        return Err(BmaError::Validation("need at least two draws".into()));
    }
    let mut f = Vec::with_capacity(draws.len());
    let mut a = Vec::with_capacity(draws.len());
    for t in draws {
        f.push(data.loglik_and_grad(t)?.0);
        a.push(weighted_loglik_and_grad(coreset, data, t)?.0);
    }
    let k = draws.len() as f64;
    let fm = f.iter().sum::<f64>() / k;
    let am = a.iter().sum::<f64>() / k;
    let num = f.iter().zip(&a).map(|(x, y)| ((y - am) - (x - fm)).powi(2)).sum::<f64>().sqrt();
    let den = f.iter().map(|x| (x - fm).powi(2)).sum::<f64>().sqrt();
    if !(den > 0.0) {
        return Err(BmaError::Degenerate("full log-likelihood is constant over the draws".into()));
    }
    Ok(num / den)
}

/// On-disk coreset description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoresetFile {
    pub mode_id: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_star")]
    pub n_star: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub seed: u64,
    pub entries: Vec<(usize, f64)>,
}

impl CoresetFile {
    pub fn new(mode_id: impl Into<String>, coreset: &Coreset, s: usize, seed: u64) -> Self {
        Self {
            mode_id: mode_id.into(),
            n: coreset.n,
            n_star: coreset.n_star,
            s,
            seed,
            entries: coreset.entries().collect(),
        }
    }

    pub fn coreset(&self) -> Result<Coreset> {
        let c = Coreset {
            indices: self.entries.iter().map(|e| e.0).collect(),
            weights: self.entries.iter().map(|e| e.1).collect(),
            n: self.n,
            n_star: self.n_star,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| BmaError::Format(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| BmaError::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::vi::{fit_vi, PriorSpec, ViConfig};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn toy(n: usize, f: usize, c: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let centers = Array2::from_shape_fn((c, f), |_| 1.5 * rng.sample::<f64, _>(StandardNormal));
        let mut x = Array2::zeros((n, f));
        let mut y = vec![0; n];
        for i in 0..n {
            y[i] = rng.random_range(0..c);
            for j in 0..f {
                x[[i, j]] = centers[[y[i], j]] + rng.sample::<f64, _>(StandardNormal);
            }
        }
        (x, y)
    }

    fn random_proj(n: usize, s: usize, seed: u64) -> ProjectedLikelihood {
        let mut rng = rng_from_seed(seed);
        ProjectedLikelihood {
            vectors: Array2::from_shape_fn((n, s), |_| rng.sample(StandardNormal)),
            draw_seed: seed,
        }
    }

    #[test]
    fn projection_rows_are_centered_and_seeded() {
        let (x, y) = toy(30, 3, 3, 1);
        let data = LastLayerData::new(x.view(), &y, 3).unwrap();
        let pi = GaussianPosterior::around(vec![0.1; data.dim()], 0.3).unwrap();
        let p = project_loglik(&data, &pi, 50, 9).unwrap();
        assert_eq!(p.vectors.dim(), (30, 50));
        for row in p.vectors.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
        }
        assert_eq!(p.vectors, project_loglik(&data, &pi, 50, 9).unwrap().vectors);
        assert!(project_loglik(&data, &pi, 1, 9).is_err());
    }

    #[test]
    fn duplicate_rows_project_identically() {
        let (mut x, mut y) = toy(10, 2, 2, 2);
        let r = x.row(3).to_owned();
        x.row_mut(7).assign(&r);
        y[7] = y[3];
        let data = LastLayerData::new(x.view(), &y, 2).unwrap();
        let pi = GaussianPosterior::around(vec![0.0; data.dim()], 0.5).unwrap();
        let p = project_loglik(&data, &pi, 40, 1).unwrap();
        assert_eq!(p.vectors.row(3), p.vectors.row(7));
    }

    #[test]
    fn inner_products_match_analytic_covariance() {
        // With b1 far above b0 and class-0 labels, ℓ_n ≈ x_n(w0 − w1) + b0 − b1,
        // linear in θ. For x = 0 and x = 1 the covariance is Var(b0) = σ².
        let s = 4000;
        let x = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).unwrap();
        let y = vec![0, 0];
        let data = LastLayerData::new(x.view(), &y, 2).unwrap();
        let (tau, sd) = (0.8f64, 0.5f64);
        let pi = GaussianPosterior::new(vec![0.0, 0.0, 0.0, 20.0], vec![tau.ln(), -30.0, sd.ln(), -30.0]).unwrap();
        let p = project_loglik(&data, &pi, s, 5).unwrap();
        let ip = p.vectors.row(0).dot(&p.vectors.row(1));
        let (v1, v2, cov) = (sd * sd, sd * sd + tau * tau, sd * sd);
        let se = ((v1 * v2 + cov * cov) / s as f64).sqrt();
        assert!((ip - cov).abs() < 3.0 * se, "{ip} vs {cov} ± {se}");
        let var2 = p.vectors.row(1).dot(&p.vectors.row(1));
        assert!((var2 - v2).abs() < 3.0 * v2 * (2.0 / s as f64).sqrt());
    }

    #[test]
    fn full_budget_reproduces_the_total() {
        let p = random_proj(20, 60, 11);
        let (c, trace) = giga(&p, 20, GigaOptions { max_iters: Some(20_000) }).unwrap();
        assert!(c.len() <= 20);
        assert!(relative_residual(&p, &c) < 1e-6, "{}", relative_residual(&p, &c));
        for w in trace.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn budget_covering_all_points_is_exact() {
        let p = random_proj(8, 30, 5);
        for n_star in [8, 12] {
            let c = build_coreset(&p, n_star).unwrap();
            assert_eq!(c.weights, vec![1.0; 8]);
            assert_eq!(c.n_star, n_star);
            assert_eq!(relative_residual(&p, &c), 0.0);
            c.validate().unwrap();
        }
    }

    #[test]
    fn identical_rows_collapse_to_one_atom() {
        let mut rng = rng_from_seed(2);
        let row: Vec<f64> = (0..30).map(|_| rng.sample(StandardNormal)).collect();
        let vectors = Array2::from_shape_fn((12, 30), |(_, j)| row[j]);
        let p = ProjectedLikelihood { vectors, draw_seed: 0 };
        let c = build_coreset(&p, 1).unwrap();
        assert_eq!(c.indices.len(), 1);
        assert!((c.weights[0] - 12.0).abs() < 1e-9);
    }

    #[test]
    fn zero_rows_are_skipped_and_all_zero_is_degenerate() {
        let mut p = random_proj(6, 10, 4);
        p.vectors.row_mut(2).fill(0.0);
        let c = build_coreset(&p, 5).unwrap();
        assert!(!c.indices.contains(&2));
        c.validate().unwrap();
        let z = ProjectedLikelihood {
            vectors: Array2::zeros((5, 4)),
            draw_seed: 0,
        };
        assert!(matches!(build_coreset(&z, 3), Err(BmaError::Degenerate(_))));
        assert!(build_coreset(&p, 0).is_err());
    }

    #[test]
    fn cap_and_positivity_hold() {
        for seed in 0..5 {
            let p = random_proj(80, 30, seed);
            for cap in [1, 3, 10] {
                let (c, trace) = giga(&p, cap, GigaOptions::default()).unwrap();
                c.validate().unwrap();
                assert!(c.len() <= cap);
                for w in trace.residuals.windows(2) {
                    assert!(w[1] <= w[0] + 1e-15);
                }
            }
        }
    }

    #[test]
    fn weighted_loglik_identities() {
        let (x, y) = toy(15, 3, 3, 6);
        let data = LastLayerData::new(x.view(), &y, 3).unwrap();
        let theta: Vec<f64> = (0..data.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (full, g_full) = data.loglik_and_grad(&theta).unwrap();
        let (v, g) = weighted_loglik_and_grad(&Coreset::full(15), &data, &theta).unwrap();
        assert_eq!(v, full);
        assert_eq!(g, g_full);
        let zero = Coreset {
            indices: vec![1, 4],
            weights: vec![0.0, 0.0],
            n: 15,
            n_star: 2,
        };
        let (v, g) = weighted_loglik_and_grad(&zero, &data, &theta).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        let bad = Coreset {
            indices: vec![15],
            weights: vec![1.0],
            n: 16,
            n_star: 1,
        };
        assert!(matches!(weighted_loglik_and_grad(&bad, &data, &theta), Err(BmaError::Validation(_))));
    }

    #[test]
    fn weighted_gradient_matches_differences() {
        let (x, y) = toy(12, 2, 3, 8);
        let data = LastLayerData::new(x.view(), &y, 3).unwrap();
        let c = Coreset {
            indices: vec![0, 5, 9],
            weights: vec![2.5, 0.75, 4.0],
            n: 12,
            n_star: 3,
        };
        let theta: Vec<f64> = (0..data.dim()).map(|i| (i as f64 * 1.3).cos()).collect();
        let (_, g) = weighted_loglik_and_grad(&c, &data, &theta).unwrap();
        let h = 1e-6;
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += h;
            let mut m = theta.clone();
            m[i] -= h;
            let fd = (weighted_loglik_and_grad(&c, &data, &p).unwrap().0
                - weighted_loglik_and_grad(&c, &data, &m).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn beats_uniform_subsampling() {
        let n = 500;
        let (x, y) = toy(n, 4, 3, 13);
        let data = LastLayerData::new(x.view(), &y, 3).unwrap();
        let cfg = ViConfig {
            steps: 2000,
            rate: 0.05,
            batch_size: 100,
            n_mc: 1,
            init_std: 0.05,
        };
        let (pi, _) = fit_vi(&data, &vec![0.0; data.dim()], &PriorSpec::default(), &cfg, 1).unwrap();
        let n_star = n / 10;
        let mut coreset_err = 0.0;
        let mut uniform_err = 0.0;
        for seed in 0..5u64 {
            let proj = project_loglik(&data, &pi, 500, 100 + seed).unwrap();
            let c = build_coreset(&proj, n_star).unwrap();
            let draws = sample_last_layer(&pi, 20, 200 + seed).unwrap();
            coreset_err += approximation_error(&data, &c, &draws).unwrap();
            let u = uniform_subset(n, n_star, 300 + seed).unwrap();
            uniform_err += approximation_error(&data, &u, &draws).unwrap();
        }
        assert!(coreset_err < uniform_err, "coreset {coreset_err} vs uniform {uniform_err}");
    }

    #[test]
    fn approximation_error_ignores_constants() {
        let (x, y) = toy(30, 2, 2, 3);
        let data = LastLayerData::new(x.view(), &y, 2).unwrap();
        let pi = GaussianPosterior::around(vec![0.0; data.dim()], 0.5).unwrap();
        let draws = sample_last_layer(&pi, 20, 1).unwrap();
        assert!(approximation_error(&data, &Coreset::full(30), &draws).unwrap() < 1e-12);
        let u = uniform_subset(30, 30, 4).unwrap();
        assert!(approximation_error(&data, &u, &draws).unwrap() < 1e-12);
        assert!(approximation_error(&data, &Coreset::full(30), &draws[..1]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let c = Coreset {
            indices: vec![3, 8],
            weights: vec![1.25, 0.1 + 0.2],
            n: 10,
            n_star: 4,
        };
        let dir = std::env::temp_dir().join(format!("coreset-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        let f = CoresetFile::new("mode0", &c, 500, 7);
        f.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"N_star\""));
        let back = CoresetFile::load(&path).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.coreset().unwrap(), c);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
