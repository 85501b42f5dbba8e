//! Deep and cyclic ensembles, SGD-trajectory snapshots, and the averaged
//! predictive distribution over members, checkpoints and last-layer samples.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{BmaError, Result};
use crate::last_layer;
use crate::nn::{
    run_epoch, train, Architecture, Examples, History, Network, Scalar, ScheduleState, TrainConfig,
};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleType {
    Deep,
    Cyclic,
}

impl EnsembleType {
    pub const ALL: [EnsembleType; 2] = [EnsembleType::Deep, EnsembleType::Cyclic];

    pub fn as_str(&self) -> &'static str {
        match self {
            EnsembleType::Deep => "deep",
            EnsembleType::Cyclic => "cyclic",
        }
    }
}

impl fmt::Display for EnsembleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnsembleType {
    type Err = BmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(EnsembleType::Deep),
            "cyclic" => Ok(EnsembleType::Cyclic),
            other => Err(BmaError::Validation(format!("unknown ensemble type {other:?}"))),
        }
    }
}

/// How each ensemble member contributes samples to the model average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// The SGD solution of each member.
    #[serde(rename = "sgd")]
    Sgd,
    /// The final weights after the constant-rate stage.
    #[serde(rename = "sgd_t1")]
    SgdT1,
    /// End-of-epoch weights of each of the K constant-rate epochs.
    #[serde(rename = "sgd_tK")]
    SgdTk,
    /// K draws from a mean-field Gaussian posterior over the output layer.
    #[serde(rename = "vi")]
    Vi,
    /// K thinned NUTS draws over the output layer, targeting a coreset posterior.
    #[serde(rename = "mcmc")]
    Mcmc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Sgd,
        Method::SgdT1,
        Method::SgdTk,
        Method::Vi,
        Method::Mcmc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::SgdT1 => "sgd_t1",
            Method::SgdTk => "sgd_tK",
            Method::Vi => "vi",
            Method::Mcmc => "mcmc",
        }
    }

    pub fn is_trajectory(&self) -> bool {
        matches!(self, Method::SgdT1 | Method::SgdTk)
    }

    /// Whether predictions come from last-layer samples on a frozen backbone.
    pub fn is_last_layer(&self) -> bool {
        matches!(self, Method::Vi | Method::Mcmc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = BmaError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| BmaError::Validation(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub members: usize,
    pub ensemble_type: EnsembleType,
    pub method: Method,
    /// Trajectory checkpoints (or last-layer samples) per member.
    pub k: usize,
    /// Learning rate of the trajectory stage.
    pub constant_rate: f64,
    pub r0: f64,
    pub batch_size: usize,
    /// Epoch budget of a decaying-schedule run for non-trajectory methods.
    pub epochs: usize,
    /// Epoch budget of the decaying stage that precedes the K constant-rate epochs.
    pub trajectory_decay_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members == 0 {
            return Err(BmaError::Validation("ensemble needs at least one member".into()));
        }
        if self.k == 0 {
            return Err(BmaError::Validation("K must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(BmaError::Validation("batch_size must be >= 1".into()));
        }
        if !(self.r0 > 0.0 && self.r0.is_finite()) {
            return Err(BmaError::Validation(format!("r0 must be positive, got {}", self.r0)));
        }
        if self.method.is_trajectory() && !(self.constant_rate >= 0.0 && self.constant_rate.is_finite()) {
            return Err(BmaError::Validation(format!(
                "constant_rate must be non-negative, got {}",
                self.constant_rate
            )));
        }
        Ok(())
    }

    fn decay_epochs(&self) -> usize {
        if self.method.is_trajectory() {
            self.trajectory_decay_epochs
        } else {
            self.epochs
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Trained from a random initialization drawn with `init_seed`.
    Seeded { init_seed: u64, data_seed: u64 },
    /// Continued from the final weights of member `predecessor`.
    Continued { predecessor: usize, data_seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember<T> {
    pub index: usize,
    pub provenance: Provenance,
    pub initial_weights: Vec<T>,
    /// One checkpoint for `sgd`/`sgd_t1` (and the SGD mode used by `vi`/`mcmc`), K for `sgd_tK`.
    pub checkpoints: Vec<Network<T>>,
    pub history: History,
}

impl<T: Scalar> EnsembleMember<T> {
    pub fn final_checkpoint(&self) -> &Network<T> {
        self.checkpoints.last().expect("members always hold a checkpoint")
    }

    /// The SGD-t1 view of an SGD-tK member: only the final epoch's weights.
    pub fn final_only(&self) -> Self {
        Self {
            checkpoints: vec![self.final_checkpoint().clone()],
            ..self.clone()
        }
    }
}

/// Training and validation examples shared by all members.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a, T> {
    pub train: Examples<'a, T>,
    pub val: Examples<'a, T>,
}

fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Seeds of member `j`: the initialization stream and the data-order stream.
pub fn member_seeds(cfg: &EnsembleConfig, j: usize) -> (u64, u64) {
    let base = derive_seed(cfg.seed, &[j as u64]);
    (derive_seed(base, &[0]), derive_seed(base, &[1]))
}

/// Runs one member's optimization from `init`: a restarted cosine schedule,
/// then K constant-rate epochs for trajectory methods.
fn optimize_member<T: Scalar>(
    cfg: &EnsembleConfig,
    init: Network<T>,
    data: &TrainData<T>,
    data_seed: u64,
) -> Result<(Vec<Network<T>>, History)> {
    let epochs = cfg.decay_epochs();
    let per_epoch = batches_per_epoch(data.train.len(), cfg.batch_size);
    let mut schedule = ScheduleState::decaying(cfg.r0, epochs as u64 * per_epoch);
    let train_cfg = TrainConfig {
        batch_size: cfg.batch_size,
        max_epochs: epochs,
        patience: cfg.patience,
        rng_seed: data_seed,
    };
    let (best, history) = train(init, &data.train, &data.val, &mut schedule, &train_cfg)?;
    if !cfg.method.is_trajectory() {
        return Ok((vec![best], history));
    }
    // Early stopping (or exhausting the budget) moves straight to the constant stage.
    let mut net = best;
    let mut constant = ScheduleState::constant(cfg.constant_rate);
    let mut rng = rng_from_seed(derive_seed(data_seed, &[u64::MAX]));
    let mut checkpoints = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        run_epoch(&mut net, &data.train, &mut constant, cfg.batch_size, &mut rng)?;
        checkpoints.push(net.clone());
    }
    if cfg.method == Method::SgdT1 {
        checkpoints.drain(..cfg.k - 1);
    }
    Ok((checkpoints, history))
}

/// Trains member `j` of a deep ensemble from its own random initialization.
/// Members are independent, so callers may train them concurrently.
pub fn train_deep_member<T: Scalar>(
    arch: &Architecture,
    cfg: &EnsembleConfig,
    data: &TrainData<T>,
    j: usize,
) -> Result<EnsembleMember<T>> {
    let (init_seed, data_seed) = member_seeds(cfg, j);
    let init = Network::<T>::new(arch.clone(), init_seed)?;
    let initial_weights = init.weights().to_vec();
    let (checkpoints, history) = optimize_member(cfg, init, data, data_seed)?;
    Ok(EnsembleMember {
        index: j,
        provenance: Provenance::Seeded {
            init_seed,
            data_seed,
        },
        initial_weights,
        checkpoints,
        history,
    })
}

/// M members, each trained from an independent random initialization.
pub fn train_deep_ensemble<T: Scalar>(
    arch: &Architecture,
    cfg: &EnsembleConfig,
    data: &TrainData<T>,
) -> Result<Vec<EnsembleMember<T>>> {
    cfg.validate()?;
    if cfg.ensemble_type != EnsembleType::Deep {
        return Err(BmaError::Validation("expected a deep ensemble config".into()));
    }
    (0..cfg.members)
        .map(|j| train_deep_member(arch, cfg, data, j))
        .collect()
}

/// M members trained sequentially; member j starts from member j−1's final
/// weights and restarts the learning-rate schedule at batch 0.
pub fn train_cyclic_ensemble<T: Scalar>(
    arch: &Architecture,
    cfg: &EnsembleConfig,
    data: &TrainData<T>,
) -> Result<Vec<EnsembleMember<T>>> {
    cfg.validate()?;
    if cfg.ensemble_type != EnsembleType::Cyclic {
        return Err(BmaError::Validation("expected a cyclic ensemble config".into()));
    }
    let mut members: Vec<EnsembleMember<T>> = Vec::with_capacity(cfg.members);
    for j in 0..cfg.members {
        let member = train_cyclic_member(arch, cfg, data, j, members.last())?;
        members.push(member);
    }
    Ok(members)
}

/// Cycle `j` of a cyclic ensemble, continued from `prev`'s final weights or
/// freshly initialized when `prev` is `None`.
pub fn train_cyclic_member<T: Scalar>(
    arch: &Architecture,
    cfg: &EnsembleConfig,
    data: &TrainData<T>,
    j: usize,
    prev: Option<&EnsembleMember<T>>,
) -> Result<EnsembleMember<T>> {
    let (init_seed, data_seed) = member_seeds(cfg, j);
    let (init, provenance) = match prev {
        None => (
            Network::<T>::new(arch.clone(), init_seed)?,
            Provenance::Seeded {
                init_seed,
                data_seed,
            },
        ),
        Some(prev) => (
            prev.final_checkpoint().clone(),
            Provenance::Continued {
                predecessor: prev.index,
                data_seed,
            },
        ),
    };
    let initial_weights = init.weights().to_vec();
    let (checkpoints, history) = optimize_member(cfg, init, data, data_seed)?;
    Ok(EnsembleMember {
        index: j,
        provenance,
        initial_weights,
        checkpoints,
        history,
    })
}

/// Trajectory ensembles (SGD-t1 / SGD-tK) of either ensemble type.
pub fn train_trajectory<T: Scalar>(
    arch: &Architecture,
    cfg: &EnsembleConfig,
    data: &TrainData<T>,
) -> Result<Vec<EnsembleMember<T>>> {
    if !cfg.method.is_trajectory() {
        return Err(BmaError::Validation(format!(
            "{} is not a trajectory method",
            cfg.method
        )));
    }
    train_ensemble(arch, cfg, data)
}

pub fn train_ensemble<T: Scalar>(
    arch: &Architecture,
    cfg: &EnsembleConfig,
    data: &TrainData<T>,
) -> Result<Vec<EnsembleMember<T>>> {
    match cfg.ensemble_type {
        EnsembleType::Deep => train_deep_ensemble(arch, cfg, data),
        EnsembleType::Cyclic => train_cyclic_ensemble(arch, cfg, data),
    }
}

/// Incremental arithmetic mean of equally shaped probability matrices.
///
/// Averaging identical inputs reproduces them bit-exactly.
#[derive(Clone, Debug, Default)]
pub struct RunningMean {
    mean: Option<Array2<f64>>,
    count: usize,
}

impl RunningMean {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: &Array2<f64>) -> Result<()> {
        self.count += 1;
        match &mut self.mean {
            None => self.mean = Some(x.clone()),
            Some(m) => {
                if m.dim() != x.dim() {
                    return Err(BmaError::Dimension(format!(
                        "cannot average predictions of shape {:?} with {:?}",
                        x.dim(),
                        m.dim()
                    )));
                }
                let n = self.count as f64;
                ndarray::Zip::from(m).and(x).for_each(|m, &v| *m += (v - *m) / n);
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn current(&self) -> Option<&Array2<f64>> {
        self.mean.as_ref()
    }

    pub fn finish(self) -> Result<Array2<f64>> {
        self.mean
            .ok_or_else(|| BmaError::Validation("nothing to average".into()))
    }
}

pub fn average_predictions<'a>(rows: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Array2<f64>> {
    let mut acc = RunningMean::new();
    for r in rows {
        acc.push(r)?;
    }
    acc.finish()
}

fn to_f64<T: Scalar>(a: &Array2<T>) -> Array2<f64> {
    a.mapv(|v| v.as_f64())
}

/// Predictive distribution of one member: the mean over its checkpoints,
/// or over last-layer `samples` on its final checkpoint's frozen features.
pub fn member_predictive<T: Scalar>(
    member: &EnsembleMember<T>,
    inputs: ArrayView2<T>,
    samples: Option<&[Vec<f64>]>,
) -> Result<Array2<f64>> {
    match samples {
        None => {
            let mut acc = RunningMean::new();
            for net in &member.checkpoints {
                acc.push(&to_f64(&net.forward(inputs)?))?;
            }
            acc.finish()
        }
        Some(samples) => {
            let net = member.final_checkpoint();
            let features = to_f64(&net.features(inputs)?);
            let mut acc = RunningMean::new();
            for theta in samples {
                acc.push(&last_layer::predict(theta, features.view(), net.classes())?)?;
            }
            acc.finish()
        }
    }
}

/// The model average `(1/M) Σ_j (1/K) Σ_k p(y | x; θ_jk)` in probability space.
///
/// `sampler[j]`, when given, supplies the last-layer samples of member `j`
/// (VI or MCMC); otherwise each member's checkpoints are averaged.
pub fn bma_predict<T: Scalar>(
    members: &[EnsembleMember<T>],
    inputs: ArrayView2<T>,
    sampler: Option<&[Vec<Vec<f64>>]>,
) -> Result<Array2<f64>> {
    let first = members
        .first()
        .ok_or_else(|| BmaError::Validation("no ensemble members".into()))?;
    let arch = first.final_checkpoint().architecture();
    if let Some(s) = sampler {
        if s.len() != members.len() {
            return Err(BmaError::Dimension(format!(
                "{} members but {} sample sets",
                members.len(),
                s.len()
            )));
        }
    }
    let mut acc = RunningMean::new();
    for (j, m) in members.iter().enumerate() {
        if m.checkpoints.iter().any(|c| c.architecture() != arch) {
            return Err(BmaError::Dimension(format!(
                "member {} has a different architecture",
                m.index
            )));
        }
        let samples = sampler.map(|s| s[j].as_slice());
        acc.push(&member_predictive(m, inputs, samples)?)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{brier, PredictionSet};
    use ndarray::{array, Axis};
    use rand::Rng;

    fn noisy_toy(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = rng_from_seed(seed);
        let mut x = Array2::zeros((n, 2));
        let mut y = vec![0; n];
        for i in 0..n {
            let label = rng.random_range(0..3usize);
            let angle = label as f64 * 2.0 * std::f64::consts::PI / 3.0;
            x[[i, 0]] = angle.cos() + rng.random_range(-1.2..1.2);
            x[[i, 1]] = angle.sin() + rng.random_range(-1.2..1.2);
            y[i] = label;
        }
        (x, y)
    }

    fn config(ensemble_type: EnsembleType, method: Method, members: usize) -> EnsembleConfig {
        EnsembleConfig {
            members,
            ensemble_type,
            method,
            k: 3,
            constant_rate: 1e-3,
            r0: 0.1,
            batch_size: 16,
            epochs: 6,
            trajectory_decay_epochs: 5,
            patience: 10,
            seed: 42,
        }
    }

    struct Toy {
        xt: Array2<f64>,
        yt: Vec<usize>,
        xv: Array2<f64>,
        yv: Vec<usize>,
    }

    impl Toy {
        fn new() -> Self {
            let (xt, yt) = noisy_toy(120, 1);
            let (xv, yv) = noisy_toy(40, 2);
            Self { xt, yt, xv, yv }
        }

        fn data(&self) -> TrainData<'_, f64> {
            TrainData {
                train: Examples::new(self.xt.view(), &self.yt).unwrap(),
                val: Examples::new(self.xv.view(), &self.yv).unwrap(),
            }
        }
    }

    fn arch() -> Architecture {
        Architecture::mlp(2, &[12], 3)
    }

    #[test]
    fn single_deep_member_equals_plain_training() {
        let toy = Toy::new();
        let cfg = config(EnsembleType::Deep, Method::Sgd, 1);
        let members = train_deep_ensemble(&arch(), &cfg, &toy.data()).unwrap();
        let (init_seed, data_seed) = member_seeds(&cfg, 0);
        let net = Network::<f64>::new(arch(), init_seed).unwrap();
        let mut sched = ScheduleState::decaying(0.1, 6 * 8);
        let tc = TrainConfig {
            batch_size: 16,
            max_epochs: 6,
            patience: 10,
            rng_seed: data_seed,
        };
        let d = toy.data();
        let (net, _) = train(net, &d.train, &d.val, &mut sched, &tc).unwrap();
        assert_eq!(members[0].final_checkpoint().weights(), net.weights());
    }

    #[test]
    fn deep_members_are_distinct_and_disagree() {
        let toy = Toy::new();
        let cfg = config(EnsembleType::Deep, Method::Sgd, 4);
        let members = train_deep_ensemble(&arch(), &cfg, &toy.data()).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(
                    members[a].final_checkpoint().weights(),
                    members[b].final_checkpoint().weights()
                );
            }
        }
        let preds: Vec<Vec<usize>> = members
            .iter()
            .map(|m| {
                let p = m.final_checkpoint().forward(toy.xv.view()).unwrap();
                p.axis_iter(Axis(0))
                    .map(|r| crate::nn::argmax(r.iter().copied()))
                    .collect()
            })
            .collect();
        let disagreements = (0..toy.yv.len())
            .filter(|&i| preds.iter().any(|p| p[i] != preds[0][i]))
            .count();
        assert!(disagreements > 0);
    }

    #[test]
    fn deep_member_retrains_bit_exactly_alone() {
        let toy = Toy::new();
        let cfg = config(EnsembleType::Deep, Method::Sgd, 3);
        let members = train_deep_ensemble(&arch(), &cfg, &toy.data()).unwrap();
        let alone = train_deep_member(&arch(), &cfg, &toy.data(), 2).unwrap();
        assert_eq!(alone, members[2]);
    }

    #[test]
    fn cyclic_members_chain_final_weights() {
        let toy = Toy::new();
        let cfg = config(EnsembleType::Cyclic, Method::Sgd, 3);
        let members = train_cyclic_ensemble(&arch(), &cfg, &toy.data()).unwrap();
        for j in 1..3 {
            assert_eq!(
                members[j].initial_weights,
                members[j - 1].final_checkpoint().weights()
            );
            assert_eq!(
                members[j].provenance,
                Provenance::Continued {
                    predecessor: j - 1,
                    data_seed: member_seeds(&cfg, j).1
                }
            );
            // The restarted schedule begins each cycle at r0.
            assert_eq!(members[j].history.epochs[0].first_rate, cfg.r0);
        }
        let deep = train_deep_ensemble(
            &arch(),
            &EnsembleConfig {
                ensemble_type: EnsembleType::Deep,
                members: 1,
                ..cfg.clone()
            },
            &toy.data(),
        )
        .unwrap();
        assert_eq!(deep[0], members[0]);
    }

    #[test]
    fn cycle_restart_begins_at_r0() {
        let mut s = ScheduleState::decaying(0.1, 40);
        s.batch = 40;
        s.restart();
        assert_eq!(s.rate().unwrap(), 0.1);
    }

    #[test]
    fn trajectory_variants() {
        let toy = Toy::new();
        let tk = config(EnsembleType::Deep, Method::SgdTk, 2);
        let members = train_trajectory(&arch(), &tk, &toy.data()).unwrap();
        assert!(members.iter().all(|m| m.checkpoints.len() == 3));

        let t1 = EnsembleConfig {
            method: Method::SgdT1,
            ..tk.clone()
        };
        let last = train_trajectory(&arch(), &t1, &toy.data()).unwrap();
        for (a, b) in members.iter().zip(&last) {
            assert_eq!(b.checkpoints.len(), 1);
            assert_eq!(a.final_only(), *b);
        }

        let k1 = |method| EnsembleConfig {
            method,
            k: 1,
            ..tk.clone()
        };
        assert_eq!(
            train_trajectory(&arch(), &k1(Method::SgdT1), &toy.data()).unwrap(),
            train_trajectory(&arch(), &k1(Method::SgdTk), &toy.data()).unwrap()
        );

        let frozen = EnsembleConfig {
            constant_rate: 0.0,
            ..tk.clone()
        };
        let frozen_members = train_trajectory(&arch(), &frozen, &toy.data()).unwrap();
        let decayed = train_deep_member(
            &arch(),
            &EnsembleConfig {
                method: Method::Sgd,
                epochs: tk.trajectory_decay_epochs,
                ..tk.clone()
            },
            &toy.data(),
            0,
        )
        .unwrap();
        for c in &frozen_members[0].checkpoints {
            assert_eq!(c.weights(), decayed.final_checkpoint().weights());
        }

        assert!(train_trajectory(&arch(), &config(EnsembleType::Deep, Method::Sgd, 1), &toy.data()).is_err());
    }

    fn member_with(net: Network<f64>) -> EnsembleMember<f64> {
        EnsembleMember {
            index: 0,
            provenance: Provenance::Seeded {
                init_seed: 0,
                data_seed: 0,
            },
            initial_weights: net.weights().to_vec(),
            checkpoints: vec![net],
            history: History {
                epochs: vec![],
                best_epoch: 1,
                best_val_loss: 0.0,
                stopped_early: false,
            },
        }
    }

    #[test]
    fn identical_members_average_exactly() {
        let net = Network::<f64>::new(Architecture::mlp(2, &[5], 3), 3).unwrap();
        let x = array![[0.1, 0.7], [-1.3, 0.4], [2.0, -2.0]];
        let single = net.forward(x.view()).unwrap();
        let members: Vec<_> = (0..7).map(|_| member_with(net.clone())).collect();
        let avg = bma_predict(&members, x.view(), None).unwrap();
        assert_eq!(avg, single);
    }

    #[test]
    fn opposite_one_hot_members_average_to_half() {
        // Saturated two-class output layers.
        let arch = Architecture::mlp(1, &[], 2);
        let a = Network::with_weights(arch.clone(), vec![0.0, 0.0, 800.0, -800.0]).unwrap();
        let b = Network::with_weights(arch, vec![0.0, 0.0, -800.0, 800.0]).unwrap();
        let x = array![[1.0]];
        let p = bma_predict(&[member_with(a), member_with(b)], x.view(), None).unwrap();
        assert_eq!(p, array![[0.5, 0.5]]);
    }

    #[test]
    fn average_is_permutation_invariant_and_jensen_holds() {
        let (x, y) = noisy_toy(50, 7);
        let members: Vec<_> = (0..5)
            .map(|s| member_with(Network::<f64>::new(Architecture::mlp(2, &[6], 3), s).unwrap()))
            .collect();
        let avg = bma_predict(&members, x.view(), None).unwrap();
        let mut rev = members.clone();
        rev.reverse();
        let avg_rev = bma_predict(&rev, x.view(), None).unwrap();
        for (a, b) in avg.iter().zip(avg_rev.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for row in avg.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let ens = brier(&PredictionSet::new(avg, y.clone()).unwrap());
        let mean_member: f64 = members
            .iter()
            .map(|m| brier(&PredictionSet::new(m.final_checkpoint().forward(x.view()).unwrap(), y.clone()).unwrap()))
            .sum::<f64>()
            / 5.0;
        assert!(ens <= mean_member);
    }

    #[test]
    fn last_layer_samples_replace_the_output_layer() {
        let net = Network::<f64>::new(Architecture::mlp(2, &[4], 3), 1).unwrap();
        let x = array![[0.3, -0.2], [1.0, 1.0]];
        let member = member_with(net.clone());
        let theta = net.last_layer().to_vec();
        let p = member_predictive(&member, x.view(), Some(&[theta.clone(), theta])).unwrap();
        let q = net.forward(x.view()).unwrap();
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn incompatible_members_are_rejected() {
        let a = member_with(Network::<f64>::new(Architecture::mlp(2, &[4], 3), 1).unwrap());
        let b = member_with(Network::<f64>::new(Architecture::mlp(2, &[5], 3), 1).unwrap());
        let x = array![[0.3, -0.2]];
        assert!(matches!(
            bma_predict(&[a, b], x.view(), None),
            Err(BmaError::Dimension(_))
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }
}
