//! Experiment configuration: one JSON document, layered over a built-in
//! profile.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bma_core::ensembles::{EnsembleType, Method};
use bma_core::mcmc::NutsConfig;
use bma_core::nn::{Architecture, InputShape};
use bma_core::vi::ViConfig;
use bma_core::{BmaError, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Desk,
}

impl FromStr for Profile {
    type Err = BmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            _ => Err(BmaError::Validation(format!("unknown profile {s:?}"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// CIFAR-10 binary batches. `train_subset` draws a seeded subset of the
    /// 50k training images before the train/validation split.
    Cifar10 {
        dir: PathBuf,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
    /// Isotropic Gaussian blobs with centers evenly spaced on a circle of
    /// `radius` in the first two coordinates, `blobs` per class with the
    /// classes interleaved around the circle.
    Synthetic {
        classes: usize,
        #[serde(default = "one")]
        blobs: usize,
        dim: usize,
        pool: usize,
        test: usize,
        radius: f64,
        noise: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    /// Dense ReLU layers; the last hidden width is the feature dimension.
    Mlp { hidden: Vec<usize> },
    /// Conv-ReLU blocks, then a dense ReLU head of width `head`.
    SmallCnn {
        filters: Vec<usize>,
        kernel: usize,
        stride: usize,
        head: usize,
    },
}

impl ArchSpec {
    pub fn build(&self, input: InputShape, classes: usize) -> Result<Architecture> {
        match self {
            ArchSpec::Mlp { hidden } => {
                if hidden.is_empty() {
                    return Err(BmaError::Validation("an MLP needs a hidden layer".into()));
                }
                Ok(Architecture::mlp(input.size(), hidden, classes))
            }
            ArchSpec::SmallCnn {
                filters,
                kernel,
                stride,
                head,
            } => Ok(Architecture::small_cnn(input, filters, *kernel, *stride, *head, classes)),
        }
    }

    /// Short identifier used in the `arch` column of the results.
    pub fn name(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        match self {
            ArchSpec::Mlp { hidden } => format!("mlp-{}", join(hidden)),
            ArchSpec::SmallCnn { filters, head, .. } => format!("cnn-{}-{}", join(filters), head),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    pub r0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub trajectory_decay_epochs: usize,
    pub patience: usize,
    pub constant_rate: f64,
    /// Trajectory checkpoints per member for `sgd_tK`.
    pub k: usize,
    pub train_frac: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViSettings {
    pub steps: usize,
    pub rate: f64,
    pub batch_size: usize,
    pub n_mc: usize,
    pub init_std: f64,
    pub prior_std: f64,
    /// Predictive samples per mode at test time.
    pub samples: usize,
}

impl ViSettings {
    pub fn vi_config(&self) -> ViConfig {
        ViConfig {
            steps: self.steps,
            rate: self.rate,
            batch_size: self.batch_size,
            n_mc: self.n_mc,
            init_std: self.init_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetSettings {
    pub projection_dim: usize,
    pub n_star: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McmcSettings {
    pub warmup: usize,
    pub n_draws: usize,
    pub thin: usize,
    pub max_depth: usize,
    pub target_accept: f64,
}

impl McmcSettings {
    pub fn nuts_config(&self) -> NutsConfig {
        NutsConfig {
            warmup: self.warmup,
            n_draws: self.n_draws,
            thin: self.thin,
            max_depth: self.max_depth,
            target_accept: self.target_accept,
            init_step_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub architecture: ArchSpec,
    pub methods: Vec<Method>,
    pub ensemble_types: Vec<EnsembleType>,
    pub m_max: usize,
    pub runs: usize,
    pub training: TrainingSettings,
    pub vi: ViSettings,
    pub coreset: CoresetSettings,
    pub mcmc: McmcSettings,
    pub ece_bins: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    /// When false the `wall_seconds` column is written as 0 so repeated
    /// runs produce byte-identical results.
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Paper => Self {
                dataset: DatasetSpec::Cifar10 {
                    dir: PathBuf::from("data/cifar-10-batches-bin"),
                    train_subset: None,
                    test_subset: None,
                },
                architecture: ArchSpec::SmallCnn {
                    filters: vec![32, 64, 128],
                    kernel: 3,
                    stride: 2,
                    head: 128,
                },
                methods: Method::ALL.to_vec(),
                ensemble_types: EnsembleType::ALL.to_vec(),
                m_max: 16,
                runs: 5,
                training: TrainingSettings {
                    r0: 0.1,
                    batch_size: 32,
                    epochs: 50,
                    trajectory_decay_epochs: 40,
                    patience: 10,
                    constant_rate: 1e-4,
                    k: 10,
                    train_frac: 0.8,
                },
                vi: ViSettings {
                    steps: 5000,
                    rate: 1e-3,
                    batch_size: 128,
                    n_mc: 1,
                    init_std: 0.05,
                    prior_std: 1.0,
                    samples: 10,
                },
                coreset: CoresetSettings {
                    projection_dim: 5000,
                    n_star: 1500,
                },
                mcmc: McmcSettings {
                    warmup: 10_000,
                    n_draws: 1000,
                    thin: 100,
                    max_depth: 10,
                    target_accept: 0.8,
                },
                ece_bins: bma_core::metrics::DEFAULT_ECE_BINS,
                out_dir: PathBuf::from("results/paper"),
                seed: 0,
                workers: 1,
                record_wall_time: true,
            },
            Profile::Desk => {
                let paper = Self::profile(Profile::Paper);
                Self {
                    dataset: DatasetSpec::Synthetic {
                        classes: 4,
                        blobs: 3,
                        dim: 2,
                        pool: 800,
                        test: 2000,
                        radius: 3.0,
                        noise: 0.5,
                    },
                    architecture: ArchSpec::Mlp { hidden: vec![32, 32] },
                    m_max: 8,
                    runs: 3,
                    coreset: CoresetSettings {
                        projection_dim: 500,
                        n_star: 150,
                    },
                    mcmc: McmcSettings {
                        warmup: 1000,
                        n_draws: 200,
                        thin: 20,
                        ..paper.mcmc
                    },
                    out_dir: PathBuf::from("results/desk"),
                    ..paper
                }
            }
        }
    }

    /// The CIFAR-10 desk variant: a 5000-image training subset and a small CNN.
    pub fn desk_cifar10(dir: PathBuf) -> Self {
        Self {
            dataset: DatasetSpec::Cifar10 {
                dir,
                train_subset: Some(5000),
                test_subset: None,
            },
            architecture: ArchSpec::SmallCnn {
                filters: vec![16, 32],
                kernel: 3,
                stride: 2,
                head: 64,
            },
            ..Self::profile(Profile::Desk)
        }
    }

    /// Profile defaults overridden by a (possibly partial) JSON document.
    pub fn from_json(profile: Profile, overrides: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(overrides).map_err(|e| BmaError::Format(format!("config: {e}")))?;
        let mut base = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        merge(&mut base, user);
        let cfg: Self = serde_json::from_value(base).map_err(|e| BmaError::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(profile: Profile, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BmaError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(profile, &text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BmaError::Validation(m));
        if self.runs == 0 {
            return bad("runs must be >= 1".into());
        }
        if self.m_max == 0 {
            return bad("m_max must be >= 1".into());
        }
        if self.methods.is_empty() || self.ensemble_types.is_empty() {
            return bad("need at least one method and one ensemble type".into());
        }
        let t = &self.training;
        if !(t.train_frac > 0.0 && t.train_frac < 1.0) {
            return bad(format!("train_frac must lie in (0, 1), got {}", t.train_frac));
        }
        if t.batch_size == 0 || t.k == 0 || t.epochs == 0 {
            return bad("batch_size, k and epochs must be >= 1".into());
        }
        if self.vi.samples == 0 || self.vi.steps == 0 {
            return bad("vi.samples and vi.steps must be >= 1".into());
        }
        bma_core::vi::PriorSpec::new(self.vi.prior_std)?;
        if self.coreset.projection_dim < 2 || self.coreset.n_star == 0 {
            return bad("coreset needs projection_dim >= 2 and n_star >= 1".into());
        }
        self.mcmc.nuts_config().validate()?;
        if self.ece_bins == 0 {
            return bad("ece_bins must be >= 1".into());
        }
        match &self.dataset {
            DatasetSpec::Cifar10 { dir, .. } => {
                if !dir.is_dir() {
                    return bad(format!("CIFAR-10 directory {} does not exist", dir.display()));
                }
            }
            DatasetSpec::Synthetic {
                classes,
                blobs,
                dim,
                pool,
                test,
                noise,
                ..
            } => {
                if *classes < 2 || *blobs == 0 || *dim < 2 || *pool < 10 || *test == 0 || !(*noise > 0.0) {
                    return bad("synthetic data needs classes >= 2, blobs >= 1, dim >= 2, pool >= 10, test >= 1, noise > 0".into());
                }
            }
        }
        Ok(())
    }
}

fn one() -> usize {
    1
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                // A different tagged variant replaces the whole object.
                let replace = matches!((b.get(&k), &v), (Some(Value::Object(old)), Value::Object(new))
                    if new.get("kind").is_some_and(|kind| old.get("kind") != Some(kind)));
                match b.get_mut(&k) {
                    Some(slot) if !replace => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
