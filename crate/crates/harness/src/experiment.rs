//! The experiment matrix: ensemble type × method × run, with every
//! intermediate artifact persisted so interrupted runs resume where they
//! stopped.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.json
//! runs/<ensemble_type>/run<r>/sgd/{manifest.json, member<j>.json, member<j>_<k>.bin}
//! runs/<ensemble_type>/run<r>/trajectory/...
//! runs/<ensemble_type>/run<r>/vi/member<j>.{vip,json}
//! runs/<ensemble_type>/run<r>/coreset/member<j>.json
//! runs/<ensemble_type>/run<r>/mcmc/member<j>.{mcs,json}
//! cells/<ensemble_type>_<method>_run<r>.json
//! results.csv, failures.csv
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use bma_core::checkpoint::{write_atomic, WeightCheckpoint};
use bma_core::coresets::{build_coreset, project_loglik, Coreset, CoresetFile};
use bma_core::ensembles::{
    member_predictive, EnsembleConfig, EnsembleMember, EnsembleType, Method, Provenance,
    RunningMean, TrainData,
};
use bma_core::last_layer::LastLayerData;
use bma_core::mcmc::{nuts_sample, single_chain_diagnostics, HmcTarget, SampleSet, SamplerReport};
use bma_core::metrics::{brier, PredictionSet, Scores};
use bma_core::nn::{Architecture, Examples, History};
use bma_core::rng::derive_seed;
use bma_core::vi::{fit_vi, sample_last_layer, GaussianPosterior, PriorSpec};
use bma_core::{BmaError, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{prepare, Splits};
use crate::report::{write_failures, write_results, FailureRow, ResultRow};

/// Which SGD run a method's members come from. `sgd`, `vi` and `mcmc`
/// share standard runs; `sgd_t1` and `sgd_tK` share one trajectory run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingKind {
    Standard,
    Trajectory,
}

impl TrainingKind {
    pub fn of(method: Method) -> Self {
        if method.is_trajectory() {
            TrainingKind::Trajectory
        } else {
            TrainingKind::Standard
        }
    }

    fn dir_name(self) -> &'static str {
        match self {
            TrainingKind::Standard => "sgd",
            TrainingKind::Trajectory => "trajectory",
        }
    }

    fn index(self) -> u64 {
        match self {
            TrainingKind::Standard => 0,
            TrainingKind::Trajectory => 1,
        }
    }
}

fn type_index(t: EnsembleType) -> u64 {
    match t {
        EnsembleType::Deep => 0,
        EnsembleType::Cyclic => 1,
    }
}

/// Seed-derivation namespaces.
mod stream {
    pub const DATA: u64 = 1;
    pub const TRAIN: u64 = 10;
    pub const VI_FIT: u64 = 20;
    pub const VI_SAMPLE: u64 = 21;
    pub const PROJECTION: u64 = 30;
    pub const NUTS: u64 = 40;
}

/// Per-member training record, written next to its checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub index: usize,
    pub provenance: Provenance,
    pub checkpoints: Vec<String>,
    pub history: History,
    pub seconds: f64,
}

/// Ensemble manifest: the member list of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub ensemble_type: EnsembleType,
    pub method: Method,
    pub run: usize,
    pub seed: u64,
    pub members: Vec<MemberRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Done {
        rows: Vec<ResultRow>,
        /// Brier score of each member's own predictive distribution.
        member_brier: Vec<f64>,
    },
    Failed {
        error_kind: String,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub ensemble_type: EnsembleType,
    pub method: Method,
    pub run: usize,
    #[serde(flatten)]
    pub status: CellStatus,
}

/// A loaded SGD run: members plus the compute time spent on each.
pub struct TrainedEnsemble {
    pub members: Vec<EnsembleMember<f32>>,
    pub seconds: Vec<f64>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| BmaError::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| BmaError::Format(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(f64::from)
}

fn parallel_map<T: Send, F>(n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub splits: Splits,
    pub arch: Architecture,
    pub dir: PathBuf,
}

impl Pipeline {
    /// Prepares the data and the output directory. The resolved config is
    /// written to `config.json`.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let splits = prepare(&cfg.dataset, cfg.training.train_frac, derive_seed(cfg.seed, &[stream::DATA]))?;
        let arch = cfg.architecture.build(splits.train.shape, splits.train.classes)?;
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(dir.join("cells"))?;
        write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes())?;
        Ok(Self { cfg, splits, arch, dir })
    }

    fn run_dir(&self, t: EnsembleType, run: usize) -> PathBuf {
        self.dir.join("runs").join(t.as_str()).join(format!("run{run}"))
    }

    fn stage_dir(&self, t: EnsembleType, run: usize, stage: &str) -> Result<PathBuf> {
        let d = self.run_dir(t, run).join(stage);
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn seconds(&self, start: Instant) -> f64 {
        if self.cfg.record_wall_time {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    pub fn ensemble_config(&self, t: EnsembleType, kind: TrainingKind, run: usize) -> EnsembleConfig {
        let tr = &self.cfg.training;
        EnsembleConfig {
            members: self.cfg.m_max,
            ensemble_type: t,
            method: match kind {
                TrainingKind::Standard => Method::Sgd,
                TrainingKind::Trajectory => Method::SgdTk,
            },
            k: tr.k,
            constant_rate: tr.constant_rate,
            r0: tr.r0,
            batch_size: tr.batch_size,
            epochs: tr.epochs,
            trajectory_decay_epochs: tr.trajectory_decay_epochs,
            patience: tr.patience,
            seed: derive_seed(self.cfg.seed, &[stream::TRAIN, type_index(t), kind.index(), run as u64]),
        }
    }

    fn train_data(&self) -> Result<TrainData<'_, f32>> {
        Ok(TrainData {
            train: Examples::new(self.splits.train.inputs.view(), &self.splits.train.labels)?,
            val: Examples::new(self.splits.val.inputs.view(), &self.splits.val.labels)?,
        })
    }

    fn load_member(&self, dir: &Path, j: usize) -> Result<Option<(EnsembleMember<f32>, f64)>> {
        let meta = dir.join(format!("member{j}.json"));
        if !meta.exists() {
            return Ok(None);
        }
        let rec: MemberRecord = read_json(&meta)?;
        let checkpoints = rec
            .checkpoints
            .iter()
            .map(|f| WeightCheckpoint::load(&dir.join(f))?.into_network(self.arch.clone()))
            .collect::<Result<Vec<_>>>()?;
        if checkpoints.is_empty() {
            return Err(BmaError::Format(format!("{} lists no checkpoints", meta.display())));
        }
        Ok(Some((
            EnsembleMember {
                index: rec.index,
                provenance: rec.provenance,
                // Initial weights are not persisted.
                initial_weights: Vec::new(),
                checkpoints,
                history: rec.history,
            },
            rec.seconds,
        )))
    }

    fn save_member(&self, dir: &Path, m: &EnsembleMember<f32>, seconds: f64) -> Result<MemberRecord> {
        let mut names = Vec::with_capacity(m.checkpoints.len());
        for (k, net) in m.checkpoints.iter().enumerate() {
            let name = format!("member{}_{k}.bin", m.index);
            WeightCheckpoint::from_network(net).save(&dir.join(&name))?;
            names.push(name);
        }
        let rec = MemberRecord {
            index: m.index,
            provenance: m.provenance,
            checkpoints: names,
            history: m.history.clone(),
            seconds,
        };
        write_json(&dir.join(format!("member{}.json", m.index)), &rec)?;
        Ok(rec)
    }

    /// Trains (or reloads) the M_max members of one SGD run.
    pub fn ensemble(&self, t: EnsembleType, kind: TrainingKind, run: usize) -> Result<TrainedEnsemble> {
        let dir = self.stage_dir(t, run, kind.dir_name())?;
        let ecfg = self.ensemble_config(t, kind, run);
        ecfg.validate()?;
        let data = self.train_data()?;
        let m = self.cfg.m_max;
        let mut out: Vec<(EnsembleMember<f32>, f64)> = match t {
            EnsembleType::Deep => parallel_map(m, |j| {
                if let Some(hit) = self.load_member(&dir, j)? {
                    return Ok(hit);
                }
                let start = Instant::now();
                let member = bma_core::ensembles::train_deep_member(&self.arch, &ecfg, &data, j)?;
                let secs = self.seconds(start);
                self.save_member(&dir, &member, secs)?;
                log::info!("trained {} {} run {run} member {j}", t, kind.dir_name());
                Ok((member, secs))
            })?,
            EnsembleType::Cyclic => {
                let mut members: Vec<(EnsembleMember<f32>, f64)> = Vec::with_capacity(m);
                for j in 0..m {
                    if let Some(hit) = self.load_member(&dir, j)? {
                        members.push(hit);
                        continue;
                    }
                    let start = Instant::now();
                    let member = bma_core::ensembles::train_cyclic_member(&self.arch, &ecfg, &data, j, members.last().map(|p| &p.0))?;
                    let secs = self.seconds(start);
                    self.save_member(&dir, &member, secs)?;
                    log::info!("trained {} {} run {run} member {j}", t, kind.dir_name());
                    members.push((member, secs));
                }
                members
            }
        };
        out.sort_by_key(|(mem, _)| mem.index);
        let manifest = EnsembleManifest {
            ensemble_type: t,
            method: ecfg.method,
            run,
            seed: ecfg.seed,
            members: out
                .iter()
                .map(|(mem, secs)| MemberRecord {
                    index: mem.index,
                    provenance: mem.provenance,
                    checkpoints: (0..mem.checkpoints.len())
                        .map(|k| format!("member{}_{k}.bin", mem.index))
                        .collect(),
                    history: mem.history.clone(),
                    seconds: *secs,
                })
                .collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        let (members, seconds) = out.into_iter().unzip();
        Ok(TrainedEnsemble { members, seconds })
    }

    /// Frozen-backbone features of the training split under member `m`.
    fn train_features(&self, m: &EnsembleMember<f32>) -> Result<Array2<f64>> {
        Ok(to_f64(&m.final_checkpoint().features(self.splits.train.inputs.view())?))
    }

    fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(self.cfg.vi.prior_std)
    }

    /// Last-layer VI posterior of every standard-run mode, rounded to the
    /// stored precision.
    pub fn posteriors(&self, t: EnsembleType, run: usize) -> Result<Vec<(GaussianPosterior, f64)>> {
        let ens = self.ensemble(t, TrainingKind::Standard, run)?;
        let dir = self.stage_dir(t, run, "vi")?;
        let prior = self.prior()?;
        let labels = &self.splits.train.labels;
        parallel_map(ens.members.len(), |j| {
            let path = dir.join(format!("member{j}.vip"));
            let meta = dir.join(format!("member{j}.json"));
            if path.exists() && meta.exists() {
                let rec: StageRecord = read_json(&meta)?;
                return Ok((GaussianPosterior::load(&path)?, rec.seconds));
            }
            let start = Instant::now();
            let m = &ens.members[j];
            let feats = self.train_features(m)?;
            let data = LastLayerData::new(feats.view(), labels, self.splits.train.classes)?;
            let init: Vec<f64> = m.final_checkpoint().last_layer().iter().map(|&v| f64::from(v)).collect();
            let seed = derive_seed(self.cfg.seed, &[stream::VI_FIT, type_index(t), run as u64, j as u64]);
            let (q, _) = fit_vi(&data, &init, &prior, &self.cfg.vi.vi_config(), seed)?;
            let secs = self.seconds(start);
            q.save(&path)?;
            write_json(&meta, &StageRecord { seconds: secs })?;
            Ok((q.to_f32_precision(), secs))
        })
    }

    /// Coresets of the training split, weighted by each mode's VI posterior.
    pub fn coresets(&self, t: EnsembleType, run: usize) -> Result<Vec<(Coreset, f64)>> {
        let ens = self.ensemble(t, TrainingKind::Standard, run)?;
        let posts = self.posteriors(t, run)?;
        let dir = self.stage_dir(t, run, "coreset")?;
        let labels = &self.splits.train.labels;
        let s = self.cfg.coreset.projection_dim;
        parallel_map(ens.members.len(), |j| {
            let path = dir.join(format!("member{j}.json"));
            let seed = derive_seed(self.cfg.seed, &[stream::PROJECTION, type_index(t), run as u64, j as u64]);
            if path.exists() {
                let f: CoresetFile = read_json(&path)?;
                let secs = read_json::<StageRecord>(&dir.join(format!("member{j}.time.json")))?.seconds;
                return Ok((f.coreset()?, secs));
            }
            let start = Instant::now();
            let feats = self.train_features(&ens.members[j])?;
            let data = LastLayerData::new(feats.view(), labels, self.splits.train.classes)?;
            let proj = project_loglik(&data, &posts[j].0, s, seed)?;
            let coreset = build_coreset(&proj, self.cfg.coreset.n_star)?;
            let secs = self.seconds(start);
            let mode_id = format!("{}/run{run}/member{j}", t.as_str());
            CoresetFile::new(mode_id, &coreset, s, seed).save(&path)?;
            write_json(&dir.join(format!("member{j}.time.json")), &StageRecord { seconds: secs })?;
            Ok((coreset, secs))
        })
    }

    /// NUTS samples of every mode's last layer on its coreset posterior,
    /// started at the VI mean.
    pub fn mcmc_samples(&self, t: EnsembleType, run: usize) -> Result<Vec<(SampleSet, f64)>> {
        let ens = self.ensemble(t, TrainingKind::Standard, run)?;
        let posts = self.posteriors(t, run)?;
        let cores = self.coresets(t, run)?;
        let dir = self.stage_dir(t, run, "mcmc")?;
        let prior = self.prior()?;
        let labels = &self.splits.train.labels;
        let nuts = self.cfg.mcmc.nuts_config();
        parallel_map(ens.members.len(), |j| {
            let path = dir.join(format!("member{j}.mcs"));
            let meta = dir.join(format!("member{j}.json"));
            let time = dir.join(format!("member{j}.time.json"));
            if path.exists() && meta.exists() && time.exists() {
                return Ok((SampleSet::load(&path)?, read_json::<StageRecord>(&time)?.seconds));
            }
            let start = Instant::now();
            let feats = self.train_features(&ens.members[j])?;
            let data = LastLayerData::new(feats.view(), labels, self.splits.train.classes)?;
            let target = HmcTarget::new(&cores[j].0, data, prior)?;
            let seed = derive_seed(self.cfg.seed, &[stream::NUTS, type_index(t), run as u64, j as u64]);
            let out = nuts_sample(&target, &posts[j].0.mean, &nuts, seed)?;
            let diag = single_chain_diagnostics(&out.draws)?;
            let report = SamplerReport::new(&out, &diag);
            if report.failed {
                log::warn!(
                    "{t} run {run} member {j}: {} of {} transitions diverged",
                    out.divergences,
                    out.draws.len()
                );
            }
            let secs = self.seconds(start);
            let set = SampleSet { samples: out.samples };
            set.save(&path)?;
            write_json(&meta, &report)?;
            write_json(&time, &StageRecord { seconds: secs })?;
            Ok((set.to_f32_precision(), secs))
        })
    }

    /// Test-set predictive distribution of each member under `method`, and
    /// the compute seconds attributable to each member.
    pub fn member_predictions(
        &self,
        t: EnsembleType,
        method: Method,
        run: usize,
    ) -> Result<(Vec<Array2<f64>>, Vec<f64>)> {
        let test = self.splits.test.inputs.view();
        let ens = self.ensemble(t, TrainingKind::of(method), run)?;
        let mut seconds = ens.seconds.clone();
        let preds = match method {
            Method::Sgd | Method::SgdTk => ens
                .members
                .iter()
                .map(|m| member_predictive(m, test, None))
                .collect::<Result<Vec<_>>>()?,
            Method::SgdT1 => ens
                .members
                .iter()
                .map(|m| member_predictive(&m.final_only(), test, None))
                .collect::<Result<Vec<_>>>()?,
            Method::Vi => {
                let posts = self.posteriors(t, run)?;
                let mut preds = Vec::with_capacity(posts.len());
                for (j, (m, (q, secs))) in ens.members.iter().zip(&posts).enumerate() {
                    let seed = derive_seed(self.cfg.seed, &[stream::VI_SAMPLE, type_index(t), run as u64, j as u64]);
                    let samples = sample_last_layer(q, self.cfg.vi.samples, seed)?;
                    preds.push(member_predictive(m, test, Some(&samples))?);
                    seconds[j] += secs;
                }
                preds
            }
            Method::Mcmc => {
                let posts = self.posteriors(t, run)?;
                let cores = self.coresets(t, run)?;
                let sets = self.mcmc_samples(t, run)?;
                let mut preds = Vec::with_capacity(sets.len());
                for (j, (m, (set, secs))) in ens.members.iter().zip(&sets).enumerate() {
                    preds.push(member_predictive(m, test, Some(&set.samples))?);
                    seconds[j] += secs + posts[j].1 + cores[j].1;
                }
                preds
            }
        };
        Ok((preds, seconds))
    }

    fn evaluate_cell(&self, t: EnsembleType, method: Method, run: usize) -> Result<CellStatus> {
        let (preds, seconds) = self.member_predictions(t, method, run)?;
        let labels = self.splits.test.labels.clone();
        let arch = self.cfg.architecture.name();
        let mut acc = RunningMean::new();
        let mut rows = Vec::with_capacity(preds.len());
        let mut member_brier = Vec::with_capacity(preds.len());
        let mut elapsed = 0.0;
        for (k, (p, secs)) in preds.iter().zip(&seconds).enumerate() {
            member_brier.push(brier(&PredictionSet::new(p.clone(), labels.clone())?));
            acc.push(p)?;
            elapsed += secs;
            let ps = PredictionSet::new(acc.current().expect("pushed").clone(), labels.clone())?;
            let s = Scores::evaluate(&ps, self.cfg.ece_bins)?;
            rows.push(ResultRow {
                arch: arch.clone(),
                ensemble_type: t,
                method,
                n_models: k + 1,
                run,
                brier: s.brier,
                accuracy: s.accuracy,
                ece: s.ece,
                wall_seconds: elapsed,
            });
        }
        Ok(CellStatus::Done { rows, member_brier })
    }

    fn cell_path(&self, t: EnsembleType, method: Method, run: usize) -> PathBuf {
        self.dir
            .join("cells")
            .join(format!("{}_{}_run{run}.json", t.as_str(), method.as_str()))
    }

    /// Evaluates one cell, or returns its stored record. Failures are
    /// recorded rather than propagated and are retried on the next run.
    pub fn run_cell(&self, t: EnsembleType, method: Method, run: usize) -> Result<CellRecord> {
        let path = self.cell_path(t, method, run);
        if path.exists() {
            let rec: CellRecord = read_json(&path)?;
            if matches!(rec.status, CellStatus::Done { .. }) {
                return Ok(rec);
            }
        }
        let status = match self.evaluate_cell(t, method, run) {
            Ok(s) => s,
            Err(e) => {
                log::error!("cell {t}/{method}/run{run} failed: {e}");
                CellStatus::Failed {
                    error_kind: e.kind().into(),
                    message: e.to_string(),
                }
            }
        };
        let rec = CellRecord {
            ensemble_type: t,
            method,
            run,
            status,
        };
        write_json(&path, &rec)?;
        Ok(rec)
    }

    fn cells(&self) -> Vec<(EnsembleType, Method, usize)> {
        let mut out = Vec::new();
        for &t in &self.cfg.ensemble_types {
            for run in 0..self.cfg.runs {
                for &m in &self.cfg.methods {
                    out.push((t, m, run));
                }
            }
        }
        out
    }

    fn needs(&self, pred: impl Fn(Method) -> bool) -> bool {
        self.cfg.methods.iter().any(|&m| pred(m))
    }

    /// Trains every SGD run the configured methods need.
    pub fn train_all(&self) -> Result<()> {
        for &t in &self.cfg.ensemble_types {
            for run in 0..self.cfg.runs {
                if self.needs(|m| !m.is_trajectory()) {
                    self.ensemble(t, TrainingKind::Standard, run)?;
                }
                if self.needs(|m| m.is_trajectory()) {
                    self.ensemble(t, TrainingKind::Trajectory, run)?;
                }
            }
        }
        Ok(())
    }

    /// Fits VI posteriors and builds coresets for every standard run.
    pub fn coreset_all(&self) -> Result<()> {
        for &t in &self.cfg.ensemble_types {
            for run in 0..self.cfg.runs {
                self.coresets(t, run)?;
            }
        }
        Ok(())
    }

    pub fn sample_all(&self) -> Result<()> {
        for &t in &self.cfg.ensemble_types {
            for run in 0..self.cfg.runs {
                self.mcmc_samples(t, run)?;
            }
        }
        Ok(())
    }

    /// Evaluates every cell and writes `results.csv` (and `failures.csv`
    /// when some cell failed) in canonical cell order.
    pub fn evaluate_all(&self) -> Result<Vec<CellRecord>> {
        let records = self
            .cells()
            .into_iter()
            .map(|(t, m, r)| self.run_cell(t, m, r))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        let mut failures = Vec::new();
        for rec in &records {
            match &rec.status {
                CellStatus::Done { rows: r, .. } => rows.extend(r.iter().cloned()),
                CellStatus::Failed { error_kind, message } => failures.push(FailureRow {
                    arch: self.cfg.architecture.name(),
                    ensemble_type: rec.ensemble_type,
                    method: rec.method,
                    run: rec.run,
                    error_kind: error_kind.clone(),
                    message: message.clone(),
                }),
            }
        }
        write_results(&self.dir, &rows)?;
        write_failures(&self.dir, &failures)?;
        Ok(records)
    }
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| BmaError::Validation(e.to_string()))?;
    pool.install(f)
}

/// Runs the whole matrix and writes the results and report.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<PathBuf> {
    with_pool(cfg.workers, || {
        let p = Pipeline::new(cfg)?;
        p.evaluate_all()?;
        crate::report::emit_report(&p.dir)?;
        Ok(p.dir)
    })
}
