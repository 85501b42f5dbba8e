use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, Network, Scalar, ScheduleState};
use crate::error::{BmaError, Result};
use crate::rng::rng_from_seed;

/// Borrowed inputs (one flattened example per row) with their class labels.
#[derive(Clone, Copy, Debug)]
pub struct Examples<'a, T> {
    pub inputs: ArrayView2<'a, T>,
    pub labels: &'a [usize],
}

impl<'a, T: Scalar> Examples<'a, T> {
    pub fn new(inputs: ArrayView2<'a, T>, labels: &'a [usize]) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(BmaError::Dimension(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Array2<T>, Vec<usize>) {
        (
            self.inputs.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strictly lower validation loss tolerated before
    /// stopping. Zero stops at the first non-improving epoch.
    pub patience: usize,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub first_rate: f64,
    pub last_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub first_rate: f64,
    pub last_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// `w - rate * g`: no momentum, no weight decay.
pub fn sgd_step<T: Scalar>(weights: &[T], g: &[T], rate: T) -> Result<Vec<T>> {
    if weights.len() != g.len() {
        return Err(BmaError::Dimension(format!(
            "{} weights but gradient of length {}",
            weights.len(),
            g.len()
        )));
    }
    Ok(weights.iter().zip(g).map(|(&w, &d)| w - rate * d).collect())
}

fn sgd_step_in_place<T: Scalar>(weights: &mut [T], g: &[T], rate: T) {
    for (w, &d) in weights.iter_mut().zip(g) {
        *w = *w - rate * d;
    }
}

const EVAL_CHUNK: usize = 512;

/// Mean cross-entropy and accuracy, evaluated in fixed-size chunks.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Examples<T>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(BmaError::Validation("empty evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.len());
        let x = data.inputs.slice(ndarray::s![start..end, ..]);
        let labels = &data.labels[start..end];
        let mut logits = net.logits(x)?;
        correct += logits
            .axis_iter(Axis(0))
            .zip(labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        super::log_softmax_rows(&mut logits);
        loss -= labels
            .iter()
            .enumerate()
            .map(|(i, &y)| logits[[i, y]].as_f64())
            .sum::<f64>();
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// One shuffled pass over `data`, one SGD step and one schedule tick per
/// mini-batch.
pub fn run_epoch<T: Scalar, R: Rng>(
    net: &mut Network<T>,
    data: &Examples<T>,
    schedule: &mut ScheduleState,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(BmaError::Validation("empty training set".into()));
    }
    if batch_size == 0 {
        return Err(BmaError::Validation("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut rate = 0.0;
    let mut first_rate = None;
    for idx in order.chunks(batch_size) {
        let (x, y) = data.gather(idx);
        let (loss, g) = net.loss_and_grad(x.view(), &y)?;
        let loss = loss.as_f64();
        if !loss.is_finite() {
            return Err(BmaError::numerical_at(
                "non-finite training loss",
                schedule.batch as usize,
            ));
        }
        rate = schedule.rate()?;
        first_rate.get_or_insert(rate);
        sgd_step_in_place(net.weights_mut(), &g, T::from_f64_lossy(rate));
        schedule.tick();
        total += loss * idx.len() as f64;
    }
    Ok(EpochStats {
        mean_loss: total / data.len() as f64,
        first_rate: first_rate.unwrap_or(rate),
        last_rate: rate,
    })
}

/// Mini-batch SGD with early stopping on validation loss.
///
/// Returns the weights from the epoch with the lowest validation loss.
/// Training stops once `max(patience, 1)` consecutive epochs fail to
/// improve on the best loss, or after `max_epochs`.
pub fn train<T: Scalar>(
    net: Network<T>,
    train_set: &Examples<T>,
    val_set: &Examples<T>,
    schedule: &mut ScheduleState,
    cfg: &TrainConfig,
) -> Result<(Network<T>, History)> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(BmaError::Validation(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let mut rng = rng_from_seed(cfg.rng_seed);
    let mut net = net;
    let mut best = net.clone();
    let mut history = History {
        epochs: Vec::with_capacity(cfg.max_epochs),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut stale = 0usize;
    for epoch in 1..=cfg.max_epochs {
        let stats = run_epoch(&mut net, train_set, schedule, cfg.batch_size, &mut rng)?;
        let (val_loss, val_accuracy) = evaluate(&net, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            val_loss,
            val_accuracy,
            first_rate: stats.first_rate,
            last_rate: stats.last_rate,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best.weights_mut().copy_from_slice(net.weights());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                history.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    if history.best_epoch == 0 {
        return Err(BmaError::numerical("validation loss never finite"));
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    /// Two separable blobs of 10 points each.
    fn separable_toy() -> (Array2<f64>, Vec<usize>) {
        let mut rng = rng_from_seed(1);
        let mut x = Array2::zeros((20, 2));
        let mut y = vec![0; 20];
        for i in 0..20 {
            let label = i % 2;
            let centre = if label == 0 { -2.0 } else { 2.0 };
            x[[i, 0]] = centre + rng.random_range(-0.5..0.5);
            x[[i, 1]] = rng.random_range(-1.0..1.0);
            y[i] = label;
        }
        (x, y)
    }

    #[test]
    fn sgd_step_arithmetic() {
        assert_eq!(sgd_step(&[1.0, 1.0], &[1.0, -1.0], 0.5).unwrap(), vec![0.5, 1.5]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[3.0, 4.0], 0.0).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(
            sgd_step(&[1.0], &[1.0, 2.0], 0.1),
            Err(BmaError::Dimension(_))
        ));
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let w = [0.25, -1.5, 3.0];
        let g1 = [0.5, 0.25, -1.0];
        let g2 = [-0.75, 1.0, 0.5];
        let two = sgd_step(&sgd_step(&w, &g1, 0.5).unwrap(), &g2, 0.5).unwrap();
        let summed: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let one = sgd_step(&w, &summed, 0.5).unwrap();
        assert_eq!(two, one);
    }

    #[test]
    fn separable_toy_is_fit_perfectly() {
        let (x, y) = separable_toy();
        let data = Examples::new(x.view(), &y).unwrap();
        let net = Network::<f64>::new(Architecture::mlp(2, &[8], 2), 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            patience: 50,
            rng_seed: 2,
        };
        let mut sched = ScheduleState::decaying(0.1, 50 * 5);
        let (net, history) = train(net, &data, &data, &mut sched, &cfg).unwrap();
        assert!(history.epochs.len() <= 50);
        assert_eq!(net.accuracy(x.view(), &y).unwrap(), 1.0);
    }

    #[test]
    fn zero_patience_stops_after_first_worse_epoch() {
        let (x, y) = separable_toy();
        let data = Examples::new(x.view(), &y).unwrap();
        // Validation labels are flipped, so fitting the training data makes
        // validation loss worse after the first epoch.
        let flipped: Vec<usize> = y.iter().map(|&v| 1 - v).collect();
        let val = Examples::new(x.view(), &flipped).unwrap();
        let net = Network::<f64>::new(Architecture::mlp(2, &[8], 2), 4).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 50,
            patience: 0,
            rng_seed: 2,
        };
        let mut sched = ScheduleState::decaying(0.1, 50 * 5);
        let (_, history) = train(net, &data, &val, &mut sched, &cfg).unwrap();
        assert!(history.epochs[1].val_loss > history.epochs[0].val_loss);
        assert_eq!(history.epochs.len(), 2);
        assert_eq!(history.best_epoch, 1);
        assert!(history.stopped_early);
    }

    #[test]
    fn returned_weights_have_best_validation_loss() {
        let (x, y) = separable_toy();
        let data = Examples::new(x.view(), &y).unwrap();
        let flipped: Vec<usize> = y.iter().map(|&v| 1 - v).collect();
        let val = Examples::new(x.view(), &flipped).unwrap();
        let net = Network::<f64>::new(Architecture::mlp(2, &[8], 2), 8).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_epochs: 20,
            patience: 3,
            rng_seed: 5,
        };
        let mut sched = ScheduleState::decaying(0.1, 20 * 5);
        let (best, history) = train(net, &data, &val, &mut sched, &cfg).unwrap();
        let (val_loss, _) = evaluate(&best, &val).unwrap();
        assert_eq!(val_loss, history.best_val_loss);
        let min = history
            .epochs
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(val_loss, min);
    }

    #[test]
    fn same_seed_gives_identical_trajectories() {
        let (x, y) = separable_toy();
        let run = || {
            let net = Network::<f32>::new(Architecture::mlp(2, &[8], 2), 4).unwrap();
            let cfg = TrainConfig {
                batch_size: 3,
                max_epochs: 5,
                patience: 10,
                rng_seed: 9,
            };
            let xf = x.mapv(|v| v as f32);
            let d = Examples::new(xf.view(), &y).unwrap();
            let mut sched = ScheduleState::decaying(0.1, 5 * 7);
            train(net, &d, &d, &mut sched, &cfg).unwrap()
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(ha, hb);
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let x = Array2::<f64>::zeros((0, 2));
        let empty = Examples::new(x.view(), &[]).unwrap();
        let net = Network::<f64>::new(Architecture::mlp(2, &[], 2), 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            max_epochs: 1,
            patience: 0,
            rng_seed: 0,
        };
        let mut sched = ScheduleState::decaying(0.1, 1);
        assert!(matches!(
            train(net, &empty, &empty, &mut sched, &cfg),
            Err(BmaError::Validation(_))
        ));
    }

    #[test]
    fn schedule_advances_once_per_batch() {
        let (x, y) = separable_toy();
        let data = Examples::new(x.view(), &y).unwrap();
        let mut net = Network::<f64>::new(Architecture::mlp(2, &[], 2), 0).unwrap();
        let mut sched = ScheduleState::decaying(0.1, 100);
        let mut rng = rng_from_seed(0);
        run_epoch(&mut net, &data, &mut sched, 6, &mut rng).unwrap();
        assert_eq!(sched.batch, 4);
    }
}
