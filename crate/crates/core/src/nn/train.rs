use std::fmt::Write as _;

use log::warn;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{argmax, Mode, Network};
use super::spec::Op;
use super::tensor::Tensor;
use super::{NnError, Result};
use crate::dataset::{augment, AugmentationSpec};
use crate::imaging::Image;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Sgdm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    None,
    /// Multiply the rate by `drop_factor` every `drop_period` epochs.
    Piecewise { drop_period: usize, drop_factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub solver: Solver,
    pub initial_learn_rate: f64,
    pub momentum: f64,
    pub mini_batch_size: usize,
    pub max_epochs: usize,
    pub schedule: Schedule,
    pub l2_regularization: f64,
    pub shuffle_seed: u64,
    /// Validation accuracy is computed every this many epochs and after the last.
    pub validation_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Sgdm,
            initial_learn_rate: 0.01,
            momentum: 0.9,
            mini_batch_size: 32,
            max_epochs: 10,
            schedule: Schedule::None,
            l2_regularization: 1e-4,
            shuffle_seed: 0,
            validation_every: 1,
        }
    }
}

impl TrainConfig {
    /// Rate 0.001, batch 32, 10 epochs, rate multiplied by 0.01 every epoch.
    pub fn final_ripeness_recipe() -> Self {
        Self {
            initial_learn_rate: 0.001,
            max_epochs: 10,
            schedule: Schedule::Piecewise { drop_period: 1, drop_factor: 0.01 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if !(self.initial_learn_rate.is_finite() && self.initial_learn_rate > 0.0) {
            return bad(format!("initial_learn_rate {} must be > 0", self.initial_learn_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0,1)", self.momentum));
        }
        if self.mini_batch_size == 0 || self.max_epochs == 0 || self.validation_every == 0 {
            return bad("mini_batch_size, max_epochs and validation_every must be >= 1".into());
        }
        if let Schedule::Piecewise { drop_period, drop_factor } = self.schedule {
            if drop_period == 0 || !(drop_factor > 0.0 && drop_factor <= 1.0) {
                return bad(format!("piecewise schedule needs period >= 1 and factor in (0,1] (got {drop_period}, {drop_factor})"));
            }
        }
        if !(self.l2_regularization.is_finite() && self.l2_regularization >= 0.0) {
            return bad(format!("l2_regularization {} must be >= 0", self.l2_regularization));
        }
        if self.l2_regularization > 1.0 {
            warn!(
                "l2_regularization {} is unusually large; weights will be driven towards zero",
                self.l2_regularization
            );
        }
        Ok(())
    }
}

/// The decimal value a float prints as (shortest round-trip form), exactly.
fn decimal_rational(v: f64) -> BigRational {
    let s = format!("{v:e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent form");
    let exp: i64 = exp.parse().expect("integer exponent");
    let (neg, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => (true, m),
        None => (false, mantissa),
    };
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits: BigInt = format!("{int}{frac}").parse().expect("decimal digits");
    let scale = exp - frac.len() as i64;
    let ten = BigRational::from_integer(BigInt::from(10));
    let mut r = BigRational::from_integer(if neg { -digits } else { digits });
    let p = num_traits::pow(ten, scale.unsigned_abs() as usize);
    if scale >= 0 {
        r *= p;
    } else {
        r /= p;
    }
    r
}

/// Learning rate for a 1-based epoch: the initial rate times
/// `drop_factor^floor((epoch − 1) / drop_period)`. The product is formed
/// exactly from the decimal values of the configured numbers and rounded
/// once, so `0.01 · 0.1` is exactly `0.001`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let epoch = epoch.max(1);
    match config.schedule {
        Schedule::None => config.initial_learn_rate,
        Schedule::Piecewise { drop_period, drop_factor } => {
            let drops = (epoch - 1) / drop_period.max(1);
            if drops == 0 {
                return config.initial_learn_rate;
            }
            let mut f = BigRational::one();
            let base = decimal_rational(drop_factor);
            for _ in 0..drops {
                f *= &base;
            }
            let exact = decimal_rational(config.initial_learn_rate) * f;
            exact.to_f64().unwrap_or(0.0)
        }
    }
}

/// Mean cross-entropy of `softmax(logits)` and its gradient
/// `(softmax − onehot) / N`.
pub fn loss_and_grad<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(f64, Tensor<S>)> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        other => return Err(NnError::ShapeMismatch(format!("logits must be N x K, got {other:?}"))),
    };
    if labels.len() != n || n == 0 {
        return Err(NnError::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(NnError::LabelOutOfRange { label, num_classes: k });
        }
        let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[label];
        for (j, zj) in z.iter().enumerate() {
            let p = (zj - lse).exp();
            let t = if j == label { 1.0 } else { 0.0 };
            grad.push(S::of((p - t) / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Momentum buffers, one per weight and bias tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity<S> {
    weight: Vec<Vec<S>>,
    bias: Vec<Vec<S>>,
}

impl<S: Scalar> Velocity<S> {
    pub fn zeros(net: &Network<S>) -> Self {
        let z = |t: &Option<Tensor<S>>| t.as_ref().map_or(Vec::new(), |t| vec![S::zero(); t.len()]);
        Self {
            weight: net.params().iter().map(|p| z(&p.weight)).collect(),
            bias: net.params().iter().map(|p| z(&p.bias)).collect(),
        }
    }
}

fn sgdm_update<S: Scalar>(w: &mut [S], g: &[S], v: &mut [S], lr: S, momentum: S, l2: S) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let grad = *g + l2 * *w;
        *v = momentum * *v - lr * grad;
        *w += *v;
    }
}

/// One SGDM step on a batch at the given 1-based epoch. L2 applies to conv
/// and dense weights only. Returns the batch loss.
pub fn train_step<S: Scalar>(
    net: &mut Network<S>,
    batch: &Tensor<S>,
    labels: &[usize],
    config: &TrainConfig,
    velocity: &mut Velocity<S>,
    epoch: usize,
) -> Result<f64> {
    if epoch == 0 {
        return Err(NnError::InvalidConfig("epochs are numbered from 1".into()));
    }
    let (logits, cache) = net.forward(batch, Mode::Train)?;
    let (loss, dlogits) = loss_and_grad(&logits, labels)?;
    let grads = net.backward(&cache, &dlogits)?;
    for (i, g) in grads.iter().enumerate() {
        let finite = |v: &Option<Vec<S>>| v.as_ref().is_none_or(|v| v.iter().all(|x| x.is_finite()));
        if !finite(&g.weight) || !finite(&g.bias) {
            return Err(NnError::NonFiniteGradient { node: i });
        }
    }
    let lr = S::of(lr_at_epoch(config, epoch));
    let momentum = S::of(config.momentum);
    let l2 = S::of(config.l2_regularization);
    let weighted: Vec<bool> = net
        .spec()
        .nodes
        .iter()
        .map(|n| matches!(n.op, Op::Conv { .. } | Op::FullyConnected { .. }))
        .collect();
    for (i, (p, g)) in net.params_mut().iter_mut().zip(&grads).enumerate() {
        if let (Some(w), Some(gw)) = (p.weight.as_mut(), g.weight.as_ref()) {
            let decay = if weighted[i] { l2 } else { S::zero() };
            sgdm_update(w.data_mut(), gw, &mut velocity.weight[i], lr, momentum, decay);
        }
        if let (Some(b), Some(gb)) = (p.bias.as_mut(), g.bias.as_ref()) {
            sgdm_update(b.data_mut(), gb, &mut velocity.bias[i], lr, momentum, S::zero());
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,valid_acc";

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Validation accuracy is left empty on epochs where it was not computed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let valid = r.valid_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.train_acc, valid);
        }
        s
    }
}

/// Infer-mode accuracy and predicted class ids over planar samples.
pub fn evaluate_planar<S: Scalar>(
    net: &Network<S>,
    samples: &[Vec<S>],
    labels: &[usize],
    batch: usize,
) -> Result<(f64, Vec<usize>)> {
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&[S]> = chunk.iter().map(|s| s.as_slice()).collect();
        let x = Tensor::stack(&refs, net.input_shape())?;
        preds.extend(net.probabilities(&x)?.iter().map(|p| argmax(p)));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let acc = if samples.is_empty() { f64::NAN } else { correct as f64 / samples.len() as f64 };
    Ok((acc, preds))
}

/// Epoch-by-epoch SGDM training over in-memory images.
pub struct Trainer<S: Scalar> {
    net: Network<S>,
    config: TrainConfig,
    velocity: Velocity<S>,
    train_images: Vec<Image<S>>,
    train_x: Vec<Vec<S>>,
    train_y: Vec<usize>,
    valid_x: Vec<Vec<S>>,
    valid_y: Vec<usize>,
    augmentation: Option<(AugmentationSpec, u64)>,
    rng: ChaCha8Rng,
    history: TrainHistory,
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(NnError::LabelOutOfRange { label, num_classes: k }),
        None => Ok(()),
    }
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        net: Network<S>,
        config: TrainConfig,
        train: (&[Image<S>], &[usize]),
        valid: (&[Image<S>], &[usize]),
    ) -> Result<Self> {
        config.validate()?;
        if train.0.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        if train.0.len() != train.1.len() || valid.0.len() != valid.1.len() {
            return Err(NnError::ShapeMismatch("image and label counts differ".into()));
        }
        check_labels(train.1, net.num_classes())?;
        check_labels(valid.1, net.num_classes())?;
        let prep = |imgs: &[Image<S>]| imgs.iter().map(|i| net.prepare_image(i)).collect::<Result<Vec<_>>>();
        let train_x = prep(train.0)?;
        let valid_x = prep(valid.0)?;
        Ok(Self {
            velocity: Velocity::zeros(&net),
            rng: ChaCha8Rng::seed_from_u64(config.shuffle_seed),
            net,
            config,
            train_images: train.0.to_vec(),
            train_x,
            train_y: train.1.to_vec(),
            valid_x,
            valid_y: valid.1.to_vec(),
            augmentation: None,
            history: TrainHistory::default(),
        })
    }

    /// Re-draws an augmented copy of every training image each epoch.
    pub fn with_augmentation(mut self, spec: AugmentationSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        self.augmentation = Some((spec, seed));
        Ok(self)
    }

    pub fn network(&self) -> &Network<S> {
        &self.net
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.config.max_epochs
    }

    /// Runs one epoch: seeded shuffle, mini-batches (the last may be
    /// partial), then infer-mode accuracy on the training set and, when due,
    /// on the validation set.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.epochs_done() + 1;
        let lr = lr_at_epoch(&self.config, epoch);
        let mut order: Vec<usize> = (0..self.train_x.len()).collect();
        order.shuffle(&mut self.rng);
        let chw = self.net.input_shape();
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.config.mini_batch_size) {
            let augmented: Vec<Vec<S>>;
            let refs: Vec<&[S]> = match &self.augmentation {
                Some((spec, seed)) => {
                    augmented = chunk
                        .iter()
                        .map(|&i| {
                            let s = seed ^ ((epoch as u64) << 32) ^ i as u64;
                            let img = augment(&self.train_images[i], spec, s)?;
                            self.net.prepare_image(&img)
                        })
                        .collect::<Result<_>>()?;
                    augmented.iter().map(|v| v.as_slice()).collect()
                }
                None => chunk.iter().map(|&i| self.train_x[i].as_slice()).collect(),
            };
            let x = Tensor::stack(&refs, chw)?;
            let y: Vec<usize> = chunk.iter().map(|&i| self.train_y[i]).collect();
            let loss = train_step(&mut self.net, &x, &y, &self.config, &mut self.velocity, epoch)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let batch = self.config.mini_batch_size;
        let (train_acc, _) = evaluate_planar(&self.net, &self.train_x, &self.train_y, batch)?;
        let due = epoch.is_multiple_of(self.config.validation_every) || epoch == self.config.max_epochs;
        let valid_acc = if due && !self.valid_x.is_empty() {
            Some(evaluate_planar(&self.net, &self.valid_x, &self.valid_y, batch)?.0)
        } else {
            None
        };
        self.history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / self.train_x.len() as f64,
            train_acc,
            valid_acc,
        });
        Ok(self.history.epochs.last().expect("just pushed"))
    }

    /// Validation accuracy of the current network.
    pub fn validation_accuracy(&self) -> Result<f64> {
        Ok(evaluate_planar(&self.net, &self.valid_x, &self.valid_y, self.config.mini_batch_size)?.0)
    }

    pub fn finish(self) -> (Network<S>, TrainHistory) {
        (self.net, self.history)
    }
}

/// Trains `net` for `config.max_epochs` epochs.
pub fn train_classifier<S: Scalar>(
    net: Network<S>,
    train: (&[Image<S>], &[usize]),
    valid: (&[Image<S>], &[usize]),
    config: &TrainConfig,
) -> Result<(Network<S>, TrainHistory)> {
    let mut t = Trainer::new(net, config.clone(), train, valid)?;
    while !t.is_finished() {
        t.run_epoch()?;
    }
    Ok(t.finish())
}
