//! Weight initialisation, RMSprop and Adam, and the epoch training loop.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::augment::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::network::{bce_loss, Mode, NetVariant, Network};
use crate::tensor::{Scalar, Tensor};

/// Glorot-uniform samples in `[-L, L]` with `L = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut (impl Rng + ?Sized),
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::validation("fan-in and fan-out must be at least 1"));
    }
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(shape, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epsilon: f64,
    /// Penalty weight on `Σ‖W‖²`; applied by the backward pass.
    pub l2_lambda: f64,
}

impl OptimizerConfig {
    pub fn rmsprop() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmsProp,
            learning_rate: 1e-4,
            rmsprop_decay: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epsilon: 1e-7,
            l2_lambda: 0.0,
        }
    }

    pub fn adam() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            epsilon: 1e-8,
            ..Self::rmsprop()
        }
    }

    /// `learning_rate == 0` is accepted so that a run can be a no-op.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::validation(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        unit("rmsprop decay", self.rmsprop_decay)?;
        unit("adam beta1", self.adam_beta1)?;
        unit("adam beta2", self.adam_beta2)?;
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::validation(format!("l2 lambda must be ≥ 0, got {}", self.l2_lambda)));
        }
        Ok(())
    }
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what} shape differs from parameter shape");
}

/// `v ← ρv + (1−ρ)g²; θ ← θ − lr·g/(√v + ε)`
pub fn rmsprop_step<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, sq_avg: &mut Tensor<T>, cfg: &OptimizerConfig) {
    check_same_shape(param, grad, "gradient");
    check_same_shape(param, sq_avg, "moment");
    let rho = T::from_f64(cfg.rmsprop_decay);
    let one_minus = T::from_f64(1.0 - cfg.rmsprop_decay);
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(sq_avg.data_mut()) {
        *v = rho * *v + one_minus * g * g;
        *p = *p - lr * g / (v.sqrt() + eps);
    }
}

/// Bias-corrected Adam update for step `t ≥ 1`.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    first: &mut Tensor<T>,
    second: &mut Tensor<T>,
    t: u64,
    cfg: &OptimizerConfig,
) {
    check_same_shape(param, grad, "gradient");
    check_same_shape(param, first, "first moment");
    check_same_shape(param, second, "second moment");
    assert!(t >= 1, "Adam steps are counted from 1");
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let exp = i32::try_from(t).unwrap_or(i32::MAX);
    let bc1 = T::from_f64(1.0 - b1.powi(exp));
    let bc2 = T::from_f64(1.0 - b2.powi(exp));
    let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
    let one = T::one();
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(first.data_mut())
        .zip(second.data_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Moment buffers for every parameter of one network.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    /// RMSprop squared-gradient average, or Adam first moment.
    pub first: Vec<Tensor<T>>,
    /// Adam second moment; empty for RMSprop.
    pub second: Vec<Tensor<T>>,
    pub step_count: u64,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar> {
    cfg: OptimizerConfig,
    state: OptimizerState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, net: &Network<T>) -> Result<Self> {
        cfg.validate()?;
        let zeros = || net.params().iter().map(Tensor::zeros_like).collect::<Vec<_>>();
        let second = match cfg.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::RmsProp => Vec::new(),
        };
        Ok(Optimizer {
            state: OptimizerState {
                first: zeros(),
                second,
                step_count: 0,
            },
            cfg,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptimizerState<T> {
        &self.state
    }

    /// Applies the network's current gradients.
    pub fn step(&mut self, net: &mut Network<T>) {
        self.state.step_count += 1;
        let t = self.state.step_count;
        match self.cfg.kind {
            OptimizerKind::RmsProp => {
                for ((p, g), v) in net.params_and_grads().zip(&mut self.state.first) {
                    rmsprop_step(p, g, v, &self.cfg);
                }
            }
            OptimizerKind::Adam => {
                let moments = self.state.first.iter_mut().zip(&mut self.state.second);
                for ((p, g), (m, v)) in net.params_and_grads().zip(moments) {
                    adam_step(p, g, m, v, t, &self.cfg);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augmentation: AugmentConfig,
    pub optimizer: OptimizerConfig,
    /// Dropout and activation flavour of the network being trained.
    pub variant: NetVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            seed: 0,
            augmentation: AugmentConfig::default(),
            optimizer: OptimizerConfig::adam(),
            variant: NetVariant::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epoch count must be at least 1"));
        }
        self.augmentation.validate()?;
        self.optimizer.validate()
    }
}

/// Labelled samples, read one at a time.
pub trait Dataset<T: Scalar> {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample tensor shape.
    fn sample_shape(&self) -> &[usize];

    /// Sample `index` and its label in `[0, 1]`.
    fn sample(&self, index: usize) -> Result<(Tensor<T>, T)>;
}

#[derive(Clone, Debug)]
pub struct InMemoryDataset<T: Scalar> {
    shape: Vec<usize>,
    samples: Vec<Tensor<T>>,
    labels: Vec<T>,
}

impl<T: Scalar> InMemoryDataset<T> {
    pub fn new(samples: Vec<Tensor<T>>, labels: Vec<T>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::validation("dataset has no samples"))?;
        if samples.len() != labels.len() {
            return Err(Error::validation(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        let shape = first.shape().to_vec();
        if let Some(bad) = samples.iter().find(|s| s.shape() != shape.as_slice()) {
            return Err(Error::shape(format!("sample shape {:?} differs from {shape:?}", bad.shape())));
        }
        Ok(InMemoryDataset { shape, samples, labels })
    }

    /// Splits the rows of an `N×...` tensor into samples.
    pub fn from_batch(batch: &Tensor<T>, labels: Vec<T>) -> Result<Self> {
        let shape = &batch.shape()[1..];
        let samples = (0..batch.shape()[0])
            .map(|i| Tensor::from_vec(shape, batch.item(i).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, labels)
    }

    pub fn labels(&self) -> &[T] {
        &self.labels
    }
}

impl<T: Scalar> Dataset<T> for InMemoryDataset<T> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    fn sample(&self, index: usize) -> Result<(Tensor<T>, T)> {
        Ok((self.samples[index].clone(), self.labels[index]))
    }
}

/// Stacks the given samples into an `N×...` batch and an `N×1` label tensor.
pub fn load_batch<T: Scalar>(data: &dyn Dataset<T>, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut items = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let (x, y) = data.sample(i)?;
        items.push(x);
        labels.push(y);
    }
    let n = labels.len();
    Ok((Tensor::stack(&items)?, Tensor::from_vec(&[n, 1], labels)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochHistory {
    pub rows: Vec<EpochRow>,
}

impl EpochHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_loss,val_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome<T: Scalar> {
    pub history: EpochHistory,
    /// 1-based epoch with the highest validation accuracy (earliest on ties).
    pub best_epoch: usize,
    /// Parameters at the end of `best_epoch`.
    pub best_params: Vec<Tensor<T>>,
    /// Wall time of the first optimisation step.
    pub first_step: Duration,
}

fn correct<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> usize {
    let half = T::from_f64(0.5);
    probs
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(&p, &y)| (p >= half) == (y >= half))
        .count()
}

/// Eval-mode loss (BCE plus the L2 penalty) and accuracy over a dataset.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &dyn Dataset<T>, batch_size: usize, l2_lambda: f64) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    let mut loss = 0.0;
    let mut hits = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = load_batch(data, chunk)?;
        let p = net.predict(&x)?;
        loss += bce_loss(&p, &y)? * chunk.len() as f64;
        hits += correct(&p, &y);
    }
    let n = data.len() as f64;
    Ok((loss / n + l2_lambda * net.weight_sq_norm(), hits as f64 / n))
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const AUGMENT_STREAM_BASE: u64 = 1 << 40;

/// Trains for `cfg.epochs` epochs.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    train: &dyn Dataset<T>,
    val: &dyn Dataset<T>,
    cfg: &TrainConfig,
) -> Result<FitOutcome<T>> {
    fit_with(net, train, val, cfg, |_, _| ControlFlow::Continue(()))
}

/// [`fit`] with a hook called after every epoch; returning
/// `ControlFlow::Break` ends training after that epoch.
///
/// The training set is reshuffled every epoch from the run seed and the
/// last partial batch is kept. Sample `i` in epoch `e` is augmented with its
/// own generator derived from `(seed, e, i)`, so augmentation does not depend
/// on batch composition. Validation never sees augmentation or dropout.
pub fn fit_with<T: Scalar>(
    net: &mut Network<T>,
    train: &dyn Dataset<T>,
    val: &dyn Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow, &Network<T>) -> ControlFlow<()>,
) -> Result<FitOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::validation("training and validation sets must be non-empty"));
    }
    for (name, data) in [("training", train), ("validation", val)] {
        if data.sample_shape() != net.input_shape() {
            return Err(Error::shape(format!(
                "{name} samples are {:?} but the network expects {:?}",
                data.sample_shape(),
                net.input_shape()
            )));
        }
    }
    let image_input = net.input_shape().len() == 3;
    let l2 = cfg.optimizer.l2_lambda;
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), net)?;
    let mut shuffle_rng = augment::substream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = augment::substream(cfg.seed, DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut history = EpochHistory::default();
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut first_step = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let started = Instant::now();
            let (mut x, y) = load_batch(train, chunk)?;
            if cfg.augmentation.enabled && image_input {
                let shape = x.shape()[1..].to_vec();
                for (slot, &index) in chunk.iter().enumerate() {
                    let stream = AUGMENT_STREAM_BASE + ((epoch as u64) << 32) + index as u64;
                    let mut rng = augment::substream(cfg.seed, stream);
                    let image = Tensor::from_vec(&shape, x.item(slot).to_vec())?;
                    let warped = augment::random_affine(&image, &cfg.augmentation, &mut rng)?;
                    x.item_mut(slot).copy_from_slice(warped.data());
                }
            }
            let pass = net.forward(&x, Mode::Train(&mut dropout_rng))?;
            let loss = net.backward(&pass, &y, l2)?;
            optimizer.step(net);
            if !loss.is_finite() {
                return Err(Error::validation(format!("training loss diverged at epoch {epoch}")));
            }
            loss_sum += loss * chunk.len() as f64;
            hits += correct(pass.output(), &y);
            first_step.get_or_insert_with(|| started.elapsed());
        }
        let n = train.len() as f64;
        let (val_loss, val_accuracy) = evaluate(net, val, cfg.batch_size, l2)?;
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: hits as f64 / n,
            val_loss,
            val_accuracy,
        };
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, net.params().to_vec()));
        }
        let flow = on_epoch(&row, net);
        history.rows.push(row);
        if flow.is_break() {
            break;
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        history,
        best_epoch,
        best_params,
        first_step: first_step.unwrap_or_default(),
    })
}
