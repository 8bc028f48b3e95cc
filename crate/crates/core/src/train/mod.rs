//! SGD with momentum and the training/evaluation loop.

pub mod gradcheck;

use std::fmt;
use std::io::Write;

use crate::codec::parse_key_values;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Mode, Param, ParamGroup};
use crate::model::Network;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Learning-rate multiplier of the smoother group.
pub const SMOOTHER_LR_SCALE: f64 = 0.1;

/// Classical momentum state: `v <- momentum * v - scale * lr * g; p <- p + v`.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub base_lr: f64,
    pub momentum: f64,
    pub main_scale: f64,
    pub smoother_scale: f64,
}

impl OptimizerState {
    pub fn new(params: &[&Param], base_lr: f64, momentum: f64) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("bad optimizer settings lr={base_lr} momentum={momentum}")));
        }
        Ok(OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            base_lr,
            momentum,
            main_scale: 1.0,
            smoother_scale: SMOOTHER_LR_SCALE,
        })
    }

    pub fn lr_scale(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.main_scale,
            ParamGroup::Smoother => self.smoother_scale,
        }
    }

    pub fn effective_lr(&self, group: ParamGroup) -> f64 {
        self.lr_scale(group) * self.base_lr
    }
}

/// One momentum update over `params` using their accumulated gradients.
/// Non-finite gradients abort before anything is modified.
pub fn sgd_momentum_step(params: &mut [&mut Param], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(Error::dim(format!("{} params, {} velocities", params.len(), state.velocity.len())));
    }
    for (p, v) in params.iter().zip(&state.velocity) {
        if p.grad.shape() != v.shape() || p.value.shape() != v.shape() {
            return Err(Error::dim(format!("{}: velocity shape {:?} vs {:?}", p.name, v.shape(), p.value.shape())));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at index {i} is {}", p.name, p.grad.data()[i])));
        }
    }
    let mu = state.momentum;
    let lrs: Vec<f64> = params.iter().map(|p| state.effective_lr(p.group)).collect();
    for ((p, v), lr) in params.iter_mut().zip(state.velocity.iter_mut()).zip(lrs) {
        let Param { value, grad, .. } = &mut **p;
        for ((x, vel), g) in value.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            *vel = mu * *vel - lr * g;
            *x += *vel;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            base_lr: 0.01,
            momentum: 0.9,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn to_text(&self) -> String {
        format!(
            "epochs={}\nbatch_size={}\nlr={}\nmomentum={}\nseed={}\neval_every={}\n",
            self.epochs, self.batch_size, self.base_lr, self.momentum, self.seed, self.eval_every
        )
    }

    /// Applies `key=value` overrides; unknown keys are an error.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            let bad = || Error::Config(format!("{k}: bad value {v:?}"));
            match k.as_str() {
                "epochs" => self.epochs = v.parse().map_err(|_| bad())?,
                "batch_size" => self.batch_size = v.parse().map_err(|_| bad())?,
                "lr" => self.base_lr = v.parse().map_err(|_| bad())?,
                "momentum" => self.momentum = v.parse().map_err(|_| bad())?,
                "seed" => self.seed = v.parse().map_err(|_| bad())?,
                "eval_every" => self.eval_every = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("unknown training key {k:?}"))),
            }
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply(&parse_key_values(text)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("bad lr={} momentum={}", self.base_lr, self.momentum)));
        }
        Ok(())
    }
}

/// Labelled images that can be served in batches.
pub trait Examples {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[B, C, H, W]` images for `indices`.
    fn images(&self, indices: &[usize]) -> Tensor;

    fn labels(&self, index: usize) -> &[u8];
}

impl Examples for Dataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn images(&self, indices: &[usize]) -> Tensor {
        self.batch_images(indices)
    }

    fn labels(&self, index: usize) -> &[u8] {
        &self.samples[index].labels
    }
}

/// Examples held as one `[N, C, H, W]` tensor.
#[derive(Clone, Debug)]
pub struct InMemory {
    pub images: Tensor,
    pub labels: Vec<Vec<u8>>,
}

impl Examples for InMemory {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn images(&self, indices: &[usize]) -> Tensor {
        let s = &self.images.shape()[1..];
        let size: usize = s.iter().product();
        let mut data = Vec::with_capacity(indices.len() * size);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * size..(i + 1) * size]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(s);
        Tensor::new(shape, data).expect("finite images")
    }

    fn labels(&self, index: usize) -> &[u8] {
        &self.labels[index]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogSplit {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: LogSplit,
    pub loss: f64,
    pub error: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let split = match self.split {
            LogSplit::Train => "train",
            LogSplit::Eval => "eval",
        };
        write!(f, "epoch={} split={} loss={} error={}", self.epoch, split, self.loss, self.error)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last_eval(&self) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == LogSplit::Eval)
    }

    pub fn last_train(&self) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == LogSplit::Train)
    }
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Mean loss and error rate over every prediction (one per group per image).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub error: f64,
    pub predictions: usize,
}

fn batch_targets(net: &Network, data: &dyn Examples, idx: &[usize]) -> Result<Vec<usize>> {
    let labels: Vec<&[u8]> = idx.iter().map(|&i| data.labels(i)).collect();
    net.targets(&labels)
}

pub fn evaluate(net: &mut Network, data: &dyn Examples, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let mut rng = Rng::new(0);
    let (mut loss, mut wrong, mut count) = (0.0, 0, 0);
    let order: Vec<usize> = (0..data.len()).collect();
    for idx in order.chunks(batch_size.max(1)) {
        let targets = batch_targets(net, data, idx)?;
        let logits = net.forward(&data.images(idx), Mode::Eval, &mut rng)?;
        let (l, _, w) = Network::loss_and_errors(&logits, &targets)?;
        loss += l * targets.len() as f64;
        wrong += w;
        count += targets.len();
    }
    Ok(Evaluation {
        loss: loss / count as f64,
        error: wrong as f64 / count as f64,
        predictions: count,
    })
}

/// Trains `net` in place. Each record is also written to `log` as one line.
/// Shuffling uses stream 1 of the seed and dropout stream 2.
pub fn train(
    net: &mut Network,
    train_set: &dyn Examples,
    eval_set: Option<&dyn Examples>,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainLog> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let root = Rng::new(config.seed);
    let mut shuffle_rng = root.split(1);
    let mut dropout_rng = root.split(2);
    let mut state = OptimizerState::new(&net.params(), config.base_lr, config.momentum)?;
    let mut out = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut loss_sum, mut wrong, mut count) = (0.0, 0, 0);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFinite(msg) => Error::Divergence { epoch, batch, msg },
                other => other,
            };
            let targets = batch_targets(net, train_set, idx)?;
            net.zero_grad();
            let logits = net.forward(&train_set.images(idx), Mode::Train, &mut dropout_rng).map_err(diverged)?;
            let (loss, grad, w) = Network::loss_and_errors(&logits, &targets).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(diverged(Error::NonFinite(format!("loss is {loss}"))));
            }
            net.backward(&grad).map_err(diverged)?;
            sgd_momentum_step(&mut net.params_mut(), &mut state).map_err(diverged)?;
            loss_sum += loss * targets.len() as f64;
            wrong += w;
            count += targets.len();
        }
        let mut records = vec![EpochRecord {
            epoch,
            split: LogSplit::Train,
            loss: loss_sum / count as f64,
            error: wrong as f64 / count as f64,
        }];
        if let Some(ev) = eval_set {
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                let e = evaluate(net, ev, config.batch_size)?;
                records.push(EpochRecord { epoch, split: LogSplit::Eval, loss: e.loss, error: e.error });
            }
        }
        for r in records {
            writeln!(log, "{r}")?;
            out.records.push(r);
        }
        log.flush()?;
    }
    Ok(out)
}
