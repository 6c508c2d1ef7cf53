use std::f64::consts::PI;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::gather;
use crate::error::{Error, Result};
use crate::network::{argmax_rows, softmax_cross_entropy, Mode, Network};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear warm-up over `warmup_epochs`, then cosine decay to zero.
    CosineWarmup { warmup_epochs: usize },
}

impl FromStr for LrSchedule {
    type Err = Error;

    /// `constant` or `cosine:W` with `W` warm-up epochs.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "constant" => Ok(LrSchedule::Constant),
            None if s == "cosine" => Ok(LrSchedule::CosineWarmup { warmup_epochs: 0 }),
            Some(("cosine", w)) => w
                .parse()
                .map(|warmup_epochs| LrSchedule::CosineWarmup { warmup_epochs })
                .map_err(|_| Error::config(format!("bad warm-up epochs in {s:?}"))),
            _ => Err(Error::config(format!("unknown schedule {s:?}; expected constant or cosine:W"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            lr_schedule: LrSchedule::CosineWarmup { warmup_epochs: 1 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("momentum must lie in [0, 1) and weight decay be non-negative"));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total` steps, with
    /// `per_epoch` steps per epoch.
    pub fn lr_at(&self, step: usize, total: usize, per_epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::CosineWarmup { warmup_epochs } => {
                let warm = (warmup_epochs * per_epoch).min(total);
                if step < warm {
                    self.learning_rate * (step + 1) as f64 / warm as f64
                } else {
                    let span = (total - warm).max(1) as f64;
                    0.5 * self.learning_rate * (1.0 + (PI * (step - warm) as f64 / span).cos())
                }
            }
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: IndexMap::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        let (mu, wd, lr) = (
            T::from_f64_lossy(self.momentum),
            T::from_f64_lossy(self.weight_decay),
            T::from_f64_lossy(lr),
        );
        for (name, g) in grads {
            let w = net.param(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(w.dims()));
            let mut nw = w.clone();
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(nw.data_mut()).zip(g.data()) {
                *vi = mu * *vi + (*gi + wd * *wi);
                *wi = *wi - lr * *vi;
            }
            net.set_param(name, nw)?;
        }
        Ok(())
    }
}

/// Inputs with one label per leading index.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub inputs: &'a Tensor<f32>,
    pub labels: &'a [usize],
}

impl<'a> Samples<'a> {
    pub fn new(inputs: &'a Tensor<f32>, labels: &'a [usize]) -> Result<Self> {
        if inputs.rank() < 2 || inputs.dims()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for inputs {:?}",
                labels.len(),
                inputs.dims()
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
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Epoch 0 is the untrained network; both splits are evaluated with
    /// running statistics.
    pub records: Vec<EpochRecord>,
    pub epochs_run: usize,
    /// First epoch whose validation accuracy reached the stop threshold.
    pub reached_at: Option<usize>,
}

impl TrainReport {
    pub fn val_accuracy(&self) -> Vec<f64> {
        self.split("val").map(|r| r.accuracy).collect()
    }

    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a EpochRecord> + 'a {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

/// Mean loss and accuracy with running statistics.
pub fn evaluate<T: Element>(net: &Network<T>, data: Samples<'_>, batch_size: usize) -> Result<(f64, f64)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::config("nothing to evaluate"));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = gather::<T>(data.inputs, chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        let logits = net.forward(&x)?;
        let (l, _) = softmax_cross_entropy(&logits, &y)?;
        loss += l * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Options beyond the optimizer settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop once validation accuracy reaches this value.
    pub stop_at: Option<f64>,
    /// Skip the epoch-0 evaluation of the training split.
    pub skip_initial_train_eval: bool,
}

/// Mini-batch SGD. The data order of epoch `e` is a shuffle seeded by
/// `(cfg.seed, e)`; a batch of one sample is dropped since it has no batch
/// statistics.
pub fn train<T: Element>(
    net: &mut Network<T>,
    train_set: Samples<'_>,
    val_set: Option<Samples<'_>>,
    cfg: &TrainConfig,
    opts: TrainOptions,
    mut on_record: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let classes = net.spec().output_size()?;
    if let Some(&bad) = train_set.labels.iter().chain(val_set.iter().flat_map(|v| v.labels)).find(|&&l| l >= classes) {
        return Err(Error::config(format!("label {bad} exceeds the {classes}-way head")));
    }
    let n = train_set.len();
    let per_epoch = n / cfg.batch_size + usize::from(n % cfg.batch_size > 1);
    if per_epoch == 0 {
        return Err(Error::config("training set smaller than two samples"));
    }
    let total = per_epoch * cfg.epochs;
    let mut report = TrainReport::default();
    let mut push = |report: &mut TrainReport, epoch, split: &str, (loss, accuracy): (f64, f64)| {
        let r = EpochRecord {
            epoch,
            split: split.to_string(),
            loss,
            accuracy,
        };
        on_record(&r);
        report.records.push(r);
    };
    if !opts.skip_initial_train_eval {
        push(&mut report, 0, "train", evaluate(net, train_set, cfg.batch_size)?);
    }
    if let Some(v) = val_set {
        let m = evaluate(net, v, cfg.batch_size)?;
        push(&mut report, 0, "val", m);
        if opts.stop_at.is_some_and(|s| m.1 >= s) {
            report.reached_at = Some(0);
            return Ok(report);
        }
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() > 1) {
            let x = gather::<T>(train_set.inputs, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (logits, tape) = net.forward_tape(&x, Mode::Train)?;
            let (loss, g) = softmax_cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            let grads = net.backward(&tape, &g)?;
            net.update_running_stats(&tape)?;
            opt.step(net, &grads, cfg.lr_at(step, total, per_epoch))?;
            step += 1;
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&y).filter(|(a, b)| a == b).count();
            seen += chunk.len();
        }
        push(&mut report, epoch, "train", (loss_sum / seen as f64, correct as f64 / seen as f64));
        report.epochs_run = epoch;
        if let Some(v) = val_set {
            let m = evaluate(net, v, cfg.batch_size)?;
            if !m.0.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: m.0 });
            }
            push(&mut report, epoch, "val", m);
            if opts.stop_at.is_some_and(|s| m.1 >= s) {
                report.reached_at = Some(epoch);
                break;
            }
        }
    }
    Ok(report)
}
