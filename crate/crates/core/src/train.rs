//! SGD with momentum, cosine schedule with linear warm-up, and the toy
//! training loop.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::block::{build_preset, Preset};
use crate::error::{Error, Result};
use crate::init::rng;
use crate::net::{NetSpec, Network};
use crate::params::{apply_bn_updates, Forward, ParamStore};
use crate::scalar::Scalar;
use crate::synthetic::{gen_synthetic, Dataset, Split, SyntheticTask, Task};
use crate::tensor::{Mode, Tensor5};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Run training forwards with running statistics and leave them untouched.
    pub freeze_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.02,
            warmup_epochs: 2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            seed: 42,
            train_size: 512,
            val_size: 256,
            freeze_bn: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad("warm-up must be shorter than training");
        }
        if self.base_lr.is_nan() || self.base_lr < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("learning rate, momentum or weight decay out of range");
        }
        if self.train_size == 0 || self.val_size == 0 {
            return bad("empty split");
        }
        Ok(())
    }
}

/// Learning rate for 0-based `epoch`: linear ramp to the base rate over the
/// warm-up epochs, then cosine decay towards zero.
pub fn cosine_warmup_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let (w, e) = (cfg.warmup_epochs, cfg.epochs);
    if epoch < w {
        return cfg.base_lr * (epoch + 1) as f64 / w as f64;
    }
    let span = e.saturating_sub(w).max(1) as f64;
    cfg.base_lr * 0.5 * (1.0 + (PI * (epoch - w) as f64 / span).cos())
}

/// `v <- mu v + g + wd theta; theta <- theta - lr v` for every parameter.
pub fn sgd_step<S: Scalar>(store: &mut ParamStore<S>, lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (S::lit(lr), S::lit(momentum), S::lit(weight_decay));
    for (_, p) in store.iter_mut() {
        let n = p.value.data().len();
        for i in 0..n {
            let theta = p.value.data()[i];
            let v = mu * p.momentum.data()[i] + p.grad.data()[i] + wd * theta;
            p.momentum.data_mut()[i] = v;
            p.value.data_mut()[i] = theta - lr * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn final_val_acc(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.val_acc)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for r in &self.rows {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EpochRow>, _>>().map_err(csv_err)?;
        Ok(Self { rows })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("metrics csv: {e}"))
}

/// Summed cross entropy and number of correct arg-max predictions.
fn score<S: Scalar>(logits: &Tensor5<S>, labels: &[usize]) -> (f64, usize) {
    let k = logits.dims().c;
    let mut loss = 0.0;
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        loss += lse - row[label];
        let best = (0..k).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        correct += usize::from(best == label);
    }
    (loss, correct)
}

/// Mean loss and accuracy with running statistics.
pub fn evaluate<S: Scalar>(net: &Network<S>, data: &Dataset<S>, batch: usize) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let (l, c) = score(&net.logits(&x, Mode::Eval)?, &y);
        loss += l;
        correct += c;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Row 0 is the untrained network; row `e` follows epoch `e`.
pub fn train<S: Scalar>(net: &mut Network<S>, train: &Dataset<S>, val: &Dataset<S>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (l0, a0) = evaluate(net, train, cfg.batch_size)?;
    let (_, v0) = evaluate(net, val, cfg.batch_size)?;
    let mut rows = vec![EpochRow {
        epoch: 0,
        lr: 0.0,
        train_loss: l0,
        train_acc: a0,
        val_acc: v0,
    }];
    let mode = if cfg.freeze_bn { Mode::Eval } else { Mode::Train };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffler = rng(cfg.seed ^ 0x5348_5546);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cosine_warmup_lr(epoch, cfg);
        order.shuffle(&mut shuffler);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let (grads, updates, logits) = {
                let mut fwd = Forward::new(&net.params, mode);
                let xi = fwd.input(x);
                let z = net.plan.forward(&mut fwd, xi)?;
                let loss = fwd.graph.softmax_cross_entropy(z, &y)?;
                let lv = fwd.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
                if !lv.is_finite() {
                    return Err(Error::Diverged { step, loss: lv });
                }
                (fwd.param_grads(loss)?, fwd.updates().to_vec(), fwd.value(z).clone())
            };
            let (l, c) = score(&logits, &y);
            loss_sum += l;
            correct += c;
            for (name, g) in grads {
                net.params.get_mut(&name)?.grad = g;
            }
            sgd_step(&mut net.params, lr, cfg.momentum, cfg.weight_decay);
            if !cfg.freeze_bn {
                apply_bn_updates(&mut net.params, &updates)?;
            }
            step += 1;
        }
        let (_, val_acc) = evaluate(net, val, cfg.batch_size)?;
        let n = train.len() as f64;
        rows.push(EpochRow {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_acc,
        });
    }
    Ok(TrainReport { rows })
}

/// The toy network for `task` built around `preset` blocks.
pub fn toy_spec(task: Task, preset: Preset) -> NetSpec {
    NetSpec {
        classes: task.classes(),
        ..NetSpec::toy(build_preset(preset))
    }
}

/// Generates both splits from `cfg.seed`, trains, and reports per epoch.
pub fn train_toy<S: Scalar>(task: Task, spec: &NetSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    let synth = SyntheticTask {
        task,
        frames: spec.frames,
        size: spec.resolution,
    };
    let tr = gen_synthetic::<S>(&synth, Split::Train, cfg.seed, cfg.train_size)?;
    let va = gen_synthetic::<S>(&synth, Split::Val, cfg.seed, cfg.val_size)?;
    let mut net = Network::<S>::new(spec, cfg.seed)?;
    train(&mut net, &tr, &va, cfg)
}
