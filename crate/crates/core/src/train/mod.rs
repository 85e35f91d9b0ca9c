//! Seeded end-to-end demonstration: train a small bar-orientation
//! classifier with SGD, freeze its batch norms, merge the block and check
//! that the merged network predicts exactly the same.

mod data;
mod model;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use data::{generate_dataset, Split, SyntheticDataset, HORIZONTAL, IMAGE_SIDE, VERTICAL};
pub use model::{argmax, softmax, BatchStats, BnMode, Classifier, ClassifierGrads};

use crate::block::{HprfbConfig, RfType};
use crate::cost::Form;
use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::reparam::reparameterize;

/// Samples per forward pass when evaluating.
const EVAL_CHUNK: usize = 64;

/// SGD with momentum, weight decay and step learning-rate decay.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate every `decay_interval` epochs.
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            decay_factor: 0.2,
            decay_interval: 8,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 20,
            batch_size: 32,
            seed: 7,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lr) || !finite_nonneg(self.weight_decay) {
            return Err(Error::config("learning rate and weight decay must be finite and non-negative"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!("decay factor {} must lie in (0, 1]", self.decay_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config(format!("bn momentum {} must lie in (0, 1]", self.bn_momentum)));
        }
        if self.decay_interval == 0 || self.batch_size == 0 {
            return Err(Error::config("decay interval and batch size must be positive"));
        }
        Ok(())
    }

    /// Learning rate during the 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch / self.decay_interval) as i32)
    }
}

/// Exponential running averages of one branch's batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunningState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl BnRunningState {
    /// Zero mean, unit variance.
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }

    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - m) * self.mean[c] + m * batch_mean[c];
            self.var[c] = (1.0 - m) * self.var[c] + m * batch_var[c].max(0.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Training-set loss after the epoch, batch statistics over the whole set.
    pub train_loss: f64,
    /// Validation accuracy with the running statistics.
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Running statistics installed as the frozen batch-norm values.
    pub model: Classifier,
    pub running: Vec<BnRunningState>,
    /// Training-set loss before the first update.
    pub initial_loss: f64,
    pub history: Vec<EpochStats>,
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            epoch,
            message: format!("loss became {loss}"),
        })
    }
}

/// Trains `model` on `data.train` and installs the running batch-norm
/// statistics into its block.
pub fn train(mut model: Classifier, config: &TrainConfig, data: &SyntheticDataset) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = &data.train;
    if train_set.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let channels = model.channels();
    let mut running: Vec<BnRunningState> = model
        .block
        .branches()
        .iter()
        .map(|_| BnRunningState::new(channels, config.bn_momentum))
        .collect();
    let mut velocity: Vec<Vec<f64>> = model.params_mut().iter().map(|p| vec![0.0; p.len()]).collect();

    let initial_loss = model.loss(&train_set.images, &train_set.labels, BnMode::Batch)?;
    check_finite(initial_loss, 0)?;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let b = train_set.gather(batch);
            let (loss, grads, stats) = model.loss_and_grads(&b.images, &b.labels, BnMode::Batch, false)?;
            check_finite(loss, epoch + 1)?;
            let stats = stats.expect("batch mode reports statistics");
            for (r, (mean, var)) in running.iter_mut().zip(stats.mean.iter().zip(&stats.var)) {
                r.update(mean, var);
            }
            for ((p, g), v) in model.params_mut().into_iter().zip(grads.slices()).zip(&mut velocity) {
                for i in 0..p.len() {
                    v[i] = config.momentum * v[i] + g[i] + config.weight_decay * p[i];
                    p[i] -= lr * v[i];
                }
            }
        }
        let train_loss = model.loss(&train_set.images, &train_set.labels, BnMode::Batch)?;
        check_finite(train_loss, epoch + 1)?;
        let frozen = with_running_stats(&model, &running);
        history.push(EpochStats {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_accuracy: if data.val.is_empty() { f64::NAN } else { accuracy(&frozen, &data.val)? },
        });
    }
    Ok(TrainOutcome {
        model: with_running_stats(&model, &running),
        running,
        initial_loss,
        history,
    })
}

fn with_running_stats(model: &Classifier, running: &[BnRunningState]) -> Classifier {
    let mut m = model.clone();
    for (b, r) in m.block.branches_mut().iter_mut().zip(running) {
        b.bn.mean.clone_from(&r.mean);
        b.bn.var.clone_from(&r.var);
    }
    m
}

fn chunked_logits(split: &Split, mut f: impl FnMut(&Split) -> Result<Vec<Vec<f64>>>) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut out = Vec::with_capacity(split.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(f(&split.gather(chunk))?);
    }
    Ok(out)
}

/// Logits of the frozen-statistics network on every sample of `split`.
pub fn predict(model: &Classifier, split: &Split) -> Result<Vec<Vec<f64>>> {
    chunked_logits(split, |b| model.logits(&b.images, BnMode::Frozen))
}

/// Fraction of `split` classified correctly with frozen statistics.
pub fn accuracy(model: &Classifier, split: &Split) -> Result<f64> {
    let logits = predict(model, split)?;
    let hits = logits
        .iter()
        .zip(&split.labels)
        .filter(|(z, &l)| argmax(z) == l)
        .count();
    Ok(hits as f64 / split.len() as f64)
}

/// Agreement between the multi-branch and the merged network.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeReport {
    pub samples: usize,
    pub max_abs_logit_diff: f64,
    /// Samples whose predicted label differs between the two forms.
    pub argmax_mismatches: usize,
    pub tol: f64,
    pub params_train: u64,
    pub params_inference: u64,
    pub macs_train: u64,
    pub macs_inference: u64,
    pub merged_logits: Vec<Vec<f64>>,
}

impl MergeReport {
    pub fn passed(&self) -> bool {
        self.max_abs_logit_diff <= self.tol && self.argmax_mismatches == 0
    }
}

/// Default logit agreement tolerance for 64-bit merges.
pub const MERGE_TOL: f64 = 1e-9;

/// Merges the block of `model` (frozen statistics expected) and compares
/// logits of both forms on `split`.
pub fn merge_and_compare(model: &Classifier, split: &Split, tol: f64) -> Result<MergeReport> {
    let merged = reparameterize(&model.block)?;
    let train = predict(model, split)?;
    let infer = chunked_logits(split, |b| model.merged_logits(&b.images, &merged))?;
    let mut max_abs_logit_diff: f64 = 0.0;
    let mut argmax_mismatches = 0;
    for (a, b) in train.iter().zip(&infer) {
        for (u, v) in a.iter().zip(b) {
            max_abs_logit_diff = max_abs_logit_diff.max((u - v).abs());
        }
        if argmax(a) != argmax(b) {
            argmax_mismatches += 1;
        }
    }
    let side = split.images.dims().h;
    Ok(MergeReport {
        samples: split.len(),
        max_abs_logit_diff,
        argmax_mismatches,
        tol,
        params_train: model.param_count(Form::Train)?,
        params_inference: model.param_count(Form::Inference)?,
        macs_train: model.macs_per_image(Form::Train, side)?,
        macs_inference: model.macs_per_image(Form::Inference, side)?,
        merged_logits: infer,
    })
}

/// Block used by the demo: one input channel, all types at scales 3, 5, 7.
pub fn demo_block_config(channels: usize) -> Result<HprfbConfig> {
    HprfbConfig::new(vec![3, 5, 7], RfType::ALL.to_vec(), 1, channels, 1, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoOptions {
    pub samples: usize,
    pub noise: f64,
    pub channels: usize,
    pub merge_after: bool,
    pub train: TrainConfig,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            samples: 512,
            noise: 0.1,
            channels: 4,
            merge_after: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoReport {
    pub outcome: TrainOutcome,
    pub test_accuracy: f64,
    pub merge: Option<MergeReport>,
    /// Test-set class probabilities, from the merged network when merged.
    pub predictions: PredictionSet,
}

/// Generates the bars dataset, trains, evaluates on the test split and
/// optionally merges. Every seed derives from `opts.train.seed`.
pub fn run_demo(opts: &DemoOptions) -> Result<DemoReport> {
    let seed = opts.train.seed;
    let data = generate_dataset(opts.samples, opts.noise, seed)?;
    let model = Classifier::new(&demo_block_config(opts.channels)?, 2, seed.wrapping_add(1))?;
    let outcome = train(model, &opts.train, &data)?;
    let test_accuracy = accuracy(&outcome.model, &data.test)?;
    let merge = if opts.merge_after {
        Some(merge_and_compare(&outcome.model, &data.test, MERGE_TOL)?)
    } else {
        None
    };
    let logits = match &merge {
        Some(m) => m.merged_logits.clone(),
        None => predict(&outcome.model, &data.test)?,
    };
    let predictions = PredictionSet::new(
        logits.iter().map(|z| softmax(z)).collect(),
        data.test.labels.clone(),
    )?;
    Ok(DemoReport {
        outcome,
        test_accuracy,
        merge,
        predictions,
    })
}

impl fmt::Display for DemoReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "initial loss {:.4}", self.outcome.initial_loss)?;
        for e in &self.outcome.history {
            writeln!(
                f,
                "epoch {:>3}  lr {:.5}  loss {:.4}  val acc {:.4}",
                e.epoch, e.lr, e.train_loss, e.val_accuracy
            )?;
        }
        writeln!(f, "test accuracy {:.4}", self.test_accuracy)?;
        if let Some(m) = &self.merge {
            writeln!(
                f,
                "merge: {} samples, max |logit diff| {:.3e} (tol {:.0e}), argmax mismatches {} -> {}",
                m.samples,
                m.max_abs_logit_diff,
                m.tol,
                m.argmax_mismatches,
                if m.passed() { "ok" } else { "FAILED" }
            )?;
            writeln!(f, "params: train {}  inference {}", m.params_train, m.params_inference)?;
            writeln!(f, "MACs/image: train {}  inference {}", m.macs_train, m.macs_inference)?;
        }
        Ok(())
    }
}
