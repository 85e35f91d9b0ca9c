//! A minimal classifier around one block: block, rectifier, global average
//! pool, linear head, softmax cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{backward, forward_train, init_weights, BranchGradient, HprfbConfig, HprfbWeights};
use crate::cost::{count_macs, count_params, Form};
use crate::error::{Error, Result};
use crate::reparam::MergedConv;
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, Dims4, Tensor4,
};

/// How the block's batch norms normalize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch, as during training.
    Batch,
    /// The stored mean and variance, as at inference.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub block: HprfbWeights<f64>,
    /// `classes x channels`, row-major.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub classes: usize,
}

/// Per-branch, per-channel statistics of one batch (variance biased).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierGrads {
    pub branches: Vec<BranchGradient<f64>>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub d_input: Option<Tensor4<f64>>,
}

impl ClassifierGrads {
    /// Gradient slices in [`Classifier::params_mut`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.branches {
            out.push(b.d_kernel.data());
            out.push(&b.d_bias);
            out.push(&b.d_gamma);
            out.push(&b.d_beta);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }
}

struct BranchCache {
    xhat: Tensor4<f64>,
    inv_std: Vec<f64>,
}

struct Forward {
    h: Tensor4<f64>,
    pooled: Vec<f64>,
    logits: Vec<Vec<f64>>,
    branches: Vec<BranchCache>,
    stats: Option<BatchStats>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Classifier {
    /// Block from [`init_weights`], head uniform in `±1/sqrt(channels)`.
    pub fn new(config: &HprfbConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        let block = init_weights(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
        let c = config.out_channels;
        let bound = 1.0 / (c as f64).sqrt();
        let head_weight = (0..classes * c).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            block,
            head_weight,
            head_bias: vec![0.0; classes],
            classes,
        })
    }

    pub fn channels(&self) -> usize {
        self.block.config().out_channels
    }

    /// Trainable parameters: per branch kernel, conv bias, gamma, beta; then
    /// head weight and head bias.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in self.block.branches_mut() {
            out.push(b.kernel.data_mut());
            out.push(&mut b.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Stored parameter count of the classifier with the block in `form`.
    pub fn param_count(&self, form: Form) -> Result<u64> {
        Ok(count_params(self.block.config(), form)? + (self.head_weight.len() + self.head_bias.len()) as u64)
    }

    /// MACs for one image of size `side x side`, head included.
    pub fn macs_per_image(&self, form: Form, side: usize) -> Result<u64> {
        let cfg = self.block.config();
        let input = Dims4::new(1, cfg.in_channels, side, side);
        Ok(count_macs(cfg, form, input)? + self.head_weight.len() as u64)
    }

    fn head(&self, h: &Tensor4<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = h.dims();
        let plane = d.h * d.w;
        let mut pooled = vec![0.0; d.n * d.c];
        for (i, p) in pooled.iter_mut().enumerate() {
            let s: f64 = h.data()[i * plane..(i + 1) * plane].iter().map(|&v| v.max(0.0)).sum();
            *p = s / plane as f64;
        }
        let logits = (0..d.n)
            .map(|n| {
                (0..self.classes)
                    .map(|k| {
                        let row = &self.head_weight[k * d.c..(k + 1) * d.c];
                        self.head_bias[k]
                            + row.iter().zip(&pooled[n * d.c..(n + 1) * d.c]).map(|(w, f)| w * f).sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        (pooled, logits)
    }

    fn forward(&self, x: &Tensor4<f64>, mode: BnMode) -> Result<Forward> {
        if self.head_weight.len() != self.classes * self.channels() || self.head_bias.len() != self.classes {
            return Err(Error::shape("head does not match classes x channels"));
        }
        match mode {
            BnMode::Frozen => {
                let h = forward_train(x, &self.block)?;
                let (pooled, logits) = self.head(&h);
                Ok(Forward { h, pooled, logits, branches: Vec::new(), stats: None })
            }
            BnMode::Batch => {
                let mut h: Option<Tensor4<f64>> = None;
                let mut caches = Vec::with_capacity(self.block.branches().len());
                let mut stats = BatchStats { mean: Vec::new(), var: Vec::new() };
                for b in self.block.branches() {
                    let z = conv2d_forward(x, &b.kernel, &b.bias, self.block.branch_geometry(b))?;
                    let d = z.dims();
                    let plane = d.h * d.w;
                    let m = (d.n * plane) as f64;
                    let mut mean = vec![0.0; d.c];
                    let mut var = vec![0.0; d.c];
                    for (i, &v) in z.data().iter().enumerate() {
                        mean[(i / plane) % d.c] += v;
                    }
                    mean.iter_mut().for_each(|v| *v /= m);
                    for (i, &v) in z.data().iter().enumerate() {
                        let c = (i / plane) % d.c;
                        var[c] += (v - mean[c]) * (v - mean[c]);
                    }
                    var.iter_mut().for_each(|v| *v /= m);
                    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + b.bn.eps).sqrt()).collect();
                    let xhat = z.map_indexed(|i, v| {
                        let c = (i / plane) % d.c;
                        (v - mean[c]) * inv_std[c]
                    });
                    let y = xhat.map_indexed(|i, v| {
                        let c = (i / plane) % d.c;
                        b.bn.gamma[c] * v + b.bn.beta[c]
                    });
                    match h.as_mut() {
                        None => h = Some(y),
                        Some(acc) => acc.add_assign(&y)?,
                    }
                    caches.push(BranchCache { xhat, inv_std });
                    stats.mean.push(mean);
                    stats.var.push(var);
                }
                let h = h.expect("a block has at least one branch");
                let (pooled, logits) = self.head(&h);
                Ok(Forward { h, pooled, logits, branches: caches, stats: Some(stats) })
            }
        }
    }

    pub fn logits(&self, x: &Tensor4<f64>, mode: BnMode) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(x, mode)?.logits)
    }

    /// Logits with the block replaced by its merged convolution.
    pub fn merged_logits(&self, x: &Tensor4<f64>, merged: &MergedConv<f64>) -> Result<Vec<Vec<f64>>> {
        let h = crate::block::forward_inference(x, merged)?;
        Ok(self.head(&h).1)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, x: &Tensor4<f64>, labels: &[usize], mode: BnMode) -> Result<f64> {
        let f = self.forward(x, mode)?;
        mean_loss(&f.logits, labels)
    }

    /// Loss, analytic gradients of every trainable parameter (and of the
    /// input when `with_input`), and the batch statistics in [`BnMode::Batch`].
    pub fn loss_and_grads(
        &self,
        x: &Tensor4<f64>,
        labels: &[usize],
        mode: BnMode,
        with_input: bool,
    ) -> Result<(f64, ClassifierGrads, Option<BatchStats>)> {
        let f = self.forward(x, mode)?;
        let loss = mean_loss(&f.logits, labels)?;
        let d = f.h.dims();
        let c = d.c;
        let n = d.n as f64;

        let mut head_weight = vec![0.0; self.head_weight.len()];
        let mut head_bias = vec![0.0; self.classes];
        let mut d_pooled = vec![0.0; d.n * c];
        for (s, logits) in f.logits.iter().enumerate() {
            let mut g = softmax(logits);
            g[labels[s]] -= 1.0;
            for (k, gk) in g.iter().enumerate() {
                let gk = gk / n;
                head_bias[k] += gk;
                for ch in 0..c {
                    head_weight[k * c + ch] += gk * f.pooled[s * c + ch];
                    d_pooled[s * c + ch] += gk * self.head_weight[k * c + ch];
                }
            }
        }
        let plane = d.h * d.w;
        let dh = f.h.map_indexed(|i, v| {
            if v > 0.0 {
                d_pooled[i / plane] / plane as f64
            } else {
                0.0
            }
        });

        let (branches, d_input) = match mode {
            BnMode::Frozen => {
                let g = backward(x, &self.block, &dh)?;
                (g.branches, with_input.then_some(g.d_input))
            }
            BnMode::Batch => {
                let mut d_input = with_input.then(|| Tensor4::zeros(x.dims()));
                let mut grads = Vec::with_capacity(f.branches.len());
                for (b, cache) in self.block.branches().iter().zip(&f.branches) {
                    let m = (d.n * plane) as f64;
                    let mut d_gamma = vec![0.0; c];
                    let mut d_beta = vec![0.0; c];
                    for (i, (&g, &xh)) in dh.data().iter().zip(cache.xhat.data()).enumerate() {
                        let ch = (i / plane) % c;
                        d_beta[ch] += g;
                        d_gamma[ch] += g * xh;
                    }
                    // with dxhat = gamma * dy, the sums of dxhat and dxhat * xhat
                    // are gamma * d_beta and gamma * d_gamma
                    let dz = dh.map_indexed(|i, g| {
                        let ch = (i / plane) % c;
                        let gamma = b.bn.gamma[ch];
                        let xh = cache.xhat.data()[i];
                        cache.inv_std[ch] / m
                            * (m * gamma * g - gamma * d_beta[ch] - xh * gamma * d_gamma[ch])
                    });
                    let geometry = self.block.branch_geometry(b);
                    let (d_kernel, d_bias) = conv2d_backward_weight(x, &dz, geometry, b.kernel.dims())?;
                    if let Some(di) = d_input.as_mut() {
                        di.add_assign(&conv2d_backward_input(&dz, &b.kernel, geometry, x.dims())?)?;
                    }
                    grads.push(BranchGradient {
                        scale: b.scale,
                        rf_type: b.rf_type,
                        d_kernel,
                        d_bias,
                        d_gamma,
                        d_beta,
                    });
                }
                (grads, d_input)
            }
        };
        Ok((
            loss,
            ClassifierGrads { branches, head_weight, head_bias, d_input },
            f.stats,
        ))
    }
}

fn mean_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} labels for {} samples",
            labels.len(),
            logits.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= logits.first().map_or(0, Vec::len)) {
        return Err(Error::shape(format!("label {l} out of range")));
    }
    Ok(logits.iter().zip(labels).map(|(z, &l)| cross_entropy(z, l)).sum::<f64>() / labels.len() as f64)
}
