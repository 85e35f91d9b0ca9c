//! Per-image forward latency of the two forms of a block.

use std::fmt;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{forward_inference, forward_train, init_weights, HprfbConfig, HprfbWeights};
use crate::cost::{count_macs, count_params, Form};
use crate::error::{Error, Result};
use crate::reparam::reparameterize;
use crate::tensor::{Dims4, Tensor4};

pub const MIN_RUNS: usize = 100;
const WARMUP_RUNS: usize = 3;

/// Parameter and MAC counts of both forms for one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostSummary {
    pub input: Dims4,
    pub params_train: u64,
    pub params_inference: u64,
    pub macs_train: u64,
    pub macs_inference: u64,
}

pub fn cost_summary(config: &HprfbConfig, height: usize, width: usize) -> Result<CostSummary> {
    let input = Dims4::new(1, config.in_channels, height, width);
    Ok(CostSummary {
        input,
        params_train: count_params(config, Form::Train)?,
        params_inference: count_params(config, Form::Inference)?,
        macs_train: count_macs(config, Form::Train, input)?,
        macs_inference: count_macs(config, Form::Inference, input)?,
    })
}

impl fmt::Display for CostSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>12} {:>14}", "form", "params", "MACs/image")?;
        writeln!(f, "{:<10} {:>12} {:>14}", "train", self.params_train, self.macs_train)?;
        writeln!(f, "{:<10} {:>12} {:>14}", "inference", self.params_inference, self.macs_inference)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub runs: usize,
    pub train_median: Duration,
    pub merged_median: Duration,
}

impl LatencyReport {
    /// Multi-branch time over merged time.
    pub fn speedup(&self) -> f64 {
        self.train_median.as_secs_f64() / self.merged_median.as_secs_f64()
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "median of {} runs: multi-branch {:.1} us, merged {:.1} us ({:.2}x)",
            self.runs,
            self.train_median.as_secs_f64() * 1e6,
            self.merged_median.as_secs_f64() * 1e6,
            self.speedup()
        )
    }
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Times 32-bit forward passes of one seeded image through the
/// multi-branch block and through its merged convolution, alternating the
/// two forms run by run.
pub fn measure_latency(
    config: &HprfbConfig,
    height: usize,
    width: usize,
    runs: usize,
    seed: u64,
) -> Result<LatencyReport> {
    if runs < MIN_RUNS {
        return Err(Error::config(format!("at least {MIN_RUNS} runs are required, got {runs}")));
    }
    let mut w: HprfbWeights<f32> = init_weights(config, seed)?;
    w.randomize_bn(seed.wrapping_add(1));
    let merged = reparameterize(&w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let x = Tensor4::<f32>::from_fn(Dims4::new(1, config.in_channels, height, width), |_, _, _, _| {
        rng.random_range(-1.0..1.0)
    });
    for _ in 0..WARMUP_RUNS {
        black_box(forward_train(&x, &w)?);
        black_box(forward_inference(&x, &merged)?);
    }
    let mut train = Vec::with_capacity(runs);
    let mut inference = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        black_box(forward_train(black_box(&x), &w)?);
        train.push(t.elapsed());
        let t = Instant::now();
        black_box(forward_inference(black_box(&x), &merged)?);
        inference.push(t.elapsed());
    }
    Ok(LatencyReport {
        runs,
        train_median: median(train),
        merged_median: median(inference),
    })
}
