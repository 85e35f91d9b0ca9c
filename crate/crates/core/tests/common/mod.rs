//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use proptest::prelude::*;
use pyramid_rf::block::{init_weights, HprfbConfig, HprfbWeights, RfType};
use pyramid_rf::metrics::PredictionSet;
use pyramid_rf::tensor::{ConvGeometry, Dims4, Kernel4, KernelDims, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(dims: Dims4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..=1.0))
}

pub fn uniform_kernel(dims: KernelDims, rng: &mut ChaCha8Rng) -> Kernel4<f64> {
    Kernel4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..=1.0))
}

pub fn uniform_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Max-abs difference divided by the larger max-abs magnitude (or 1).
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|v| v.abs())
        .fold(0.0, f64::max)
        .max(1.0);
    diff / scale
}

/// Cross-correlation written out with an explicitly zero-padded copy of the
/// input, looping input channels outermost.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &Tensor4<f64>,
    k: &Kernel4<f64>,
    bias: &[f64],
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    groups: usize,
) -> Tensor4<f64> {
    let d = x.dims();
    let kd = k.dims();
    let (ph, pw) = (d.h + 2 * pad_h, d.w + 2 * pad_w);
    let mut padded = vec![0.0; d.n * d.c * ph * pw];
    for n in 0..d.n {
        for c in 0..d.c {
            for y in 0..d.h {
                for xx in 0..d.w {
                    padded[((n * d.c + c) * ph + y + pad_h) * pw + xx + pad_w] = x.at(n, c, y, xx);
                }
            }
        }
    }
    let oh = (ph - kd.kh) / stride + 1;
    let ow = (pw - kd.kw) / stride + 1;
    let out_per_group = kd.cout / groups;
    let mut out = Tensor4::zeros(Dims4::new(d.n, kd.cout, oh, ow));
    for n in 0..d.n {
        for o in 0..kd.cout {
            let g = o / out_per_group;
            for ci in 0..kd.cg {
                let c = g * kd.cg + ci;
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..kd.kh {
                            for kx in 0..kd.kw {
                                acc += k.at(o, ci, ky, kx)
                                    * padded[((n * d.c + c) * ph + y * stride + ky) * pw + xx * stride + kx];
                            }
                        }
                        *out.at_mut(n, o, y, xx) += acc;
                    }
                }
            }
            for y in 0..oh {
                for xx in 0..ow {
                    *out.at_mut(n, o, y, xx) += bias[o];
                }
            }
        }
    }
    out
}

/// Plain-vector view of a prediction set: rows and labels.
#[derive(Clone, Debug)]
pub struct Preds {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Preds {
    pub fn set(&self) -> PredictionSet {
        PredictionSet::new(self.rows.clone(), self.labels.clone()).unwrap()
    }

    pub fn classes(&self) -> usize {
        self.rows[0].len()
    }

    fn argmax(&self, s: usize) -> usize {
        let r = &self.rows[s];
        (0..r.len()).fold(0, |best, c| if r[c] > r[best] { c } else { best })
    }
}

/// Random prediction sets up to 64 samples and 7 classes. Probabilities
/// come from small integer weights so ties and shared bins are common.
pub fn preds_strategy() -> impl Strategy<Value = Preds> {
    (2usize..=7, 1usize..=64).prop_flat_map(|(c, s)| {
        (
            prop::collection::vec(prop::collection::vec(0u32..=6, c), s),
            prop::collection::vec(0..c, s),
        )
            .prop_map(|(weights, labels)| {
                let rows = weights
                    .into_iter()
                    .map(|w| {
                        let w: Vec<f64> = w.into_iter().map(|v| f64::from(v) + 0.25).collect();
                        let sum: f64 = w.iter().sum();
                        w.into_iter().map(|v| v / sum).collect()
                    })
                    .collect();
                Preds { rows, labels }
            })
    })
}

pub fn oracle_acc(p: &Preds) -> f64 {
    let hits = (0..p.labels.len()).filter(|&s| p.argmax(s) == p.labels[s]).count();
    hits as f64 / p.labels.len() as f64
}

pub fn oracle_bacc(p: &Preds) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..p.classes() {
        let members: Vec<usize> = (0..p.labels.len()).filter(|&s| p.labels[s] == c).collect();
        if members.is_empty() {
            continue;
        }
        let tp = members.iter().filter(|&&s| p.argmax(s) == c).count();
        recalls.push(tp as f64 / members.len() as f64);
    }
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

pub fn oracle_mf1(p: &Preds) -> f64 {
    let mut f1s = Vec::new();
    for c in 0..p.classes() {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for s in 0..p.labels.len() {
            let pred = p.argmax(s) == c;
            let real = p.labels[s] == c;
            match (pred, real) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        f1s.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    f1s.iter().sum::<f64>() / f1s.len() as f64
}

/// Mean over classes with positives and negatives of the fraction of
/// (positive, negative) pairs the positive strictly outranks.
pub fn oracle_auc(p: &Preds) -> Option<f64> {
    let mut aucs = Vec::new();
    for c in 0..p.classes() {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..p.labels.len() {
            for j in 0..p.labels.len() {
                if p.labels[i] == c && p.labels[j] != c {
                    pairs += 1.0;
                    if p.rows[i][c] > p.rows[j][c] {
                        wins += 1.0;
                    }
                }
            }
        }
        if pairs > 0.0 {
            aucs.push(wins / pairs);
        }
    }
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// `sum_b |B_b| / S * |acc(B_b) - conf(B_b)|`, bin `b` holding
/// `b / B < c <= (b + 1) / B` and bin 0 also `c = 0`.
pub fn oracle_binned_gap(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let s = conf.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| (conf[i] > lo || (b == 0 && conf[i] >= 0.0)) && conf[i] <= hi)
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let avg = members.iter().map(|&i| conf[i]).sum::<f64>() / m;
        total += m / s * (acc - avg).abs();
    }
    total
}

pub fn oracle_ece(p: &Preds, bins: usize) -> f64 {
    let n = p.labels.len();
    let conf: Vec<f64> = (0..n).map(|s| p.rows[s][p.argmax(s)]).collect();
    let correct: Vec<bool> = (0..n).map(|s| p.argmax(s) == p.labels[s]).collect();
    oracle_binned_gap(&conf, &correct, bins)
}

pub fn oracle_cece(p: &Preds, bins: usize) -> f64 {
    let n = p.labels.len();
    let per_class: Vec<f64> = (0..p.classes())
        .map(|c| {
            let conf: Vec<f64> = (0..n).map(|s| p.rows[s][c]).collect();
            let hit: Vec<bool> = (0..n).map(|s| p.labels[s] == c).collect();
            oracle_binned_gap(&conf, &hit, bins)
        })
        .collect();
    per_class.iter().sum::<f64>() / p.classes() as f64
}

pub fn oracle_brier(p: &Preds) -> f64 {
    let mut total = 0.0;
    for (row, &l) in p.rows.iter().zip(&p.labels) {
        for (c, &v) in row.iter().enumerate() {
            let o = if c == l { 1.0 } else { 0.0 };
            total += (v - o).powi(2);
        }
    }
    total / p.labels.len() as f64
}

/// Random conv instance: input, kernel, bias, geometry.
#[derive(Clone, Debug)]
pub struct ConvCase {
    pub x: Tensor4<f64>,
    pub k: Kernel4<f64>,
    pub bias: Vec<f64>,
    pub g: ConvGeometry,
}

pub fn conv_case_strategy() -> impl Strategy<Value = ConvCase> {
    (
        1usize..=2,
        prop::sample::select(vec![1usize, 2]),
        1usize..=2,
        1usize..=3,
        1usize..=3,
        1usize..=2,
        any::<u64>(),
    )
        .prop_flat_map(|(n, groups, cg, kh, kw, stride, seed)| {
            (Just((n, groups, cg, kh, kw, stride, seed)), 0..=kh / 2 + 1, 0..=kw / 2 + 1, kh + 1..=9, kw + 1..=9)
        })
        .prop_map(|((n, groups, cg, kh, kw, stride, seed), ph, pw, h, w)| {
            let mut r = rng(seed);
            let cout = groups * 2;
            let kd = KernelDims::new(cout, cg, 2 * kh - 1, 2 * kw - 1);
            let kd = KernelDims::new(kd.cout, kd.cg, kd.kh.min(h), kd.kw.min(w));
            ConvCase {
                x: uniform_tensor(Dims4::new(n, groups * cg, h, w), &mut r),
                k: uniform_kernel(kd, &mut r),
                bias: uniform_vec(cout, &mut r),
                g: ConvGeometry::new(stride, ph, pw, groups),
            }
        })
}

pub fn types_strategy() -> impl Strategy<Value = Vec<RfType>> {
    prop::sample::subsequence(RfType::ALL.to_vec(), 1..=5)
}

pub fn scales_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::sample::subsequence(vec![3usize, 5, 7], 1..=3)
}

pub fn weights_strategy() -> impl Strategy<Value = HprfbWeights<f64>> {
    (scales_strategy(), types_strategy(), prop::sample::select(vec![(2usize, 1usize), (2, 2), (3, 1)]), 1usize..=2, any::<u64>())
        .prop_map(|(scales, types, (c, groups), stride, seed)| {
            let cfg = HprfbConfig::new(scales, types, c, c, groups, stride).unwrap();
            let mut w = init_weights(&cfg, seed).unwrap();
            w.randomize_bn(seed ^ 0x5555);
            w
        })
}

