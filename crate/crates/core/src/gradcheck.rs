//! Central finite-difference checks of the analytic gradients.
//!
//! Each parameter class is compared as a whole with the norm-wise relative
//! error `|a - n| / max(|a|, |n|)`. A class whose gradient vanishes
//! identically (the conv bias under batch statistics) has both norms at
//! roundoff level; below [`ZERO_GRADIENT_NORM`] the absolute error `|a - n|`
//! is reported instead.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{backward, forward_train, init_weights, HprfbConfig, HprfbWeights};
use crate::error::Result;
use crate::tensor::{Dims4, Tensor4};
use crate::train::{BnMode, Classifier};

pub const FD_STEP: f64 = 1e-5;
pub const ZERO_GRADIENT_NORM: f64 = 1e-6;
/// Acceptance bound for the block on its own.
pub const BLOCK_TOL: f64 = 1e-5;
/// Acceptance bound through the classifier pipeline.
pub const PIPELINE_TOL: f64 = 1e-4;

const BRANCH_CLASSES: [&str; 4] = ["kernel", "bias", "gamma", "beta"];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassError {
    pub name: String,
    pub params: usize,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub classes: Vec<ClassError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.classes.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.classes.iter().all(|c| c.error < tol)
    }

    pub fn class(&self, name: &str) -> Option<&ClassError> {
        self.classes.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.classes {
            writeln!(f, "{:<12} {:>6} params  error {:.3e}", c.name, c.params, c.error)?;
        }
        Ok(())
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

pub fn gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = norm(analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied()));
    if scale < ZERO_GRADIENT_NORM {
        diff
    } else {
        diff / scale
    }
}

/// Central difference of `f` with respect to every value `(j, i)`;
/// `swap(target, j, i, v)` stores `v` there and returns the previous value.
fn central_differences<M>(
    target: &mut M,
    sizes: &[usize],
    swap: impl Fn(&mut M, usize, usize, f64) -> f64,
    mut f: impl FnMut(&M) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(sizes.len());
    for (j, &len) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for i in 0..len {
            let orig = swap(target, j, i, 0.0);
            swap(target, j, i, orig + FD_STEP);
            let plus = f(target)?;
            swap(target, j, i, orig - FD_STEP);
            let minus = f(target)?;
            swap(target, j, i, orig);
            g.push((plus - minus) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    Ok(out)
}

fn uniform(dims: Dims4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn block_slots(w: &mut HprfbWeights<f64>) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    for b in w.branches_mut() {
        out.push(b.kernel.data_mut());
        out.push(&mut b.bias);
        out.push(&mut b.bn.gamma);
        out.push(&mut b.bn.beta);
    }
    out
}

fn collect_classes(
    names: &[&str],
    class_of: impl Fn(usize) -> usize,
    analytic: &[&[f64]],
    numeric: &[Vec<f64>],
) -> Vec<ClassError> {
    names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let (mut a, mut n) = (Vec::new(), Vec::new());
            for j in (0..analytic.len()).filter(|&j| class_of(j) == k) {
                a.extend_from_slice(analytic[j]);
                n.extend_from_slice(&numeric[j]);
            }
            ClassError {
                name: name.to_string(),
                params: a.len(),
                error: gradient_error(&a, &n),
            }
        })
        .collect()
}

/// Checks [`backward`] on `config` with seeded weights, randomized batch
/// norm and the scalar objective `sum(r * Y)` for a random `r`.
pub fn check_block(config: &HprfbConfig, seed: u64) -> Result<GradCheckReport> {
    let mut w: HprfbWeights<f64> = init_weights(config, seed)?;
    w.randomize_bn(seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let side = config.max_scale() + 2;
    let mut x = uniform(Dims4::new(2, config.in_channels, side, side), &mut rng);
    let r = uniform(forward_train(&x, &w)?.dims(), &mut rng);
    let objective = |y: Tensor4<f64>| -> f64 { y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };

    let g = backward(&x, &w, &r)?;
    let mut analytic: Vec<&[f64]> = Vec::new();
    for b in &g.branches {
        analytic.push(b.d_kernel.data());
        analytic.push(&b.d_bias);
        analytic.push(&b.d_gamma);
        analytic.push(&b.d_beta);
    }
    let sizes: Vec<usize> = analytic.iter().map(|a| a.len()).collect();
    let numeric = central_differences(
        &mut w,
        &sizes,
        |w, j, i, v| std::mem::replace(&mut block_slots(w)[j][i], v),
        |w| Ok(objective(forward_train(&x, w)?)),
    )?;
    let mut classes = collect_classes(&BRANCH_CLASSES, |j| j % 4, &analytic, &numeric);

    let numeric_x = central_differences(
        &mut x,
        &[g.d_input.data().len()],
        |x, _, i, v| std::mem::replace(&mut x.data_mut()[i], v),
        |x| Ok(objective(forward_train(x, &w)?)),
    )?;
    classes.push(ClassError {
        name: "input".into(),
        params: numeric_x[0].len(),
        error: gradient_error(g.d_input.data(), &numeric_x[0]),
    });
    Ok(GradCheckReport { classes })
}

/// Checks [`Classifier::loss_and_grads`] on a small random batch: every
/// block parameter class, the head and the input.
pub fn check_pipeline(config: &HprfbConfig, mode: BnMode, seed: u64) -> Result<GradCheckReport> {
    let mut model = Classifier::new(config, 2, seed)?;
    model.block.randomize_bn(seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let side = config.max_scale() + 3;
    let mut x = uniform(Dims4::new(4, config.in_channels, side, side), &mut rng);
    let labels = vec![0, 1, 1, 0];

    let (_, g, _) = model.loss_and_grads(&x, &labels, mode, true)?;
    let analytic = g.slices();
    let sizes: Vec<usize> = analytic.iter().map(|a| a.len()).collect();
    let numeric = central_differences(
        &mut model,
        &sizes,
        |m, j, i, v| std::mem::replace(&mut m.params_mut()[j][i], v),
        |m| m.loss(&x, &labels, mode),
    )?;
    let nb = 4 * model.block.branches().len();
    let names = ["kernel", "bias", "gamma", "beta", "head weight", "head bias"];
    let mut classes = collect_classes(
        &names,
        |j| if j < nb { j % 4 } else { 4 + (j - nb) },
        &analytic,
        &numeric,
    );

    let d_input = g.d_input.expect("input gradient requested");
    let numeric_x = central_differences(
        &mut x,
        &[d_input.data().len()],
        |x, _, i, v| std::mem::replace(&mut x.data_mut()[i], v),
        |x| model.loss(x, &labels, mode),
    )?;
    classes.push(ClassError {
        name: "input".into(),
        params: numeric_x[0].len(),
        error: gradient_error(d_input.data(), &numeric_x[0]),
    });
    Ok(GradCheckReport { classes })
}
