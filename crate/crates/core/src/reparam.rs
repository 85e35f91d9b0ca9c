//! Two-stage structural reparameterization of a trained bag.
//!
//! 1. Every branch absorbs its batch norm ([`fold_bn`]); the folded kernels of
//!    one scale are zero-padded to `i x i` and summed ([`merge_bag`]).
//! 2. The per-scale kernels are zero-padded to `K x K`, `K` the largest
//!    scale, and summed into one convolution ([`merge_pyramid`]).
//!
//! [`reparameterize`] runs both stages in 64-bit arithmetic and casts the
//! result to the caller's precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{forward_inference, forward_train, HprfbWeights, RfType};
use crate::error::{Error, Result};
use crate::tensor::{pad_kernel, ConvGeometry, Dims4, Kernel4, Real, Tensor4};

/// A branch whose batch norm has been absorbed into its kernel and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedBranch<T> {
    pub scale: usize,
    pub rf_type: RfType,
    pub kernel: Kernel4<T>,
    pub bias: Vec<T>,
}

/// All branches of one scale summed into a single `i x i` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedBag<T> {
    pub scale: usize,
    pub kernel: Kernel4<T>,
    pub bias: Vec<T>,
}

/// The single `K x K` convolution equivalent to a whole bag.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedConv<T> {
    pub kernel: Kernel4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub groups: usize,
}

impl<T: Real> MergedConv<T> {
    pub fn size(&self) -> usize {
        self.kernel.dims().kh
    }

    /// Stride and groups as configured, padding `K / 2`.
    pub fn geometry(&self) -> ConvGeometry {
        let kd = self.kernel.dims();
        ConvGeometry::centered(kd.kh, kd.kw, self.stride, self.groups)
    }

    pub fn cast<U: Real>(&self) -> MergedConv<U> {
        MergedConv {
            kernel: self.kernel.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            stride: self.stride,
            groups: self.groups,
        }
    }

    /// Views the merged conv as a single square branch with no batch norm.
    pub fn as_folded_branch(&self) -> FoldedBranch<T> {
        FoldedBranch {
            scale: self.size(),
            rf_type: RfType::Square,
            kernel: self.kernel.clone(),
            bias: self.bias.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let kd = self.kernel.dims();
        if kd.kh != kd.kw || kd.kh % 2 == 0 {
            return Err(Error::shape(format!(
                "merged kernel must be square with odd side, got {}x{}",
                kd.kh, kd.kw
            )));
        }
        if self.bias.len() != kd.cout {
            return Err(Error::shape(format!(
                "merged bias has {} entries for {} output channels",
                self.bias.len(),
                kd.cout
            )));
        }
        if self.stride == 0 || self.groups == 0 || kd.cout % self.groups != 0 {
            return Err(Error::config(format!(
                "invalid merged geometry: stride {}, groups {}, {} output channels",
                self.stride, self.groups, kd.cout
            )));
        }
        Ok(())
    }
}

/// Absorbs frozen batch norm into the preceding convolution:
/// `W' = s * W`, `B' = s * (B - mean) + beta` with `s = gamma / sqrt(var + eps)`.
pub fn fold_bn<T: Real>(b: &crate::block::BranchParams<T>) -> Result<FoldedBranch<T>> {
    b.bn.validate()?;
    if b.bias.len() != b.bn.channels() || b.kernel.dims().cout != b.bias.len() {
        return Err(Error::shape(format!(
            "branch {}/{}: kernel, bias and batch norm disagree on channel count",
            b.scale, b.rf_type
        )));
    }
    let scales = b.bn.scales();
    let kernel = b.kernel.scale_out_channels(&scales)?;
    let bias = (0..b.bias.len())
        .map(|c| (b.bias[c] - b.bn.mean[c]) * scales[c] + b.bn.beta[c])
        .collect();
    Ok(FoldedBranch {
        scale: b.scale,
        rf_type: b.rf_type,
        kernel,
        bias,
    })
}

/// Pads every folded branch of one scale to `i x i` and sums kernels and
/// biases, in the order given.
pub fn merge_bag<T: Real>(folded: &[FoldedBranch<T>]) -> Result<MergedBag<T>> {
    let first = folded
        .first()
        .ok_or_else(|| Error::config("cannot merge an empty bag"))?;
    let scale = first.scale;
    let kd = first.kernel.dims();
    let mut kernel = Kernel4::zeros(crate::tensor::KernelDims::new(kd.cout, kd.cg, scale, scale));
    let mut bias = vec![T::zero(); kd.cout];
    for f in folded {
        if f.scale != scale {
            return Err(Error::config(format!(
                "bag mixes scales {scale} and {}",
                f.scale
            )));
        }
        let fd = f.kernel.dims();
        if fd.cout != kd.cout || fd.cg != kd.cg || f.bias.len() != kd.cout {
            return Err(Error::shape(format!(
                "branch {}/{} has channels {}x{}, bag has {}x{}",
                f.scale, f.rf_type, fd.cout, fd.cg, kd.cout, kd.cg
            )));
        }
        kernel.add_assign(&pad_kernel(&f.kernel, scale, scale)?)?;
        for (acc, &v) in bias.iter_mut().zip(&f.bias) {
            *acc = *acc + v;
        }
    }
    Ok(MergedBag {
        scale,
        kernel,
        bias,
    })
}

/// Pads every per-scale kernel to the largest scale and sums them, in
/// ascending scale order.
pub fn merge_pyramid<T: Real>(
    bags: &[MergedBag<T>],
    stride: usize,
    groups: usize,
) -> Result<MergedConv<T>> {
    if bags.is_empty() {
        return Err(Error::config("cannot merge an empty pyramid"));
    }
    let mut order: Vec<&MergedBag<T>> = bags.iter().collect();
    order.sort_by_key(|b| b.scale);
    if let Some(w) = order.windows(2).find(|w| w[0].scale == w[1].scale) {
        return Err(Error::config(format!("duplicate scale {}", w[0].scale)));
    }
    let k = order.last().expect("non-empty").scale;
    let kd = order[0].kernel.dims();
    let mut kernel = Kernel4::zeros(crate::tensor::KernelDims::new(kd.cout, kd.cg, k, k));
    let mut bias = vec![T::zero(); kd.cout];
    for bag in order {
        let bd = bag.kernel.dims();
        if bd.cout != kd.cout || bd.cg != kd.cg || bag.bias.len() != kd.cout {
            return Err(Error::shape(format!(
                "bag {} has channels {}x{}, expected {}x{}",
                bag.scale, bd.cout, bd.cg, kd.cout, kd.cg
            )));
        }
        kernel.add_assign(&pad_kernel(&bag.kernel, k, k)?)?;
        for (acc, &v) in bias.iter_mut().zip(&bag.bias) {
            *acc = *acc + v;
        }
    }
    let merged = MergedConv {
        kernel,
        bias,
        stride,
        groups,
    };
    merged.validate()?;
    Ok(merged)
}

/// Folds, merges per scale and merges across scales.
pub fn reparameterize<T: Real>(w: &HprfbWeights<T>) -> Result<MergedConv<T>> {
    let wide: HprfbWeights<f64> = w.cast();
    let config = wide.config();
    let mut bags = Vec::with_capacity(config.scales.len());
    for &scale in &config.scales {
        let folded = wide
            .branches()
            .iter()
            .filter(|b| b.scale == scale)
            .map(fold_bn)
            .collect::<Result<Vec<_>>>()?;
        bags.push(merge_bag(&folded)?);
    }
    Ok(merge_pyramid(&bags, config.stride, config.groups)?.cast())
}

/// Outcome of comparing the training and inference forms.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub trial_errors: Vec<f64>,
    pub max_abs_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Spatial size of the random probe inputs used by [`verify_equivalence`].
pub fn probe_dims(w_in_channels: usize, max_scale: usize) -> Dims4 {
    let side = max_scale + 5;
    Dims4::new(2, w_in_channels, side, side)
}

/// Compares `forward_train(x, w)` with `forward_inference(x, m)` over
/// `trials` seeded inputs drawn uniform in `[-1, 1]`.
pub fn verify_merged<T: Real>(
    w: &HprfbWeights<T>,
    m: &MergedConv<T>,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::config("at least one trial is required"));
    }
    let config = w.config();
    let dims = probe_dims(config.in_channels, config.max_scale());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trial_errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let x = Tensor4::<T>::from_fn(dims, |_, _, _, _| T::from_f64(rng.random_range(-1.0..=1.0)));
        let train = forward_train(&x, w)?;
        let infer = forward_inference(&x, m)?;
        trial_errors.push(train.max_abs_diff(&infer)?);
    }
    let max_abs_err = trial_errors.iter().copied().fold(0.0, f64::max);
    Ok(EquivalenceReport {
        passed: trial_errors.iter().all(|&e| e <= tol),
        trial_errors,
        max_abs_err,
        tol,
    })
}

/// Reparameterizes `w` and checks the merge with [`verify_merged`].
pub fn verify_equivalence<T: Real>(
    w: &HprfbWeights<T>,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport> {
    let m = reparameterize(w)?;
    verify_merged(w, &m, trials, seed, tol)
}
