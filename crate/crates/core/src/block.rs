//! The heterogeneous pyramid receptive-field bag.
//!
//! A bag holds one conv + batch-norm branch for every pair of scale `i` and
//! receptive-field type `j`. During training the block output is the sum of
//! all branch outputs; at inference the whole bag collapses to a single
//! `K x K` convolution (see [`crate::reparam`]).
//!
//! Branch `(i, j)` is padded by `(kh / 2, kw / 2)` so that every branch lines
//! up with the merged `K x K` convolution padded by `K / 2`, for any stride.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::reparam::MergedConv;
use crate::tensor::{
    batchnorm_inference, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, BnParams,
    ConvGeometry, Dims4, Kernel4, KernelDims, Real, Tensor4,
};

/// Receptive-field type of a branch. Declaration order is the canonical
/// branch order within a scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RfType {
    /// Vertical coordination, `i x 1`.
    VerticalCoord,
    /// Horizontal coordination, `1 x i`.
    HorizontalCoord,
    /// Vertical rectangle, `i x (i - 2)`.
    VerticalRect,
    /// Horizontal rectangle, `(i - 2) x i`.
    HorizontalRect,
    /// Square, `i x i`.
    Square,
}

impl RfType {
    pub const ALL: [RfType; 5] = [
        RfType::VerticalCoord,
        RfType::HorizontalCoord,
        RfType::VerticalRect,
        RfType::HorizontalRect,
        RfType::Square,
    ];

    pub fn code(self) -> &'static str {
        match self {
            RfType::VerticalCoord => "VC",
            RfType::HorizontalCoord => "HC",
            RfType::VerticalRect => "VR",
            RfType::HorizontalRect => "HR",
            RfType::Square => "S",
        }
    }
}

impl fmt::Display for RfType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RfType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RfType::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown receptive-field type `{s}`")))
    }
}

/// Kernel shape `(kh, kw)` of the branch with scale `scale` and type `rf`.
pub fn branch_kernel_shape(scale: usize, rf: RfType) -> Result<(usize, usize)> {
    if scale < 3 || scale % 2 == 0 {
        return Err(Error::geometry(format!(
            "scale must be odd and at least 3, got {scale}"
        )));
    }
    Ok(match rf {
        RfType::VerticalCoord => (scale, 1),
        RfType::HorizontalCoord => (1, scale),
        RfType::VerticalRect => (scale, scale - 2),
        RfType::HorizontalRect => (scale - 2, scale),
        RfType::Square => (scale, scale),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HprfbConfig {
    /// Strictly ascending odd scales, each at least 3.
    pub scales: Vec<usize>,
    /// Enabled types in canonical order.
    pub rf_types: Vec<RfType>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: usize,
    pub bn_eps: f64,
}

impl Default for HprfbConfig {
    fn default() -> Self {
        Self {
            scales: vec![3, 5, 7],
            rf_types: RfType::ALL.to_vec(),
            in_channels: 4,
            out_channels: 4,
            groups: 1,
            stride: 1,
            bn_eps: 1e-5,
        }
    }
}

impl HprfbConfig {
    /// Builds a config, sorting the scales and putting the types in
    /// canonical order.
    pub fn new(
        mut scales: Vec<usize>,
        mut rf_types: Vec<RfType>,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        stride: usize,
    ) -> Result<Self> {
        scales.sort_unstable();
        rf_types.sort_unstable();
        let config = Self {
            scales,
            rf_types,
            in_channels,
            out_channels,
            groups,
            stride,
            bn_eps: 1e-5,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.bn_eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("no scales"));
        }
        if self.rf_types.is_empty() {
            return Err(Error::config("no receptive-field types"));
        }
        for &s in &self.scales {
            if s < 3 || s % 2 == 0 {
                return Err(Error::config(format!("scale {s} is not odd and >= 3")));
            }
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "scales {:?} are not strictly ascending",
                self.scales
            )));
        }
        if self.rf_types.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "types {:?} are not distinct in canonical order",
                self.rf_types
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 || self.stride == 0 {
            return Err(Error::config("channels, groups and stride must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if !(self.bn_eps > 0.0) || !self.bn_eps.is_finite() {
            return Err(Error::config(format!("bn eps {} must be positive", self.bn_eps)));
        }
        Ok(())
    }

    /// Largest scale; the side of the merged kernel.
    pub fn max_scale(&self) -> usize {
        *self.scales.last().expect("validated config has scales")
    }

    /// Input channels seen by each output channel.
    pub fn channels_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    /// `(scale, type)` pairs in branch order: scale ascending, then type.
    pub fn branch_keys(&self) -> impl Iterator<Item = (usize, RfType)> + '_ {
        self.scales
            .iter()
            .flat_map(move |&s| self.rf_types.iter().map(move |&t| (s, t)))
    }

    pub fn branch_count(&self) -> usize {
        self.scales.len() * self.rf_types.len()
    }

    pub fn kernel_dims(&self, scale: usize, rf: RfType) -> Result<KernelDims> {
        let (kh, kw) = branch_kernel_shape(scale, rf)?;
        Ok(KernelDims::new(
            self.out_channels,
            self.channels_per_group(),
            kh,
            kw,
        ))
    }

    /// Geometry of the merged convolution.
    pub fn merged_geometry(&self) -> ConvGeometry {
        let k = self.max_scale();
        ConvGeometry::centered(k, k, self.stride, self.groups)
    }
}

/// One receptive-field branch: convolution followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<T> {
    pub scale: usize,
    pub rf_type: RfType,
    pub kernel: Kernel4<T>,
    pub bias: Vec<T>,
    pub bn: BnParams<T>,
}

impl<T: Real> BranchParams<T> {
    /// Centered padding for this branch's kernel.
    pub fn geometry(&self, stride: usize, groups: usize) -> ConvGeometry {
        let kd = self.kernel.dims();
        ConvGeometry::centered(kd.kh, kd.kw, stride, groups)
    }

    pub fn cast<U: Real>(&self) -> BranchParams<U> {
        BranchParams {
            scale: self.scale,
            rf_type: self.rf_type,
            kernel: self.kernel.cast(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bn: self.bn.cast(),
        }
    }
}

/// All parameters of a bag, branches stored in [`HprfbConfig::branch_keys`]
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct HprfbWeights<T> {
    config: HprfbConfig,
    branches: Vec<BranchParams<T>>,
}

impl<T: Real> HprfbWeights<T> {
    pub fn new(config: HprfbConfig, branches: Vec<BranchParams<T>>) -> Result<Self> {
        config.validate()?;
        if branches.len() != config.branch_count() {
            return Err(Error::config(format!(
                "expected {} branches, got {}",
                config.branch_count(),
                branches.len()
            )));
        }
        for ((scale, rf), b) in config.branch_keys().zip(&branches) {
            let at = format!("branch {scale}/{rf}");
            if b.scale != scale || b.rf_type != rf {
                return Err(Error::config(format!(
                    "{at}: found {}/{} out of order",
                    b.scale, b.rf_type
                )));
            }
            let want = config.kernel_dims(scale, rf)?;
            if b.kernel.dims() != want {
                return Err(Error::shape(format!(
                    "{at}: kernel {:?}, expected {want:?}",
                    b.kernel.dims()
                )));
            }
            if b.bias.len() != config.out_channels || b.bn.channels() != config.out_channels {
                return Err(Error::shape(format!(
                    "{at}: bias/batch-norm length does not match {} output channels",
                    config.out_channels
                )));
            }
            b.bn.validate()?;
        }
        Ok(Self { config, branches })
    }

    pub fn config(&self) -> &HprfbConfig {
        &self.config
    }

    pub fn branches(&self) -> &[BranchParams<T>] {
        &self.branches
    }

    pub fn branches_mut(&mut self) -> &mut [BranchParams<T>] {
        &mut self.branches
    }

    pub fn branch(&self, scale: usize, rf: RfType) -> Option<&BranchParams<T>> {
        self.branches
            .iter()
            .find(|b| b.scale == scale && b.rf_type == rf)
    }

    pub fn branch_geometry(&self, b: &BranchParams<T>) -> ConvGeometry {
        b.geometry(self.config.stride, self.config.groups)
    }

    pub fn cast<U: Real>(&self) -> HprfbWeights<U> {
        HprfbWeights {
            config: self.config.clone(),
            branches: self.branches.iter().map(BranchParams::cast).collect(),
        }
    }

    /// Replaces every branch's batch-norm statistics and affine parameters
    /// with seeded random values (`var` in `[0.5, 2)`, `gamma` in `[0.5, 1.5)`,
    /// `mean` and `beta` in `[-0.5, 0.5)`) and the conv biases likewise.
    pub fn randomize_bn(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut self.branches {
            for c in 0..b.bias.len() {
                b.bias[c] = T::from_f64(rng.random_range(-0.5..0.5));
                b.bn.mean[c] = T::from_f64(rng.random_range(-0.5..0.5));
                b.bn.var[c] = T::from_f64(rng.random_range(0.5..2.0));
                b.bn.gamma[c] = T::from_f64(rng.random_range(0.5..1.5));
                b.bn.beta[c] = T::from_f64(rng.random_range(-0.5..0.5));
            }
        }
    }
}

/// Seeded initialization: kernels uniform in `±1/sqrt(fan_in)` with
/// `fan_in = cg * kh * kw`, zero biases, unit batch norm.
pub fn init_weights<T: Real>(config: &HprfbConfig, seed: u64) -> Result<HprfbWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = T::from_f64(config.bn_eps);
    let mut branches = Vec::with_capacity(config.branch_count());
    for (scale, rf) in config.branch_keys() {
        let kd = config.kernel_dims(scale, rf)?;
        let bound = 1.0 / (fan_in(kd) as f64).sqrt();
        let kernel = Kernel4::from_fn(kd, |_, _, _, _| T::from_f64(rng.random_range(-bound..bound)));
        branches.push(BranchParams {
            scale,
            rf_type: rf,
            kernel,
            bias: vec![T::zero(); config.out_channels],
            bn: BnParams::unit(config.out_channels, eps),
        });
    }
    HprfbWeights::new(config.clone(), branches)
}

/// Number of inputs feeding one output activation of a kernel.
pub fn fan_in(kd: KernelDims) -> usize {
    kd.cg * kd.kh * kd.kw
}

fn check_input<T: Real>(x: &Tensor4<T>, config: &HprfbConfig) -> Result<()> {
    if x.dims().c != config.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, block expects {}",
            x.dims().c,
            config.in_channels
        )));
    }
    Ok(())
}

/// Output of one branch, `BN(conv(x))`.
pub fn forward_branch<T: Real>(
    x: &Tensor4<T>,
    branch: &BranchParams<T>,
    geometry: ConvGeometry,
) -> Result<Tensor4<T>> {
    let z = conv2d_forward(x, &branch.kernel, &branch.bias, geometry)?;
    batchnorm_inference(&z, &branch.bn)
}

/// Training-form forward: the sum of every branch output, accumulated in
/// branch order.
pub fn forward_train<T: Real>(x: &Tensor4<T>, w: &HprfbWeights<T>) -> Result<Tensor4<T>> {
    check_input(x, &w.config)?;
    let mut out: Option<Tensor4<T>> = None;
    for b in &w.branches {
        let y = forward_branch(x, b, w.branch_geometry(b))?;
        match out.as_mut() {
            None => out = Some(y),
            Some(acc) => acc.add_assign(&y)?,
        }
    }
    Ok(out.expect("validated weights have at least one branch"))
}

/// Inference-form forward: one convolution with the merged kernel.
pub fn forward_inference<T: Real>(x: &Tensor4<T>, m: &MergedConv<T>) -> Result<Tensor4<T>> {
    conv2d_forward(x, &m.kernel, &m.bias, m.geometry())
}

/// Gradients of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchGradient<T> {
    pub scale: usize,
    pub rf_type: RfType,
    pub d_kernel: Kernel4<T>,
    pub d_bias: Vec<T>,
    pub d_gamma: Vec<T>,
    pub d_beta: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T> {
    pub d_input: Tensor4<T>,
    /// Same order as [`HprfbWeights::branches`].
    pub branches: Vec<BranchGradient<T>>,
}

/// Parameter gradients of a single branch with frozen batch-norm statistics.
///
/// With `s = gamma / sqrt(var + eps)` per channel, the kernel gradient is the
/// cross-correlation of `x` with `s * delta`, the bias gradient is
/// `s * sum(delta)`, and the affine gradients follow from
/// `y = s * (z - mean) + beta`.
pub fn backward_branch<T: Real>(
    x: &Tensor4<T>,
    branch: &BranchParams<T>,
    geometry: ConvGeometry,
    delta: &Tensor4<T>,
) -> Result<BranchGradient<T>> {
    let bn = &branch.bn;
    bn.validate()?;
    let z = conv2d_forward(x, &branch.kernel, &branch.bias, geometry)?;
    let d = z.dims();
    if delta.dims() != d {
        return Err(Error::shape(format!(
            "delta is {:?}, branch output is {d:?}",
            delta.dims()
        )));
    }
    let scales = bn.scales();
    let plane = d.h * d.w;
    let mut d_gamma = vec![T::zero(); d.c];
    let mut d_beta = vec![T::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let inv_std = T::one() / (bn.var[c] + bn.eps).sqrt();
            let base = (n * d.c + c) * plane;
            for i in base..base + plane {
                let g = delta.data()[i];
                d_gamma[c] = d_gamma[c] + g * (z.data()[i] - bn.mean[c]) * inv_std;
                d_beta[c] = d_beta[c] + g;
            }
        }
    }
    let scaled_delta = Tensor4::new(
        d,
        delta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g * scales[(i / plane) % d.c])
            .collect(),
    )?;
    let (d_kernel, d_bias) =
        conv2d_backward_weight(x, &scaled_delta, geometry, branch.kernel.dims())?;
    Ok(BranchGradient {
        scale: branch.scale,
        rf_type: branch.rf_type,
        d_kernel,
        d_bias,
        d_gamma,
        d_beta,
    })
}

/// Analytic backward pass of the training form with frozen batch norm.
///
/// The input gradient is the sum over branches of the transposed convolution
/// of `delta` with each BN-scaled kernel; parameter gradients are computed
/// independently per branch.
pub fn backward<T: Real>(
    x: &Tensor4<T>,
    w: &HprfbWeights<T>,
    delta: &Tensor4<T>,
) -> Result<GradientBundle<T>> {
    check_input(x, &w.config)?;
    let mut d_input = Tensor4::zeros(x.dims());
    let mut branches = Vec::with_capacity(w.branches.len());
    for b in &w.branches {
        let g = w.branch_geometry(b);
        let grads = backward_branch(x, b, g, delta)?;
        let scaled = b.kernel.scale_out_channels(&b.bn.scales())?;
        d_input.add_assign(&conv2d_backward_input(delta, &scaled, g, x.dims())?)?;
        branches.push(grads);
    }
    Ok(GradientBundle { d_input, branches })
}

/// Output dims of the block for an input of dims `input`.
pub fn block_output_dims(config: &HprfbConfig, input: Dims4) -> Result<Dims4> {
    let k = config.max_scale();
    crate::tensor::output_shape(
        input,
        KernelDims::new(config.out_channels, config.channels_per_group(), k, k),
        config.merged_geometry(),
    )
}
