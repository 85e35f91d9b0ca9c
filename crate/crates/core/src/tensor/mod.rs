//! Dense NCHW tensors, convolution kernels and the direct convolution
//! routines every other module is built on.
//!
//! Element precision is a type parameter bounded by [`Real`], implemented for
//! `f32` and `f64`. All routines are plain loops over row-major buffers with
//! a fixed accumulation order, so results are reproducible bit-for-bit.

mod conv;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, output_shape};
pub use ops::{batchnorm_inference, pad_kernel};

/// On-disk element type code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element type usable throughout the crate.
pub trait Real: Float + Sum + Debug + Display + Default + Send + Sync + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes one element from exactly `DTYPE.size()` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Feature-map dimensions: batch, channels, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Kernel dimensions: output channels, input channels per group, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KernelDims {
    pub cout: usize,
    pub cg: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelDims {
    pub const fn new(cout: usize, cg: usize, kh: usize, kw: usize) -> Self {
        Self { cout, cg, kh, kw }
    }

    pub fn len(&self) -> usize {
        self.cout * self.cg * self.kh * self.kw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major 4-D feature map in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(dims: Dims4, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "tensor {dims:?} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims4) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn filled(dims: Dims4, value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.offset(n, c, h, w);
        &mut self.data[i]
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Like [`map`](Self::map) but also passes the flat element index.
    pub fn map_indexed(&self, f: impl Fn(usize, T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
        }
    }

    /// Elementwise sum; dims must match.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            dims: self.dims,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "cannot add {:?} into {:?}",
                other.dims, self.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Largest elementwise absolute difference, in 64-bit.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "cannot compare {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

/// Row-major convolution weights, `[cout][cg][kh][kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel4<T> {
    dims: KernelDims,
    data: Vec<T>,
}

impl<T: Real> Kernel4<T> {
    pub fn new(dims: KernelDims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(format!(
                "kernel {dims:?} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: KernelDims) -> Self {
        Self {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn from_fn(dims: KernelDims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for o in 0..dims.cout {
            for i in 0..dims.cg {
                for y in 0..dims.kh {
                    for x in 0..dims.kw {
                        data.push(f(o, i, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    /// `cout x cg` kernel that copies each input channel of its group to the
    /// matching output position (a delta at the spatial center).
    pub fn identity(channels: usize, groups: usize, size: usize) -> Self {
        let cg = channels / groups;
        let center = size / 2;
        Self::from_fn(KernelDims::new(channels, cg, size, size), |o, i, y, x| {
            if o % cg == i && y == center && x == center {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn dims(&self) -> KernelDims {
        self.dims
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        ((o * self.dims.cg + i) * self.dims.kh + y) * self.dims.kw + x
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, y: usize, x: usize) -> T {
        self.data[self.offset(o, i, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, o: usize, i: usize, y: usize, x: usize) -> &mut T {
        let idx = self.offset(o, i, y, x);
        &mut self.data[idx]
    }

    pub fn cast<U: Real>(&self) -> Kernel4<U> {
        Kernel4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Multiplies every weight of output channel `o` by `scale[o]`.
    pub fn scale_out_channels(&self, scale: &[T]) -> Result<Self> {
        if scale.len() != self.dims.cout {
            return Err(Error::shape(format!(
                "{} channel scales for a kernel with {} output channels",
                scale.len(),
                self.dims.cout
            )));
        }
        let per_out = self.dims.cg * self.dims.kh * self.dims.kw;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / per_out])
            .collect();
        Ok(Self {
            dims: self.dims,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "cannot add kernel {:?} into {:?}",
                other.dims, self.dims
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }
}

/// Stride, zero padding and channel grouping of one convolution.
/// Dilation is always 1 and the stride is shared by both axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad_h: usize, pad_w: usize, groups: usize) -> Self {
        Self {
            stride,
            pad_h,
            pad_w,
            groups,
        }
    }

    /// Padding that keeps a `kh x kw` kernel centered on each output pixel.
    pub const fn centered(kh: usize, kw: usize, stride: usize, groups: usize) -> Self {
        Self::new(stride, kh / 2, kw / 2, groups)
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::new(1, 0, 0, 1)
    }
}

/// Frozen batch-norm statistics and affine parameters, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub eps: T,
}

impl<T: Real> BnParams<T> {
    /// `mean = 0, var = 1, gamma = 1, beta = 0`.
    pub fn unit(channels: usize, eps: T) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            eps,
        }
    }

    /// Parameters under which the normalization is exactly the identity:
    /// `gamma = sqrt(var + eps)`, zero mean and shift.
    pub fn identity(channels: usize, eps: T) -> Self {
        let var = T::one() - eps;
        Self {
            mean: vec![T::zero(); channels],
            var: vec![var; channels],
            gamma: vec![(var + eps).sqrt(); channels],
            beta: vec![T::zero(); channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.mean.len();
        if self.var.len() != c || self.gamma.len() != c || self.beta.len() != c {
            return Err(Error::shape(format!(
                "batch-norm vectors disagree: mean {}, var {}, gamma {}, beta {}",
                c,
                self.var.len(),
                self.gamma.len(),
                self.beta.len()
            )));
        }
        for (ch, &v) in self.var.iter().enumerate() {
            let denom = v + self.eps;
            if !(denom > T::zero()) {
                return Err(Error::Numeric(format!(
                    "channel {ch}: var + eps = {denom} is not positive"
                )));
            }
        }
        Ok(())
    }

    /// Per-channel multiplier `gamma / sqrt(var + eps)`.
    pub fn scales(&self) -> Vec<T> {
        self.gamma
            .iter()
            .zip(&self.var)
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> BnParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        BnParams {
            mean: conv(&self.mean),
            var: conv(&self.var),
            gamma: conv(&self.gamma),
            beta: conv(&self.beta),
            eps: U::from_f64(self.eps.as_f64()),
        }
    }
}
