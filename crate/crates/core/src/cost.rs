//! Parameter and multiply-accumulate accounting for both forms of a block.

use std::fmt;

use crate::block::HprfbConfig;
use crate::error::{Error, Result};
use crate::tensor::{output_shape, ConvGeometry, Dims4, KernelDims};

/// Which form of the block is being costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    /// Every branch as a separate conv + batch norm.
    Train,
    /// The single merged convolution.
    Inference,
}

impl fmt::Display for Form {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Form::Train => "train",
            Form::Inference => "inference",
        })
    }
}

/// Batch-norm values stored per output channel: mean, variance, gamma, beta.
const BN_VALUES: u64 = 4;
/// Operations per element for inference batch norm (one multiply, one add).
const BN_OPS: u64 = 2;

/// Trainable/stored parameters: kernels, conv biases and batch-norm values
/// in the training form; `cout * cg * K^2 + cout` in the inference form.
pub fn count_params(config: &HprfbConfig, form: Form) -> Result<u64> {
    config.validate()?;
    let cout = config.out_channels as u64;
    match form {
        Form::Train => {
            let mut total = 0;
            for (scale, rf) in config.branch_keys() {
                let kd = config.kernel_dims(scale, rf)?;
                total += kd.len() as u64 + cout + BN_VALUES * cout;
            }
            Ok(total)
        }
        Form::Inference => {
            let k = config.max_scale() as u64;
            Ok(cout * config.channels_per_group() as u64 * k * k + cout)
        }
    }
}

/// MACs of one convolution: `cout * Hout * Wout * cg * kh * kw` per image,
/// times the batch size.
pub fn conv_macs(input: Dims4, kernel: KernelDims, g: ConvGeometry) -> Result<u64> {
    let od = output_shape(input, kernel, g)?;
    Ok(od.n as u64
        * od.c as u64
        * od.h as u64
        * od.w as u64
        * kernel.cg as u64
        * kernel.kh as u64
        * kernel.kw as u64)
}

/// MACs of the whole block on `input`. The training form adds two
/// operations per output element for each branch's batch norm.
pub fn count_macs(config: &HprfbConfig, form: Form, input: Dims4) -> Result<u64> {
    config.validate()?;
    if input.c != config.in_channels {
        return Err(Error::geometry(format!(
            "input has {} channels, block expects {}",
            input.c, config.in_channels
        )));
    }
    match form {
        Form::Train => {
            let mut total = 0;
            for (scale, rf) in config.branch_keys() {
                let kd = config.kernel_dims(scale, rf)?;
                let g = ConvGeometry::centered(kd.kh, kd.kw, config.stride, config.groups);
                total += conv_macs(input, kd, g)?;
                total += BN_OPS * output_shape(input, kd, g)?.len() as u64;
            }
            Ok(total)
        }
        Form::Inference => {
            let k = config.max_scale();
            let kd = KernelDims::new(config.out_channels, config.channels_per_group(), k, k);
            conv_macs(input, kd, config.merged_geometry())
        }
    }
}
