use super::{BnParams, Kernel4, KernelDims, Real, Tensor4};
use crate::error::{Error, Result};

/// Batch normalization with frozen statistics:
/// `(x - mean) * gamma / sqrt(var + eps) + beta` per channel.
pub fn batchnorm_inference<T: Real>(x: &Tensor4<T>, bn: &BnParams<T>) -> Result<Tensor4<T>> {
    bn.validate()?;
    let d = x.dims();
    if bn.channels() != d.c {
        return Err(Error::shape(format!(
            "batch norm has {} channels, input has {}",
            bn.channels(),
            d.c
        )));
    }
    let scales = bn.scales();
    let plane = d.h * d.w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / plane) % d.c;
            (v - bn.mean[c]) * scales[c] + bn.beta[c]
        })
        .collect();
    Tensor4::new(d, data)
}

/// Embeds `k` in the center of a zero kernel of spatial size
/// `target_kh x target_kw`.
pub fn pad_kernel<T: Real>(k: &Kernel4<T>, target_kh: usize, target_kw: usize) -> Result<Kernel4<T>> {
    let kd = k.dims();
    if target_kh < kd.kh || target_kw < kd.kw {
        return Err(Error::geometry(format!(
            "cannot pad {}x{} kernel down to {target_kh}x{target_kw}",
            kd.kh, kd.kw
        )));
    }
    if (target_kh - kd.kh) % 2 != 0 || (target_kw - kd.kw) % 2 != 0 {
        return Err(Error::geometry(format!(
            "padding {}x{} to {target_kh}x{target_kw} cannot be centered",
            kd.kh, kd.kw
        )));
    }
    let dy = (target_kh - kd.kh) / 2;
    let dx = (target_kw - kd.kw) / 2;
    let mut out = Kernel4::zeros(KernelDims::new(kd.cout, kd.cg, target_kh, target_kw));
    for o in 0..kd.cout {
        for i in 0..kd.cg {
            for y in 0..kd.kh {
                for x in 0..kd.kw {
                    *out.at_mut(o, i, y + dy, x + dx) = k.at(o, i, y, x);
                }
            }
        }
    }
    Ok(out)
}
