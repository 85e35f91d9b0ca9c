use super::{ConvGeometry, Dims4, Kernel4, KernelDims, Real, Tensor4};
use crate::error::{Error, Result};

/// Output dimensions of a convolution; the channel count is `kernel.cout`.
pub fn output_shape(input: Dims4, kernel: KernelDims, g: ConvGeometry) -> Result<Dims4> {
    if g.stride == 0 {
        return Err(Error::geometry("stride must be positive"));
    }
    let extent = |size: usize, pad: usize, k: usize, axis: &str| -> Result<usize> {
        let padded = size + 2 * pad;
        if k == 0 || padded < k {
            return Err(Error::geometry(format!(
                "{axis}: kernel {k} does not fit input {size} with padding {pad}"
            )));
        }
        Ok((padded - k) / g.stride + 1)
    };
    let h = extent(input.h, g.pad_h, kernel.kh, "height")?;
    let w = extent(input.w, g.pad_w, kernel.kw, "width")?;
    Ok(Dims4::new(input.n, kernel.cout, h, w))
}

fn check_channels(input: Dims4, kernel: KernelDims, g: ConvGeometry) -> Result<()> {
    if g.groups == 0 {
        return Err(Error::geometry("groups must be positive"));
    }
    if input.c != g.groups * kernel.cg {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {} groups of {}",
            input.c, g.groups, kernel.cg
        )));
    }
    if kernel.cout % g.groups != 0 {
        return Err(Error::shape(format!(
            "{} output channels not divisible into {} groups",
            kernel.cout, g.groups
        )));
    }
    if input.n == 0 || input.h == 0 || input.w == 0 {
        return Err(Error::shape(format!("empty input {input:?}")));
    }
    Ok(())
}

/// Maps an output coordinate plus kernel tap to an input coordinate, or
/// `None` when it lands in the zero padding.
#[inline]
fn source(out: usize, tap: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
    let pos = (out * stride + tap).checked_sub(pad)?;
    (pos < size).then_some(pos)
}

/// Direct grouped 2-D convolution with zero padding.
///
/// Each output pixel accumulates taps in a fixed order (kernel row, then
/// kernel column, then input channel) and adds the bias last.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    k: &Kernel4<T>,
    bias: &[T],
    g: ConvGeometry,
) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let kd = k.dims();
    check_channels(xd, kd, g)?;
    if bias.len() != kd.cout {
        return Err(Error::shape(format!(
            "bias has {} entries, kernel has {} output channels",
            bias.len(),
            kd.cout
        )));
    }
    let od = output_shape(xd, kd, g)?;
    let out_per_group = kd.cout / g.groups;
    let xs = x.data();
    let ks = k.data();
    let plane = xd.h * xd.w;

    let mut out = Vec::with_capacity(od.len());
    for n in 0..od.n {
        for co in 0..kd.cout {
            let base_c = (co / out_per_group) * kd.cg;
            let x_base = (n * xd.c + base_c) * plane;
            let k_base = co * kd.cg * kd.kh * kd.kw;
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let mut acc = T::zero();
                    for ky in 0..kd.kh {
                        let Some(ih) = source(oh, ky, g.stride, g.pad_h, xd.h) else {
                            continue;
                        };
                        for kx in 0..kd.kw {
                            let Some(iw) = source(ow, kx, g.stride, g.pad_w, xd.w) else {
                                continue;
                            };
                            let xi = x_base + ih * xd.w + iw;
                            let ki = k_base + ky * kd.kw + kx;
                            for ci in 0..kd.cg {
                                acc = acc + xs[xi + ci * plane] * ks[ki + ci * kd.kh * kd.kw];
                            }
                        }
                    }
                    out.push(acc + bias[co]);
                }
            }
        }
    }
    Tensor4::new(od, out)
}

/// Gradient of a loss with respect to the convolution input, given the
/// gradient `delta` with respect to its output (a transposed convolution).
pub fn conv2d_backward_input<T: Real>(
    delta: &Tensor4<T>,
    k: &Kernel4<T>,
    g: ConvGeometry,
    input: Dims4,
) -> Result<Tensor4<T>> {
    let kd = k.dims();
    check_channels(input, kd, g)?;
    let od = output_shape(input, kd, g)?;
    if delta.dims() != od {
        return Err(Error::shape(format!(
            "delta is {:?}, forward output would be {od:?}",
            delta.dims()
        )));
    }
    let out_per_group = kd.cout / g.groups;
    let ds = delta.data();
    let ks = k.data();
    let plane = input.h * input.w;
    let mut dx = Tensor4::zeros(input);
    let dxs = dx.data_mut();

    let mut di = 0;
    for n in 0..od.n {
        for co in 0..kd.cout {
            let base_c = (co / out_per_group) * kd.cg;
            let x_base = (n * input.c + base_c) * plane;
            let k_base = co * kd.cg * kd.kh * kd.kw;
            for oh in 0..od.h {
                for ow in 0..od.w {
                    let d = ds[di];
                    di += 1;
                    for ky in 0..kd.kh {
                        let Some(ih) = source(oh, ky, g.stride, g.pad_h, input.h) else {
                            continue;
                        };
                        for kx in 0..kd.kw {
                            let Some(iw) = source(ow, kx, g.stride, g.pad_w, input.w) else {
                                continue;
                            };
                            let xi = x_base + ih * input.w + iw;
                            let ki = k_base + ky * kd.kw + kx;
                            for ci in 0..kd.cg {
                                let slot = &mut dxs[xi + ci * plane];
                                *slot = *slot + d * ks[ki + ci * kd.kh * kd.kw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Gradients with respect to the kernel (cross-correlation of `x` with
/// `delta`) and the bias (sum of `delta` per output channel).
pub fn conv2d_backward_weight<T: Real>(
    x: &Tensor4<T>,
    delta: &Tensor4<T>,
    g: ConvGeometry,
    kernel: KernelDims,
) -> Result<(Kernel4<T>, Vec<T>)> {
    let xd = x.dims();
    check_channels(xd, kernel, g)?;
    let od = output_shape(xd, kernel, g)?;
    if delta.dims() != od {
        return Err(Error::shape(format!(
            "delta is {:?}, forward output would be {od:?}",
            delta.dims()
        )));
    }
    let out_per_group = kernel.cout / g.groups;
    let mut dk = Kernel4::zeros(kernel);
    let mut db = vec![T::zero(); kernel.cout];

    for co in 0..kernel.cout {
        let base_c = (co / out_per_group) * kernel.cg;
        for ci in 0..kernel.cg {
            for ky in 0..kernel.kh {
                for kx in 0..kernel.kw {
                    let mut acc = T::zero();
                    for n in 0..od.n {
                        for oh in 0..od.h {
                            let Some(ih) = source(oh, ky, g.stride, g.pad_h, xd.h) else {
                                continue;
                            };
                            for ow in 0..od.w {
                                let Some(iw) = source(ow, kx, g.stride, g.pad_w, xd.w) else {
                                    continue;
                                };
                                acc = acc + delta.at(n, co, oh, ow) * x.at(n, base_c + ci, ih, iw);
                            }
                        }
                    }
                    *dk.at_mut(co, ci, ky, kx) = acc;
                }
            }
        }
        let mut acc = T::zero();
        for n in 0..od.n {
            for oh in 0..od.h {
                for ow in 0..od.w {
                    acc = acc + delta.at(n, co, oh, ow);
                }
            }
        }
        db[co] = acc;
    }
    Ok((dk, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: Dims4, v: &[f64]) -> Tensor4<f64> {
        Tensor4::new(dims, v.to_vec()).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, dims: Dims4) -> Tensor4<f64> {
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(rng: &mut ChaCha8Rng, dims: KernelDims) -> Kernel4<f64> {
        Kernel4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_shape_cases() {
        let k7 = KernelDims::new(1, 1, 7, 7);
        let k3 = KernelDims::new(1, 1, 3, 3);
        let d = Dims4::new(1, 1, 8, 8);
        assert_eq!(output_shape(d, k7, ConvGeometry::new(1, 3, 3, 1)).unwrap().h, 8);
        assert_eq!(output_shape(d, k3, ConvGeometry::new(2, 1, 1, 1)).unwrap().h, 4);
        let small = Dims4::new(1, 1, 5, 5);
        assert!(matches!(
            output_shape(small, k7, ConvGeometry::default()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, Dims4::new(1, 1, 4, 4));
        let k = Kernel4::identity(1, 1, 3);
        let y = conv2d_forward(&x, &k, &[0.0], ConvGeometry::new(1, 1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_on_2x2() {
        let x = t(Dims4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let k = Kernel4::new(KernelDims::new(1, 1, 3, 3), vec![1.0; 9]).unwrap();
        let y = conv2d_forward(&x, &k, &[0.0], ConvGeometry::new(1, 1, 1, 1)).unwrap();
        assert_eq!(y.data(), &[10.0; 4]);
    }

    #[test]
    fn scalar_kernel_scale_and_shift() {
        let x = t(Dims4::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        let k = Kernel4::new(KernelDims::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &k, &[1.0], ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let x = Tensor4::<f64>::zeros(Dims4::new(1, 3, 4, 4));
        let k = Kernel4::zeros(KernelDims::new(2, 2, 3, 3));
        let err = conv2d_forward(&x, &k, &[0.0, 0.0], ConvGeometry::new(1, 1, 1, 1));
        assert!(matches!(err, Err(Error::Shape(_))));
        let err = conv2d_forward(&x, &Kernel4::zeros(KernelDims::new(2, 3, 3, 3)), &[0.0], ConvGeometry::new(1, 1, 1, 1));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn grouped_conv_keeps_groups_apart() {
        // depthwise: each output channel only sees its own input channel
        let x = Tensor4::from_fn(Dims4::new(1, 2, 3, 3), |_, c, _, _| if c == 0 { 1.0 } else { 100.0 });
        let k = Kernel4::new(KernelDims::new(2, 1, 1, 1), vec![1.0, 1.0]).unwrap();
        let y = conv2d_forward(&x, &k, &[0.0, 0.0], ConvGeometry::new(1, 0, 0, 2)).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 1.0));
        assert!(y.data()[9..].iter().all(|&v| v == 100.0));
    }

    #[test]
    fn backward_input_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random_kernel(&mut rng, KernelDims::new(2, 1, 3, 3));
        let input = Dims4::new(1, 1, 5, 5);
        let g = ConvGeometry::new(1, 1, 1, 1);
        let delta = Tensor4::zeros(Dims4::new(1, 2, 5, 5));
        let dx = conv2d_backward_input(&delta, &k, g, input).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_input_scalar_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let delta = random_tensor(&mut rng, Dims4::new(1, 1, 4, 4));
        let k = Kernel4::new(KernelDims::new(1, 1, 1, 1), vec![-2.5]).unwrap();
        let dx = conv2d_backward_input(&delta, &k, ConvGeometry::default(), delta.dims()).unwrap();
        for (a, b) in dx.data().iter().zip(delta.data()) {
            assert_eq!(*a, -2.5 * b);
        }
    }

    #[test]
    fn backward_input_rejects_wrong_delta() {
        let k = Kernel4::<f64>::zeros(KernelDims::new(1, 1, 3, 3));
        let delta = Tensor4::zeros(Dims4::new(1, 1, 4, 4));
        let err = conv2d_backward_input(&delta, &k, ConvGeometry::default(), Dims4::new(1, 1, 5, 5));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn backward_weight_scalar_case() {
        let x = t(Dims4::new(1, 1, 1, 1), &[3.0]);
        let d = t(Dims4::new(1, 1, 1, 1), &[-0.5]);
        let (dk, db) =
            conv2d_backward_weight(&x, &d, ConvGeometry::default(), KernelDims::new(1, 1, 1, 1)).unwrap();
        assert_eq!(dk.data(), &[-1.5]);
        assert_eq!(db, vec![-0.5]);
    }

    #[test]
    fn backward_weight_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, Dims4::new(2, 2, 6, 6));
        let g = ConvGeometry::new(2, 1, 1, 1);
        let kd = KernelDims::new(3, 2, 3, 3);
        let od = output_shape(x.dims(), kd, g).unwrap();
        let (dk, db) = conv2d_backward_weight(&x, &Tensor4::zeros(od), g, kd).unwrap();
        assert!(dk.data().iter().all(|&v| v == 0.0));
        assert!(db.iter().all(|&v| v == 0.0));
    }
}
