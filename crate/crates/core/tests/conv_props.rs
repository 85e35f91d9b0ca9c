mod common;

use common::*;
use proptest::prelude::*;
use pyramid_rf::tensor::{
    conv2d_backward_input, conv2d_backward_weight, conv2d_forward, pad_kernel, ConvGeometry, Dims4,
    Kernel4, KernelDims, Tensor4,
};

fn conv(c: &ConvCase, k: &Kernel4<f64>, bias: &[f64]) -> Tensor4<f64> {
    conv2d_forward(&c.x, k, bias, c.g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_padded_reference(c in conv_case_strategy()) {
        let y = conv(&c, &c.k, &c.bias);
        let r = naive_conv(&c.x, &c.k, &c.bias, c.g.stride, c.g.pad_h, c.g.pad_w, c.g.groups);
        prop_assert_eq!(y.dims(), r.dims());
        prop_assert!(rel_diff(y.data(), r.data()) < 1e-13);
    }

    #[test]
    fn homogeneity(c in conv_case_strategy(), a in -4.0f64..4.0) {
        let scaled = c.k.map(|v| a * v);
        let sb: Vec<f64> = c.bias.iter().map(|v| a * v).collect();
        let lhs = conv(&c, &scaled, &sb);
        let rhs = conv(&c, &c.k, &c.bias).map(|v| a * v);
        prop_assert!(rel_diff(lhs.data(), rhs.data()) < 1e-12);
    }

    #[test]
    fn additivity(c in conv_case_strategy(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let k2 = uniform_kernel(c.k.dims(), &mut r);
        let b2 = uniform_vec(c.bias.len(), &mut r);
        let mut ksum = c.k.clone();
        ksum.add_assign(&k2).unwrap();
        let bsum: Vec<f64> = c.bias.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let lhs = conv(&c, &c.k, &c.bias).add(&conv(&c, &k2, &b2)).unwrap();
        let rhs = conv(&c, &ksum, &bsum);
        prop_assert!(rel_diff(lhs.data(), rhs.data()) < 1e-12);
    }

    #[test]
    fn pad_equivalence(c in conv_case_strategy(), dy in 0usize..=2, dx in 0usize..=2) {
        let kd = c.k.dims();
        let big = pad_kernel(&c.k, kd.kh + 2 * dy, kd.kw + 2 * dx).unwrap();
        let g = ConvGeometry::new(c.g.stride, c.g.pad_h + dy, c.g.pad_w + dx, c.g.groups);
        let lhs = conv2d_forward(&c.x, &big, &c.bias, g).unwrap();
        let rhs = conv(&c, &c.k, &c.bias);
        prop_assert_eq!(lhs.dims(), rhs.dims());
        prop_assert!(rel_diff(lhs.data(), rhs.data()) < 1e-12);
    }
}

#[test]
fn identity_kernel_is_exact_identity() {
    for (channels, groups, size) in [(1, 1, 1), (3, 1, 3), (4, 2, 5), (4, 4, 3)] {
        let x = uniform_tensor(Dims4::new(2, channels, 6, 5), &mut rng(channels as u64));
        let k = Kernel4::identity(channels, groups, size);
        let g = ConvGeometry::centered(size, size, 1, groups);
        let y = conv2d_forward(&x, &k, &vec![0.0; channels], g).unwrap();
        assert_eq!(y, x);
    }
}

fn fd_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn)
}

#[test]
fn backward_matches_central_differences() {
    const H: f64 = 1e-5;
    let setups = [
        (Dims4::new(2, 4, 9, 9), KernelDims::new(4, 4, 3, 3), ConvGeometry::new(1, 1, 1, 1)),
        (Dims4::new(2, 4, 9, 9), KernelDims::new(4, 2, 5, 3), ConvGeometry::new(2, 2, 1, 2)),
        (Dims4::new(1, 4, 8, 7), KernelDims::new(8, 1, 3, 5), ConvGeometry::new(2, 1, 2, 4)),
        (Dims4::new(2, 3, 9, 9), KernelDims::new(2, 3, 7, 1), ConvGeometry::new(1, 3, 0, 1)),
    ];
    for (i, (xd, kd, g)) in setups.into_iter().enumerate() {
        let mut r = rng(100 + i as u64);
        let x = uniform_tensor(xd, &mut r);
        let k = uniform_kernel(kd, &mut r);
        let b = uniform_vec(kd.cout, &mut r);
        let y = conv2d_forward(&x, &k, &b, g).unwrap();
        let delta = uniform_tensor(y.dims(), &mut r);
        let objective = |y: &Tensor4<f64>| -> f64 { y.data().iter().zip(delta.data()).map(|(a, b)| a * b).sum() };

        let dx = conv2d_backward_input(&delta, &k, g, xd).unwrap();
        let (dk, db) = conv2d_backward_weight(&x, &delta, g, kd).unwrap();

        let mut num_x = Vec::new();
        for j in 0..xd.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += H;
            let mut xm = x.clone();
            xm.data_mut()[j] -= H;
            num_x.push((objective(&conv2d_forward(&xp, &k, &b, g).unwrap()) - objective(&conv2d_forward(&xm, &k, &b, g).unwrap())) / (2.0 * H));
        }
        let mut num_k = Vec::new();
        for j in 0..kd.len() {
            let mut kp = k.clone();
            kp.data_mut()[j] += H;
            let mut km = k.clone();
            km.data_mut()[j] -= H;
            num_k.push((objective(&conv2d_forward(&x, &kp, &b, g).unwrap()) - objective(&conv2d_forward(&x, &km, &b, g).unwrap())) / (2.0 * H));
        }
        let mut num_b = Vec::new();
        for j in 0..kd.cout {
            let mut bp = b.clone();
            bp[j] += H;
            let mut bm = b.clone();
            bm[j] -= H;
            num_b.push((objective(&conv2d_forward(&x, &k, &bp, g).unwrap()) - objective(&conv2d_forward(&x, &k, &bm, g).unwrap())) / (2.0 * H));
        }
        assert!(fd_relative_error(dx.data(), &num_x) < 1e-5, "setup {i} input");
        assert!(fd_relative_error(dk.data(), &num_k) < 1e-5, "setup {i} kernel");
        assert!(fd_relative_error(&db, &num_b) < 1e-5, "setup {i} bias");
    }
}
