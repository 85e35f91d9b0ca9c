//! Direct convolution on a tiny image: a vertical edge detector, and the same
//! kernel zero-padded to 5x5 with one more pixel of input padding.

use pyramid_rf::tensor::{conv2d_forward, pad_kernel};
use pyramid_rf::{ConvGeometry, Dims4, Kernel4, KernelDims, Tensor4};

fn print_map(t: &Tensor4<f64>) {
    let d = t.dims();
    for y in 0..d.h {
        let row: Vec<String> = (0..d.w).map(|x| format!("{:5.1}", t.at(0, 0, y, x))).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> pyramid_rf::Result<()> {
    // left half dark, right half bright
    let x = Tensor4::from_fn(Dims4::new(1, 1, 6, 6), |_, _, _, w| if w < 3 { 0.0 } else { 1.0 });
    let sobel = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let k = Kernel4::new(KernelDims::new(1, 1, 3, 3), sobel.to_vec())?;

    let y = conv2d_forward(&x, &k, &[0.0], ConvGeometry::centered(3, 3, 1, 1))?;
    println!("3x3 kernel, pad 1:");
    print_map(&y);

    let k5 = pad_kernel(&k, 5, 5)?;
    let y5 = conv2d_forward(&x, &k5, &[0.0], ConvGeometry::centered(5, 5, 1, 1))?;
    println!("same kernel padded to 5x5, pad 2: max |diff| {}", y.max_abs_diff(&y5)?);

    let strided = conv2d_forward(&x, &k, &[0.0], ConvGeometry::centered(3, 3, 2, 1))?;
    println!("stride 2 output {:?}:", strided.dims());
    print_map(&strided);
    Ok(())
}
