//! Builds a multi-branch block with non-trivial batch-norm statistics, folds
//! it into one convolution and compares both forms on random inputs.
//!
//! cargo run --example reparameterize -- [seed]

use pyramid_rf::reparam::{fold_bn, verify_merged};
use pyramid_rf::{init_weights, reparameterize, HprfbConfig, HprfbWeights, RfType};

fn main() -> pyramid_rf::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let config = HprfbConfig::new(vec![3, 5, 7], RfType::ALL.to_vec(), 4, 8, 1, 1)?;
    let mut w: HprfbWeights<f64> = init_weights(&config, seed)?;
    w.randomize_bn(seed + 1);

    println!("{} branches:", config.branch_count());
    for b in w.branches() {
        let f = fold_bn(b)?;
        let d = f.kernel.dims();
        println!("  {:>2} x {:<2} {:<3} kernel {}x{}", b.scale, b.scale, b.rf_type.code(), d.kh, d.kw);
    }

    let merged = reparameterize(&w)?;
    let d = merged.kernel.dims();
    println!("merged: {} x {} x {}x{} kernel, stride {}, groups {}", d.cout, d.cg, d.kh, d.kw, merged.stride, merged.groups);

    let r = verify_merged(&w, &merged, 16, seed, 1e-9)?;
    println!("f64: max abs error over {} trials {:.3e} -> {}", r.trial_errors.len(), r.max_abs_err, if r.passed { "ok" } else { "MISMATCH" });

    let w32 = w.cast::<f32>();
    let r = verify_merged(&w32, &reparameterize(&w32)?, 16, seed, 1e-4)?;
    println!("f32: max abs error over {} trials {:.3e} -> {}", r.trial_errors.len(), r.max_abs_err, if r.passed { "ok" } else { "MISMATCH" });
    Ok(())
}
