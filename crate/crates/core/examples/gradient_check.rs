//! Finite-difference check of the block backward pass and of the full
//! classifier (block, ReLU, pooling, linear head, cross-entropy).

use pyramid_rf::gradcheck::{check_block, check_pipeline, BLOCK_TOL, PIPELINE_TOL};
use pyramid_rf::train::{demo_block_config, BnMode};
use pyramid_rf::{HprfbConfig, RfType};

fn main() -> pyramid_rf::Result<()> {
    let block = HprfbConfig::new(vec![3, 5, 7], RfType::ALL.to_vec(), 2, 2, 1, 1)?;
    let r = check_block(&block, 1)?;
    println!("block, frozen batch norm (tol {BLOCK_TOL:e}):\n{r}");

    let cfg = demo_block_config(2)?;
    for mode in [BnMode::Batch, BnMode::Frozen] {
        let r = check_pipeline(&cfg, mode, 2)?;
        println!("classifier, {mode:?} batch norm (tol {PIPELINE_TOL:e}):\n{r}");
    }
    Ok(())
}
