//! Heterogeneous pyramid receptive-field convolution block with exact
//! structural reparameterization.
//!
//! A block is trained as a bag of parallel conv + batch-norm branches that
//! cover several scales (`3, 5, 7, ...`) and kernel shapes (vertical and
//! horizontal lines, vertical and horizontal rectangles, squares). Because
//! convolution is linear, the trained bag folds into a single `K x K`
//! convolution that produces the same output at a fraction of the cost.
//!
//! * [`tensor`]: NCHW tensors, direct convolution and its gradients
//! * [`block`]: the branch bag, its training-form forward and backward pass
//! * [`reparam`]: batch-norm folding and the two-stage merge
//! * [`cost`]: parameter and MAC accounting for both forms
//! * [`bench`]: cost tables and latency measurement
//! * [`gradcheck`]: finite-difference gradient checks
//! * [`metrics`]: accuracy, calibration and fairness metrics
//! * [`train`]: a small end-to-end training demo on synthetic bars
//! * [`checkpoint`]: self-describing binary checkpoints
//! * [`cli`]: the command-line front end used by the `pyramid-rf` binary

pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use block::{
    backward, forward_inference, forward_train, init_weights, BranchParams, GradientBundle,
    HprfbConfig, HprfbWeights, RfType,
};
pub use error::{Error, Result};
pub use reparam::{reparameterize, verify_equivalence, MergedConv};
pub use tensor::{BnParams, ConvGeometry, Dims4, Kernel4, KernelDims, Real, Tensor4};
