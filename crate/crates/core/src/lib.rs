//! Dual-uncertainty self-training for semi-supervised image segmentation.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff over the network's
//!   primitive set, SGD, and gradient checking.
//! - [`unet`]: the dual-decoder U-Net (shared encoder, transposed-conv main
//!   decoder, bilinear auxiliary decoder).
//! - [`losses`]: supervised Dice+CE, per-pixel KL uncertainty between the two
//!   decoders, and the uncertainty-rectified pseudo-label loss.
//! - [`ranking`]: sample-level uncertainty from checkpoint disagreement and
//!   the reliable/unreliable partition of the unlabeled pool.
//! - [`train`]: teacher pre-training, pseudo-label generation, and the
//!   two-stage student pipeline with its ablation arms.
//! - [`synth`]: deterministic synthetic dataset generation, preprocessing,
//!   and augmentation.
//! - [`metrics`]: Dice/Jaccard/95HD/ASD evaluation and paired t-tests.
//! - [`config`]: experiment configuration with strict validation.

pub mod tensor;
pub mod unet;

pub use tensor::{ClassMap, Graph, NodeId, Scalar, SgdOptimizer, Tensor, TensorError};
