//! Entropy-guided attention-layer removal for small vision transformers.
//!
//! The crate trains compact ViT classifiers, measures per-layer information
//! with a Gaussian entropy surrogate, greedily selects the attention layers
//! whose removal disturbs the network output least, dilutes them to identity
//! mappings under a decaying mask, and finally rewrites the affected blocks
//! to MLP-only form with machine-checked equivalence.

pub mod concurrency;
pub mod dataset;
pub mod dilute;
pub mod entropy;
pub mod fuse;
pub mod io;
pub mod nose;
pub mod seeds;
pub mod spectral;
pub mod stats;
pub mod tensor;
pub mod vit;

pub use tensor::{Dtype, Scalar, Tape, Tensor, TensorError, Var};
pub use vit::{ViTConfig, ViTModel};
