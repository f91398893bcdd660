//! Structural removal of fully diluted attention layers.
//!
//! A block diluted to M = 0 computes `f_attn = s*x` with `s = 2`
//! (compensated) or `s = 1` (naive); everything the attention parameters
//! contributed is multiplied away. Fusion rewrites such a block to
//! `out = MLP(LN(s*x)) + s*x` and drops the attention tensors together with
//! the now-dead pre-attention norm. The rewritten block performs the same
//! arithmetic as the diluted one, so equivalence is machine-checkable to
//! tight tolerances; layer-norm scale invariance (`LN(2x) = LN(x)` up to
//! the eps guard) is what lets the doubling survive only on the residual
//! path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Dtype, Scalar, Tape, Tensor, TensorError};
use crate::vit::{
    attention_param_cost, BlockMode, ForwardOptions, LayerId, TapSpec, ViTConfig, ViTModel,
    VitError,
};

#[derive(Debug, Error)]
pub enum FuseError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error("cannot fuse: blocks {0:?} still have mask > 0")]
    MaskNotZero(Vec<usize>),
    #[error("models are not comparable: {0}")]
    Incompatible(String),
    #[error("transplant error: {0}")]
    Transplant(String),
}

pub type Result<T> = std::result::Result<T, FuseError>;

/// Verification tolerance per dtype for fused-vs-diluted equivalence.
pub fn default_tolerance(dtype: Dtype) -> f64 {
    match dtype {
        Dtype::F32 => 1e-5,
        Dtype::F64 => 1e-10,
    }
}

/// Rewrite every Diluted block with M = 0 to Fused form, dropping its
/// attention parameters and pre-attention norm. Returns the fused model and
/// the rewritten block indices (empty when there was nothing to fuse).
/// Refuses if any diluted block still has M > 0.
pub fn fuse<T: Scalar>(model: &ViTModel<T>) -> Result<(ViTModel<T>, Vec<usize>)> {
    let offending: Vec<usize> = model
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(i, b)| match b.mode {
            BlockMode::Diluted { mask, .. } if mask > 0.0 => Some(i),
            _ => None,
        })
        .collect();
    if !offending.is_empty() {
        return Err(FuseError::MaskNotZero(offending));
    }
    let mut fused = model.clone();
    let mut rewritten = Vec::new();
    for (i, block) in fused.blocks.iter_mut().enumerate() {
        if let BlockMode::Diluted { compensated, .. } = block.mode {
            block.mode = BlockMode::Fused {
                residual_scale: if compensated { 2.0 } else { 1.0 },
            };
            block.attn = None;
            block.norm1 = None;
            rewritten.push(i);
        }
    }
    Ok((fused, rewritten))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionReport {
    pub fused_blocks: Vec<usize>,
    /// Max abs deviation at each block's MLP output over the verification
    /// batch.
    pub per_block_deviation: Vec<(usize, f64)>,
    pub end_to_end_deviation: f64,
    pub params_before: u64,
    pub params_after: u64,
    /// Attention tensors dropped; must equal the census prediction.
    pub attention_params_removed: u64,
    pub predicted_attention_delta: u64,
    /// Dead pre-attention norms dropped alongside the attention tensors.
    pub norm_params_removed: u64,
    pub tolerance: f64,
    pub pass: bool,
}

fn block_attention_params<T: Scalar>(model: &ViTModel<T>, i: usize) -> u64 {
    model
        .named_tensors()
        .iter()
        .filter(|(n, _)| n.starts_with(&format!("blocks.{i}.attn.")))
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

fn block_norm1_params<T: Scalar>(model: &ViTModel<T>, i: usize) -> u64 {
    model
        .named_tensors()
        .iter()
        .filter(|(n, _)| n.starts_with(&format!("blocks.{i}.norm1.")))
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

/// Compare two same-shape models feature by feature: per-block MLP outputs
/// and end-to-end logits over one verification batch. Census deltas are
/// reported against `reference`.
pub fn verify_equivalence<T: Scalar>(
    reference: &ViTModel<T>,
    candidate: &ViTModel<T>,
    batch: &Tensor<T>,
    tolerance: f64,
) -> Result<FusionReport> {
    if !configs_compatible(&reference.config, &candidate.config) {
        return Err(FuseError::Incompatible(format!(
            "configs differ: {:?} vs {:?}",
            reference.config, candidate.config
        )));
    }
    let depth = reference.config.depth;
    let taps = TapSpec::from_ids((0..depth).map(LayerId::mlp));
    let run = |m: &ViTModel<T>| -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            taps: taps.clone(),
            ..Default::default()
        };
        let pass = m.forward(&mut tape, batch, &opts)?;
        let features = (0..depth)
            .map(|i| tape.value(pass.captures[&LayerId::mlp(i)]).clone())
            .collect();
        Ok((features, tape.value(pass.logits).clone()))
    };
    let (fa, la) = run(reference)?;
    let (fb, lb) = run(candidate)?;
    let mut per_block = Vec::with_capacity(depth);
    for i in 0..depth {
        per_block.push((i, fa[i].max_abs_diff(&fb[i])?));
    }
    let end_to_end = la.max_abs_diff(&lb)?;
    let pass =
        end_to_end <= tolerance && per_block.iter().all(|&(_, d)| d <= tolerance);

    let fused_blocks: Vec<usize> = candidate
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(b.mode, BlockMode::Fused { .. }))
        .map(|(i, _)| i)
        .collect();
    let attention_params_removed: u64 = fused_blocks
        .iter()
        .map(|&i| block_attention_params(reference, i) - block_attention_params(candidate, i))
        .sum();
    let norm_params_removed: u64 = fused_blocks
        .iter()
        .map(|&i| block_norm1_params(reference, i) - block_norm1_params(candidate, i))
        .sum();
    let predicted_attention_delta =
        fused_blocks.len() as u64 * attention_param_cost(reference.config.embed_dim as u64);

    Ok(FusionReport {
        fused_blocks,
        per_block_deviation: per_block,
        end_to_end_deviation: end_to_end,
        params_before: reference.stored_param_count(),
        params_after: candidate.stored_param_count(),
        attention_params_removed,
        predicted_attention_delta,
        norm_params_removed,
        tolerance,
        pass,
    })
}

fn configs_compatible(a: &ViTConfig, b: &ViTConfig) -> bool {
    a.image_hw == b.image_hw
        && a.patch_hw == b.patch_hw
        && a.embed_dim == b.embed_dim
        && a.depth == b.depth
        && a.heads == b.heads
        && a.mlp_ratio == b.mlp_ratio
        && a.num_classes == b.num_classes
}

/// Replace `host`'s block at `index` with the donor's Full block. The donor
/// block must be Full and the host slot must not be fused.
pub fn transplant<T: Scalar>(
    donor: &ViTModel<T>,
    host: &ViTModel<T>,
    index: usize,
) -> Result<ViTModel<T>> {
    if !configs_compatible(&donor.config, &host.config) {
        return Err(FuseError::Transplant("config shapes differ".into()));
    }
    if index >= host.config.depth {
        return Err(FuseError::Transplant(format!(
            "block index {index} out of range"
        )));
    }
    if matches!(host.blocks[index].mode, BlockMode::Fused { .. }) {
        return Err(FuseError::Transplant(format!(
            "host block {index} is fused; transplanting into a fused slot is not defined"
        )));
    }
    if !matches!(donor.blocks[index].mode, BlockMode::Full) {
        return Err(FuseError::Transplant(format!(
            "donor block {index} is not Full"
        )));
    }
    let mut hybrid = host.clone();
    hybrid.blocks[index] = donor.blocks[index].clone();
    Ok(hybrid)
}
