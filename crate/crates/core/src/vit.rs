//! Vision transformer with per-block mode switching and feature taps.
//!
//! Blocks follow the DeiT pre-norm layout: `f_attn = x + Attn(LN(x))`,
//! `f_mlp = f_attn + MLP(LN(f_attn))`. Taps read the post-residual values
//! exactly as fed downstream. A block is `Full`, `Diluted` (attention branch
//! under a scalar mask), or `Fused` (attention structurally removed; the
//! block computes `MLP(LN(s·x)) + s·x` with `s` the residual scale left
//! behind by dilution, 2 for the compensated form).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, AnyTensor, IoError};
use crate::tensor::{Dtype, Scalar, Tape, Tensor, TensorError, Var};

pub const IMAGE_CHANNELS: usize = 3;
pub const LN_EPS: f64 = 1e-6;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VitError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown tap id: {0}")]
    UnknownTap(String),
    #[error("block {block}: {message}")]
    Mode { block: usize, message: String },
}

pub type Result<T> = std::result::Result<T, VitError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Input image height and width in pixels.
    pub image_hw: (usize, usize),
    /// Patch height and width in pixels.
    pub patch_hw: (usize, usize),
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// MLP hidden width = mlp_ratio * embed_dim.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let (ih, iw) = self.image_hw;
        let (ph, pw) = self.patch_hw;
        if ph == 0 || pw == 0 || ih % ph != 0 || iw % pw != 0 {
            return Err(VitError::Config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                ih, iw, ph, pw
            )));
        }
        if self.depth < 1 {
            return Err(VitError::Config("depth must be >= 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(VitError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(VitError::Config(
                "mlp_ratio and num_classes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patch tokens per image: P = (H/h)*(W/w).
    pub fn patch_count(&self) -> usize {
        (self.image_hw.0 / self.patch_hw.0) * (self.image_hw.1 / self.patch_hw.1)
    }

    /// Sequence length including the classification token.
    pub fn seq_len(&self) -> usize {
        self.patch_count() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_hw.0 * self.patch_hw.1 * IMAGE_CHANNELS
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BlockMode {
    Full,
    Diluted { mask: f64, compensated: bool },
    Fused { residual_scale: f64 },
}

impl BlockMode {
    fn tag(&self) -> u8 {
        match self {
            BlockMode::Full => 0,
            BlockMode::Diluted { .. } => 1,
            BlockMode::Fused { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Attention,
    Mlp,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerKind::Attention => write!(f, "attn"),
            LayerKind::Mlp => write!(f, "mlp"),
        }
    }
}

/// Identifies one tappable feature: a block's attention or MLP output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: LayerKind,
}

impl LayerId {
    pub fn attn(block: usize) -> Self {
        LayerId {
            block,
            kind: LayerKind::Attention,
        }
    }

    pub fn mlp(block: usize) -> Self {
        LayerId {
            block,
            kind: LayerKind::Mlp,
        }
    }
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "block{}.{}", self.block, self.kind)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TapSpec {
    set: BTreeSet<LayerId>,
}

impl TapSpec {
    pub fn none() -> Self {
        TapSpec::default()
    }

    pub fn single(id: LayerId) -> Self {
        let mut set = BTreeSet::new();
        set.insert(id);
        TapSpec { set }
    }

    pub fn from_ids(ids: impl IntoIterator<Item = LayerId>) -> Self {
        TapSpec {
            set: ids.into_iter().collect(),
        }
    }

    pub fn contains(&self, id: LayerId) -> bool {
        self.set.contains(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = LayerId> + '_ {
        self.set.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    /// `[in, out]`, row-major.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpParams<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub mode: BlockMode,
    /// Pre-attention norm; removed together with the attention parameters
    /// when the block is fused.
    pub norm1: Option<LayerNormParams<T>>,
    pub attn: Option<AttentionParams<T>>,
    pub norm2: LayerNormParams<T>,
    pub mlp: MlpParams<T>,
}

#[derive(Debug, Clone)]
pub struct ViTModel<T: Scalar> {
    pub config: ViTConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNormParams<T>,
    pub head: Linear<T>,
}

const INIT_STD: f64 = 0.02;

fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64((z * std).clamp(-2.0 * std, 2.0 * std))
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

fn zeros_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::zeros(shape).with_grad()
}

fn ones_param<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::full(shape, T::one()).with_grad()
}

fn linear_init<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Linear<T> {
    Linear {
        weight: trunc_normal(rng, vec![fan_in, fan_out], INIT_STD),
        bias: zeros_param(vec![fan_out]),
    }
}

fn norm_init<T: Scalar>(d: usize) -> LayerNormParams<T> {
    LayerNormParams {
        gamma: ones_param(vec![d]),
        beta: zeros_param(vec![d]),
    }
}

impl<T: Scalar> ViTModel<T> {
    /// Fresh model with truncated-normal (std 0.02) weight init, seeded from
    /// `config.seed`.
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64_compat(config.seed);
        let patch_embed = linear_init(&mut rng, config.patch_dim(), d);
        let cls_token = trunc_normal(&mut rng, vec![d], INIT_STD);
        let pos_embed = trunc_normal(&mut rng, vec![config.seq_len(), d], INIT_STD);
        let blocks = (0..config.depth)
            .map(|_| Block {
                mode: BlockMode::Full,
                norm1: Some(norm_init(d)),
                attn: Some(AttentionParams {
                    q: linear_init(&mut rng, d, d),
                    k: linear_init(&mut rng, d, d),
                    v: linear_init(&mut rng, d, d),
                    proj: linear_init(&mut rng, d, d),
                }),
                norm2: norm_init(d),
                mlp: MlpParams {
                    fc1: linear_init(&mut rng, d, config.hidden_dim()),
                    fc2: linear_init(&mut rng, config.hidden_dim(), d),
                },
            })
            .collect();
        let final_norm = norm_init(d);
        let head = linear_init(&mut rng, d, config.num_classes);
        Ok(ViTModel {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            final_norm,
            head,
        })
    }

    /// Tap ids that exist on this model, in (block, attn-before-mlp) order.
    pub fn live_taps(&self) -> Vec<LayerId> {
        let mut ids = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if b.attn.is_some() {
                ids.push(LayerId::attn(i));
            }
            ids.push(LayerId::mlp(i));
        }
        ids
    }

    pub fn attention_indices(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.attn.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Literal number of stored parameter scalars.
    pub fn stored_param_count(&self) -> u64 {
        self.named_tensors().iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Mutable lookup by canonical tensor name.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        match name {
            "patch_embed.weight" => return Some(&mut self.patch_embed.weight),
            "patch_embed.bias" => return Some(&mut self.patch_embed.bias),
            "cls_token" => return Some(&mut self.cls_token),
            "pos_embed" => return Some(&mut self.pos_embed),
            "final_norm.gamma" => return Some(&mut self.final_norm.gamma),
            "final_norm.beta" => return Some(&mut self.final_norm.beta),
            "head.weight" => return Some(&mut self.head.weight),
            "head.bias" => return Some(&mut self.head.bias),
            _ => {}
        }
        let rest = name.strip_prefix("blocks.")?;
        let (idx, field) = rest.split_once('.')?;
        let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        match field {
            "norm1.gamma" => block.norm1.as_mut().map(|n| &mut n.gamma),
            "norm1.beta" => block.norm1.as_mut().map(|n| &mut n.beta),
            "attn.q.weight" => block.attn.as_mut().map(|a| &mut a.q.weight),
            "attn.q.bias" => block.attn.as_mut().map(|a| &mut a.q.bias),
            "attn.k.weight" => block.attn.as_mut().map(|a| &mut a.k.weight),
            "attn.k.bias" => block.attn.as_mut().map(|a| &mut a.k.bias),
            "attn.v.weight" => block.attn.as_mut().map(|a| &mut a.v.weight),
            "attn.v.bias" => block.attn.as_mut().map(|a| &mut a.v.bias),
            "attn.proj.weight" => block.attn.as_mut().map(|a| &mut a.proj.weight),
            "attn.proj.bias" => block.attn.as_mut().map(|a| &mut a.proj.bias),
            "norm2.gamma" => Some(&mut block.norm2.gamma),
            "norm2.beta" => Some(&mut block.norm2.beta),
            "mlp.fc1.weight" => Some(&mut block.mlp.fc1.weight),
            "mlp.fc1.bias" => Some(&mut block.mlp.fc1.bias),
            "mlp.fc2.weight" => Some(&mut block.mlp.fc2.weight),
            "mlp.fc2.bias" => Some(&mut block.mlp.fc2.bias),
            _ => None,
        }
    }

    /// All parameter tensors with canonical names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("cls_token".into(), &self.cls_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(n1) = &b.norm1 {
                out.push((format!("blocks.{i}.norm1.gamma"), &n1.gamma));
                out.push((format!("blocks.{i}.norm1.beta"), &n1.beta));
            }
            if let Some(a) = &b.attn {
                out.push((format!("blocks.{i}.attn.q.weight"), &a.q.weight));
                out.push((format!("blocks.{i}.attn.q.bias"), &a.q.bias));
                out.push((format!("blocks.{i}.attn.k.weight"), &a.k.weight));
                out.push((format!("blocks.{i}.attn.k.bias"), &a.k.bias));
                out.push((format!("blocks.{i}.attn.v.weight"), &a.v.weight));
                out.push((format!("blocks.{i}.attn.v.bias"), &a.v.bias));
                out.push((format!("blocks.{i}.attn.proj.weight"), &a.proj.weight));
                out.push((format!("blocks.{i}.attn.proj.bias"), &a.proj.bias));
            }
            out.push((format!("blocks.{i}.norm2.gamma"), &b.norm2.gamma));
            out.push((format!("blocks.{i}.norm2.beta"), &b.norm2.beta));
            out.push((format!("blocks.{i}.mlp.fc1.weight"), &b.mlp.fc1.weight));
            out.push((format!("blocks.{i}.mlp.fc1.bias"), &b.mlp.fc1.bias));
            out.push((format!("blocks.{i}.mlp.fc2.weight"), &b.mlp.fc2.weight));
            out.push((format!("blocks.{i}.mlp.fc2.bias"), &b.mlp.fc2.bias));
        }
        out.push(("final_norm.gamma".into(), &self.final_norm.gamma));
        out.push(("final_norm.beta".into(), &self.final_norm.beta));
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }
}

/// Seeding helper: `rand 0.8` renamed this across versions; pin one spelling.
trait SeedCompat {
    fn seed_from_u64_compat(seed: u64) -> Self;
}

impl SeedCompat for ChaCha8Rng {
    fn seed_from_u64_compat(seed: u64) -> Self {
        use rand::SeedableRng;
        ChaCha8Rng::seed_from_u64(seed)
    }
}

// ── Forward ─────────────────────────────────────────────────────────────

/// Everything a forward pass exposes: logits, tapped features, and the tape
/// vars of every bound parameter (for optimizers and gradient reports).
pub struct ForwardPass {
    pub logits: Var,
    pub captures: BTreeMap<LayerId, Var>,
    pub params: Vec<(String, Var)>,
    /// Attention probability tensors per block, only when requested.
    pub attn_probs: BTreeMap<usize, Var>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub taps: TapSpec,
    /// Attention layers replaced by the identity for this pass (the branch is
    /// skipped entirely, `f_attn = x`). Read-only; parameters never change.
    pub masked: BTreeSet<usize>,
    pub capture_attn_probs: bool,
}

struct Binder {
    params: Vec<(String, Var)>,
}

impl Binder {
    fn bind<T: Scalar>(&mut self, tape: &mut Tape<T>, name: String, t: &Tensor<T>) -> Var {
        let v = tape.leaf(t.clone());
        self.params.push((name, v));
        v
    }
}

/// Rearrange `[B,H,W,C]` images into `[B*P, h*w*C]` patch rows. Patches are
/// enumerated row-major; within a patch the layout is `(iy, ix, c)`.
pub fn patchify<T: Scalar>(images: &Tensor<T>, config: &ViTConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    let (ih, iw) = config.image_hw;
    if s.len() != 4 || s[1] != ih || s[2] != iw || s[3] != IMAGE_CHANNELS {
        return Err(VitError::Config(format!(
            "images {:?} do not match config {}x{}x{}",
            s, ih, iw, IMAGE_CHANNELS
        )));
    }
    let b = s[0];
    let (ph, pw) = config.patch_hw;
    let (gh, gw) = (ih / ph, iw / pw);
    let pdim = config.patch_dim();
    let src = images.data();
    let mut out = vec![T::zero(); b * gh * gw * pdim];
    let mut w = 0usize;
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for iy in 0..ph {
                    let y = py * ph + iy;
                    let row = ((bi * ih + y) * iw + px * pw) * IMAGE_CHANNELS;
                    let n = pw * IMAGE_CHANNELS;
                    out[w..w + n].copy_from_slice(&src[row..row + n]);
                    w += n;
                }
            }
        }
    }
    Ok(Tensor::new(vec![b * gh * gw, pdim], out)?)
}

fn linear3<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    batch: usize,
    tokens: usize,
    d_out: usize,
) -> Result<Var> {
    let d_in = tape.value(x).shape()[2];
    let flat = tape.reshape(x, vec![batch * tokens, d_in])?;
    let mm = tape.matmul(flat, w)?;
    let with_bias = tape.add_bias(mm, b)?;
    Ok(tape.reshape(with_bias, vec![batch, tokens, d_out])?)
}

impl<T: Scalar> ViTModel<T> {
    /// Full forward pass over a batch of images.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass> {
        for &m in &opts.masked {
            if m >= self.config.depth {
                return Err(VitError::Mode {
                    block: m,
                    message: "masked index out of range".into(),
                });
            }
            if !matches!(self.blocks[m].mode, BlockMode::Full) {
                return Err(VitError::Mode {
                    block: m,
                    message: "masking requires the block to be in Full mode".into(),
                });
            }
        }
        let live: BTreeSet<LayerId> = self.live_taps().into_iter().collect();
        for id in opts.taps.ids() {
            if !live.contains(&id) {
                return Err(VitError::UnknownTap(id.to_string()));
            }
        }

        let batch = images.shape()[0];
        let tokens = self.config.seq_len();
        let d = self.config.embed_dim;

        let mut binder = Binder { params: Vec::new() };
        let patches = patchify(images, &self.config)?;
        let patches = tape.leaf(patches); // inputs carry no gradient
        let pe_w = binder.bind(tape, "patch_embed.weight".into(), &self.patch_embed.weight);
        let pe_b = binder.bind(tape, "patch_embed.bias".into(), &self.patch_embed.bias);
        let embedded = tape.matmul(patches, pe_w)?;
        let embedded = tape.add_bias(embedded, pe_b)?;
        let embedded = tape.reshape(embedded, vec![batch, tokens - 1, d])?;
        let cls = binder.bind(tape, "cls_token".into(), &self.cls_token);
        let with_cls = tape.prepend_token(embedded, cls)?;
        let pos = binder.bind(tape, "pos_embed".into(), &self.pos_embed);
        let mut x = tape.add_bias(with_cls, pos)?;

        let mut captures = BTreeMap::new();
        let mut attn_probs = BTreeMap::new();

        for (i, block) in self.blocks.iter().enumerate() {
            let f_attn = if opts.masked.contains(&i) {
                // Identity mapping: the branch is suppressed, the single
                // residual remains, so the tap is literally the input var.
                x
            } else {
                match block.mode {
                    BlockMode::Full => {
                        let branch = self.attention_branch(
                            tape,
                            &mut binder,
                            i,
                            x,
                            batch,
                            tokens,
                            opts.capture_attn_probs.then_some(&mut attn_probs),
                        )?;
                        tape.add(x, branch)?
                    }
                    BlockMode::Diluted { mask, compensated } => {
                        let branch = self.attention_branch(
                            tape,
                            &mut binder,
                            i,
                            x,
                            batch,
                            tokens,
                            opts.capture_attn_probs.then_some(&mut attn_probs),
                        )?;
                        diluted_combine(tape, branch, x, mask, compensated)?
                    }
                    BlockMode::Fused { residual_scale } => tape.scale(x, residual_scale),
                }
            };
            if opts.taps.contains(LayerId::attn(i)) {
                captures.insert(LayerId::attn(i), f_attn);
            }
            let f_mlp = self.mlp_from(tape, &mut binder, i, f_attn, batch, tokens)?;
            if opts.taps.contains(LayerId::mlp(i)) {
                captures.insert(LayerId::mlp(i), f_mlp);
            }
            x = f_mlp;
        }

        let cls_out = tape.select_token(x, 0)?;
        let fg = binder.bind(tape, "final_norm.gamma".into(), &self.final_norm.gamma);
        let fb = binder.bind(tape, "final_norm.beta".into(), &self.final_norm.beta);
        let normed = tape.layer_norm(cls_out, fg, fb, LN_EPS)?;
        let hw = binder.bind(tape, "head.weight".into(), &self.head.weight);
        let hb = binder.bind(tape, "head.bias".into(), &self.head.bias);
        let logits = tape.matmul(normed, hw)?;
        let logits = tape.add_bias(logits, hb)?;

        Ok(ForwardPass {
            logits,
            captures,
            params: binder.params,
            attn_probs,
        })
    }

    /// Attention branch of block `i` (pre-norm, multi-head attention, output
    /// projection) WITHOUT the residual.
    #[allow(clippy::too_many_arguments)]
    fn attention_branch(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder,
        i: usize,
        x: Var,
        batch: usize,
        tokens: usize,
        mut probs_out: Option<&mut BTreeMap<usize, Var>>,
    ) -> Result<Var> {
        let block = &self.blocks[i];
        let (norm1, attn) = match (&block.norm1, &block.attn) {
            (Some(n), Some(a)) => (n, a),
            _ => {
                return Err(VitError::Mode {
                    block: i,
                    message: "attention forward on a fused block".into(),
                })
            }
        };
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = self.config.head_dim();

        let g1 = binder.bind(tape, format!("blocks.{i}.norm1.gamma"), &norm1.gamma);
        let b1 = binder.bind(tape, format!("blocks.{i}.norm1.beta"), &norm1.beta);
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;

        let qw = binder.bind(tape, format!("blocks.{i}.attn.q.weight"), &attn.q.weight);
        let qb = binder.bind(tape, format!("blocks.{i}.attn.q.bias"), &attn.q.bias);
        let kw = binder.bind(tape, format!("blocks.{i}.attn.k.weight"), &attn.k.weight);
        let kb = binder.bind(tape, format!("blocks.{i}.attn.k.bias"), &attn.k.bias);
        let vw = binder.bind(tape, format!("blocks.{i}.attn.v.weight"), &attn.v.weight);
        let vb = binder.bind(tape, format!("blocks.{i}.attn.v.bias"), &attn.v.bias);
        let q = linear3(tape, h, qw, qb, batch, tokens, d)?;
        let k = linear3(tape, h, kw, kb, batch, tokens, d)?;
        let v = linear3(tape, h, vw, vb, batch, tokens, d)?;

        let split = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
            let r = tape.reshape(t, vec![batch, tokens, heads, dh])?;
            let p = tape.permute(r, &[0, 2, 1, 3])?;
            Ok(tape.reshape(p, vec![batch * heads, tokens, dh])?)
        };
        let qh = split(tape, q)?;
        let kh = split(tape, k)?;
        let vh = split(tape, v)?;

        let kt = tape.transpose_last2(kh)?;
        let scores = tape.batch_matmul(qh, kt)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax(scaled, 2)?;
        if let Some(out) = probs_out.as_deref_mut() {
            out.insert(i, probs);
        }
        let ctx = tape.batch_matmul(probs, vh)?;
        let merged = tape.reshape(ctx, vec![batch, heads, tokens, dh])?;
        let merged = tape.permute(merged, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged, vec![batch, tokens, d])?;

        let pw = binder.bind(tape, format!("blocks.{i}.attn.proj.weight"), &attn.proj.weight);
        let pb = binder.bind(tape, format!("blocks.{i}.attn.proj.bias"), &attn.proj.bias);
        linear3(tape, merged, pw, pb, batch, tokens, d)
    }

    fn mlp_from(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder,
        i: usize,
        f_attn: Var,
        batch: usize,
        tokens: usize,
    ) -> Result<Var> {
        let block = &self.blocks[i];
        let d = self.config.embed_dim;
        let hidden = self.config.hidden_dim();
        let g2 = binder.bind(tape, format!("blocks.{i}.norm2.gamma"), &block.norm2.gamma);
        let b2 = binder.bind(tape, format!("blocks.{i}.norm2.beta"), &block.norm2.beta);
        let h = tape.layer_norm(f_attn, g2, b2, LN_EPS)?;
        let w1 = binder.bind(tape, format!("blocks.{i}.mlp.fc1.weight"), &block.mlp.fc1.weight);
        let bias1 = binder.bind(tape, format!("blocks.{i}.mlp.fc1.bias"), &block.mlp.fc1.bias);
        let a = linear3(tape, h, w1, bias1, batch, tokens, hidden)?;
        let g = tape.gelu(a);
        let w2 = binder.bind(tape, format!("blocks.{i}.mlp.fc2.weight"), &block.mlp.fc2.weight);
        let bias2 = binder.bind(tape, format!("blocks.{i}.mlp.fc2.bias"), &block.mlp.fc2.bias);
        let out = linear3(tape, g, w2, bias2, batch, tokens, d)?;
        Ok(tape.add(f_attn, out)?)
    }

    /// Attention branch of block `i` without the residual, for callers that
    /// apply their own combination (dilution). Works in Full or Diluted mode.
    pub fn attention_branch_forward(&self, tape: &mut Tape<T>, i: usize, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (batch, tokens) = (shape[0], shape[1]);
        let mut binder = Binder { params: Vec::new() };
        self.attention_branch(tape, &mut binder, i, x, batch, tokens, None)
    }

    /// Standalone attention sublayer: `f_attn = x + Attn(LN(x))`. Requires
    /// Full mode.
    pub fn attention_forward(&self, tape: &mut Tape<T>, i: usize, x: Var) -> Result<Var> {
        if !matches!(self.blocks[i].mode, BlockMode::Full) {
            return Err(VitError::Mode {
                block: i,
                message: "attention_forward requires Full mode".into(),
            });
        }
        let shape = tape.value(x).shape().to_vec();
        let (batch, tokens) = (shape[0], shape[1]);
        let mut binder = Binder { params: Vec::new() };
        let branch = self.attention_branch(tape, &mut binder, i, x, batch, tokens, None)?;
        Ok(tape.add(x, branch)?)
    }

    /// Standalone MLP sublayer: `f_mlp = f_attn + MLP(LN(f_attn))`.
    pub fn mlp_forward(&self, tape: &mut Tape<T>, i: usize, f_attn: Var) -> Result<Var> {
        let shape = tape.value(f_attn).shape().to_vec();
        let (batch, tokens) = (shape[0], shape[1]);
        let mut binder = Binder { params: Vec::new() };
        self.mlp_from(tape, &mut binder, i, f_attn, batch, tokens)
    }

    /// Convenience: logits only, no taps, no masking.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, images, &ForwardOptions::default())?;
        Ok(tape.value(pass.logits).clone())
    }
}

/// Combine an attention branch with its input under a scalar mask:
/// compensated `M*branch + (2-M)*x`, naive `M*branch + x`. At the endpoints
/// the scalings are IEEE-exact, so `M=0` yields exactly `2x` (compensated)
/// or `x` (naive) and `M=1` reproduces the full sublayer bit for bit.
pub fn diluted_combine<T: Scalar>(
    tape: &mut Tape<T>,
    branch: Var,
    x: Var,
    mask: f64,
    compensated: bool,
) -> Result<Var> {
    let masked_branch = tape.scale(branch, mask);
    if compensated {
        let boosted = tape.scale(x, 2.0 - mask);
        Ok(tape.add(masked_branch, boosted)?)
    } else {
        Ok(tape.add(masked_branch, x)?)
    }
}

// ── Parameter census ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCensus {
    pub total: u64,
    pub patch_embed: u64,
    pub cls_token: u64,
    pub pos_embed: u64,
    pub attention: u64,
    pub norms: u64,
    pub mlp: u64,
    pub head: u64,
}

/// Cost of one attention sublayer: QKV projections plus output projection,
/// `(d*3d + 3d) + (d*d + d)`.
pub fn attention_param_cost(d: u64) -> u64 {
    (d * 3 * d + 3 * d) + (d * d + d)
}

/// Exact parameter census for a config with the given attention layers
/// removed. Per removed layer exactly `attention_param_cost` is subtracted;
/// norm parameters are counted in full.
pub fn param_count(config: &ViTConfig, removed_attn: &BTreeSet<usize>) -> Result<ParamCensus> {
    config.validate()?;
    for &r in removed_attn {
        if r >= config.depth {
            return Err(VitError::Config(format!(
                "removed index {} >= depth {}",
                r, config.depth
            )));
        }
    }
    let d = config.embed_dim as u64;
    let depth = config.depth as u64;
    let live_attn = depth - removed_attn.len() as u64;
    let hidden = config.hidden_dim() as u64;
    let classes = config.num_classes as u64;

    let patch_embed = config.patch_dim() as u64 * d + d;
    let cls_token = d;
    let pos_embed = config.seq_len() as u64 * d;
    let attention = live_attn * attention_param_cost(d);
    // norm1 + norm2 per block plus the final norm.
    let norms = depth * 4 * d + 2 * d;
    let mlp = depth * ((d * hidden + hidden) + (hidden * d + d));
    let head = d * classes + classes;
    let total = patch_embed + cls_token + pos_embed + attention + norms + mlp + head;
    Ok(ParamCensus {
        total,
        patch_embed,
        cls_token,
        pos_embed,
        attention,
        norms,
        mlp,
        head,
    })
}

// ── Checkpointing ───────────────────────────────────────────────────────

impl<T: Scalar> ViTModel<T> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(IoError::from)?);
        io::write_magic(&mut w, io::CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        write_config(&mut w, &self.config)?;
        io::write_u8(&mut w, T::DTYPE.tag())?;
        for b in &self.blocks {
            io::write_u8(&mut w, b.mode.tag())?;
            match b.mode {
                BlockMode::Full => {}
                BlockMode::Diluted { mask, compensated } => {
                    io::write_f64(&mut w, mask)?;
                    io::write_u8(&mut w, compensated as u8)?;
                }
                BlockMode::Fused { residual_scale } => {
                    io::write_f64(&mut w, residual_scale)?;
                }
            }
        }
        let tensors = self.named_tensors();
        io::write_u32(&mut w, tensors.len() as u32)?;
        for (name, t) in tensors {
            io::write_named_tensor(&mut w, &name, &io::erase(t))?;
        }
        w.flush().map_err(IoError::from)?;
        Ok(())
    }
}

fn write_config<W: Write>(w: &mut W, c: &ViTConfig) -> io::Result<()> {
    io::write_u16(w, c.image_hw.0 as u16)?;
    io::write_u16(w, c.image_hw.1 as u16)?;
    io::write_u16(w, c.patch_hw.0 as u16)?;
    io::write_u16(w, c.patch_hw.1 as u16)?;
    io::write_u32(w, c.embed_dim as u32)?;
    io::write_u32(w, c.depth as u32)?;
    io::write_u32(w, c.heads as u32)?;
    io::write_u32(w, c.mlp_ratio as u32)?;
    io::write_u32(w, c.num_classes as u32)?;
    io::write_u64(w, c.seed)
}

fn read_config<R: Read>(r: &mut R) -> io::Result<ViTConfig> {
    Ok(ViTConfig {
        image_hw: (io::read_u16(r)? as usize, io::read_u16(r)? as usize),
        patch_hw: (io::read_u16(r)? as usize, io::read_u16(r)? as usize),
        embed_dim: io::read_u32(r)? as usize,
        depth: io::read_u32(r)? as usize,
        heads: io::read_u32(r)? as usize,
        mlp_ratio: io::read_u32(r)? as usize,
        num_classes: io::read_u32(r)? as usize,
        seed: io::read_u64(r)?,
    })
}

/// Peek at a checkpoint's stored dtype without loading tensors.
pub fn checkpoint_dtype(path: &Path) -> Result<Dtype> {
    let mut r = BufReader::new(File::open(path).map_err(IoError::from)?);
    let version = io::read_magic(&mut r, io::CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion(version).into());
    }
    let _ = read_config(&mut r)?;
    let tag = io::read_u8(&mut r)?;
    Dtype::from_tag(tag).ok_or_else(|| IoError::BadDtype(tag).into())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ViTModel<T>> {
    let mut r = BufReader::new(File::open(path).map_err(IoError::from)?);
    let version = io::read_magic(&mut r, io::CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion(version).into());
    }
    let config = read_config(&mut r)?;
    config.validate()?;
    let tag = io::read_u8(&mut r)?;
    let dtype = Dtype::from_tag(tag).ok_or(IoError::BadDtype(tag))?;
    if dtype != T::DTYPE {
        return Err(IoError::Corrupt(format!(
            "checkpoint dtype {} does not match requested {}",
            dtype,
            T::DTYPE
        ))
        .into());
    }
    let mut modes = Vec::with_capacity(config.depth);
    for _ in 0..config.depth {
        let mode = match io::read_u8(&mut r)? {
            0 => BlockMode::Full,
            1 => {
                let mask = io::read_f64(&mut r)?;
                let compensated = io::read_u8(&mut r)? != 0;
                BlockMode::Diluted { mask, compensated }
            }
            2 => BlockMode::Fused {
                residual_scale: io::read_f64(&mut r)?,
            },
            other => {
                return Err(IoError::Corrupt(format!("unknown block mode tag {other}")).into())
            }
        };
        modes.push(mode);
    }
    let count = io::read_u32(&mut r)? as usize;
    let mut entries: BTreeMap<String, AnyTensor> = BTreeMap::new();
    let mut order: Vec<String> = Vec::with_capacity(count);
    for _ in 0..count {
        let (name, t) = io::read_named_tensor(&mut r)?;
        order.push(name.clone());
        entries.insert(name, t);
    }

    // Build a skeleton with fused blocks stripped, then fill tensors in
    // canonical order and verify the file carried exactly that set.
    let mut model = ViTModel::<T>::new(config)?;
    for (i, mode) in modes.into_iter().enumerate() {
        model.blocks[i].mode = mode;
        if matches!(mode, BlockMode::Fused { .. }) {
            model.blocks[i].attn = None;
            model.blocks[i].norm1 = None;
        }
    }
    let expected: Vec<String> = model
        .named_tensors()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    if order != expected {
        return Err(IoError::Corrupt(format!(
            "tensor listing mismatch: found {} entries, expected {}",
            order.len(),
            expected.len()
        ))
        .into());
    }
    fill_tensors(&mut model, &entries)?;
    Ok(model)
}

fn fill_tensors<T: Scalar>(
    model: &mut ViTModel<T>,
    entries: &BTreeMap<String, AnyTensor>,
) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    let mut loaded: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (name, shape) in &expected {
        let any = entries
            .get(name)
            .ok_or_else(|| IoError::Corrupt(format!("missing tensor {name}")))?;
        let t = io::typed::<T>(name, any)?;
        if t.shape() != shape.as_slice() {
            return Err(IoError::Corrupt(format!(
                "tensor {name}: shape {:?} does not match config-implied {:?}",
                t.shape(),
                shape
            ))
            .into());
        }
        loaded.insert(name.clone(), t.with_grad());
    }
    let mut take = |name: String| loaded.remove(&name).expect("validated above");
    model.patch_embed.weight = take("patch_embed.weight".into());
    model.patch_embed.bias = take("patch_embed.bias".into());
    model.cls_token = take("cls_token".into());
    model.pos_embed = take("pos_embed".into());
    for i in 0..model.config.depth {
        if model.blocks[i].norm1.is_some() {
            let n1 = model.blocks[i].norm1.as_mut().unwrap();
            n1.gamma = take(format!("blocks.{i}.norm1.gamma"));
            n1.beta = take(format!("blocks.{i}.norm1.beta"));
        }
        if model.blocks[i].attn.is_some() {
            let a = model.blocks[i].attn.as_mut().unwrap();
            a.q.weight = take(format!("blocks.{i}.attn.q.weight"));
            a.q.bias = take(format!("blocks.{i}.attn.q.bias"));
            a.k.weight = take(format!("blocks.{i}.attn.k.weight"));
            a.k.bias = take(format!("blocks.{i}.attn.k.bias"));
            a.v.weight = take(format!("blocks.{i}.attn.v.weight"));
            a.v.bias = take(format!("blocks.{i}.attn.v.bias"));
            a.proj.weight = take(format!("blocks.{i}.attn.proj.weight"));
            a.proj.bias = take(format!("blocks.{i}.attn.proj.bias"));
        }
        model.blocks[i].norm2.gamma = take(format!("blocks.{i}.norm2.gamma"));
        model.blocks[i].norm2.beta = take(format!("blocks.{i}.norm2.beta"));
        model.blocks[i].mlp.fc1.weight = take(format!("blocks.{i}.mlp.fc1.weight"));
        model.blocks[i].mlp.fc1.bias = take(format!("blocks.{i}.mlp.fc1.bias"));
        model.blocks[i].mlp.fc2.weight = take(format!("blocks.{i}.mlp.fc2.weight"));
        model.blocks[i].mlp.fc2.bias = take(format!("blocks.{i}.mlp.fc2.bias"));
    }
    model.final_norm.gamma = take("final_norm.gamma".into());
    model.final_norm.beta = take("final_norm.beta".into());
    model.head.weight = take("head.weight".into());
    model.head.bias = take("head.bias".into());
    Ok(())
}
