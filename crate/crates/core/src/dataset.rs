//! Labeled image datasets: the "ELTD" container, a procedural synthetic
//! benchmark, deterministic batching, and top-k evaluation.
//!
//! The synthetic classes are compositional on purpose: each class id is a
//! bit pattern over per-quadrant texture attributes (orientation of the
//! top-left and bottom-right gratings, spatial frequency of the top-right
//! and bottom-left). No single patch determines the class, so a classifier
//! must aggregate evidence across the image — which is exactly the job of
//! the attention layers under study.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{Probe, ProbeDescriptor};
use crate::io::{self, IoError};
use crate::seeds;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::vit::{ForwardOptions, ViTModel, VitError};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone)]
pub struct LabeledTensorDataset {
    /// `[N, H, W, C]`, f32 in [0, 1].
    pub images: Tensor<f32>,
    pub labels: Vec<u32>,
    pub num_classes: u16,
    pub split: String,
}

impl LabeledTensorDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<u32>,
        num_classes: u16,
        split: impl Into<String>,
    ) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(DatasetError::Invalid(format!(
                "images must be [N,H,W,C], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(DatasetError::Invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes as usize) {
            return Err(DatasetError::Invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledTensorDataset {
            images,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.images.shape();
        let mut w = BufWriter::new(File::create(path).map_err(IoError::from)?);
        io::write_magic(&mut w, io::DATASET_MAGIC, DATASET_VERSION)?;
        io::write_u32(&mut w, s[0] as u32)?;
        io::write_u16(&mut w, s[1] as u16)?;
        io::write_u16(&mut w, s[2] as u16)?;
        io::write_u16(&mut w, s[3] as u16)?;
        io::write_u16(&mut w, self.num_classes)?;
        for &v in self.images.data() {
            w.write_all(&v.to_le_bytes()).map_err(IoError::from)?;
        }
        for &l in &self.labels {
            io::write_u32(&mut w, l)?;
        }
        w.flush().map_err(IoError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(IoError::from)?);
        let version = io::read_magic(&mut r, io::DATASET_MAGIC)?;
        if version != DATASET_VERSION {
            return Err(IoError::UnsupportedVersion(version).into());
        }
        let n = io::read_u32(&mut r)? as usize;
        let h = io::read_u16(&mut r)? as usize;
        let w = io::read_u16(&mut r)? as usize;
        let c = io::read_u16(&mut r)? as usize;
        let num_classes = io::read_u16(&mut r)?;
        let mut buf = vec![0u8; n * h * w * c * 4];
        r.read_exact(&mut buf)
            .map_err(|_| IoError::Corrupt("truncated image payload".into()))?;
        let images: Vec<f32> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(io::read_u32(&mut r)?);
        }
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unknown".into());
        LabeledTensorDataset::new(
            Tensor::new(vec![n, h, w, c], images)
                .map_err(|e| DatasetError::Invalid(e.to_string()))?,
            labels,
            num_classes,
            split,
        )
    }

    /// Images `[start, end)` converted to the model dtype.
    pub fn batch_images<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let src = self.images.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(src[i * per..(i + 1) * per].iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data).unwrap()
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Per-epoch batch index lists: seeded shuffle, fixed batch size.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x5A17 ^ epoch));
        idx.shuffle(&mut rng);
        idx.chunks(batch_size).map(|c| c.to_vec()).collect()
    }

    /// Deterministic probe subset: seeded sample without replacement, kept in
    /// index order.
    pub fn probe(&self, size: usize, seed: u64, batch_size: usize) -> Result<Probe> {
        if self.is_empty() {
            return Err(DatasetError::Invalid("dataset is empty".into()));
        }
        let take = size.min(self.len());
        let indices: Vec<usize> = if take == self.len() {
            (0..self.len()).collect()
        } else {
            let mut all: Vec<usize> = (0..self.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 0x9806));
            all.shuffle(&mut rng);
            let mut subset: Vec<usize> = all[..take].to_vec();
            subset.sort_unstable();
            subset
        };
        let images = self.batch_images::<f32>(&indices);
        Probe::new(
            images,
            ProbeDescriptor {
                dataset_id: self.split.clone(),
                batch_size,
                seed,
                samples: take,
            },
        )
        .map_err(|e| DatasetError::Invalid(e.to_string()))
    }
}

// ── Synthetic benchmark ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: u16,
    pub per_class: u32,
    /// Square image side in pixels.
    pub image: usize,
    pub noise_std: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 8,
            per_class: 256,
            image: 24,
            noise_std: 0.06,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.classes) {
            return Err(DatasetError::Invalid(format!(
                "classes must be in 2..=16, got {}",
                self.classes
            )));
        }
        if self.per_class == 0 {
            return Err(DatasetError::Invalid("per_class must be positive".into()));
        }
        if self.image < 8 || self.image % 2 != 0 {
            return Err(DatasetError::Invalid(format!(
                "image side must be even and >= 8, got {}",
                self.image
            )));
        }
        if !(0.0..1.0).contains(&self.noise_std) {
            return Err(DatasetError::Invalid("noise_std must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// Class id -> per-quadrant (orientation radians, cycles, phase) attributes.
/// Bits: 0 = top-left orientation, 1 = bottom-right orientation,
/// 2 = top-right frequency, 3 = bottom-left frequency. Phases are fixed per
/// (quadrant, bit) so each attribute is a stable texture template; no single
/// quadrant identifies the class.
fn class_attributes(class: u16) -> [(f32, f32, f32); 4] {
    let bit = |b: u16| (class >> b) & 1;
    let phase = |q: u16, b: u16| (q * 2 + b) as f32 * 2.399 + 0.7;
    let tl = (
        if bit(0) == 0 { 0.0 } else { 90.0f32.to_radians() },
        2.0,
        phase(0, bit(0)),
    );
    let br = (
        if bit(1) == 0 {
            45.0f32.to_radians()
        } else {
            135.0f32.to_radians()
        },
        2.0,
        phase(3, bit(1)),
    );
    let tr = (
        20.0f32.to_radians(),
        if bit(2) == 0 { 2.0 } else { 4.0 },
        phase(1, bit(2)),
    );
    let bl = (
        110.0f32.to_radians(),
        if bit(3) == 0 { 2.0 } else { 4.0 },
        phase(2, bit(3)),
    );
    [tl, tr, bl, br]
}

/// Deterministic procedural dataset; same spec and seed give bit-identical
/// tensors. Labels cycle round-robin so counts are exact per class.
pub fn synthesize(spec: &SynthSpec, split: &str) -> Result<LabeledTensorDataset> {
    spec.validate()?;
    let s = spec.image;
    let half = s / 2;
    let n = spec.classes as usize * spec.per_class as usize;
    let channels = crate::vit::IMAGE_CHANNELS;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        spec.seed,
        match split {
            "train" => 0x7121,
            _ => 0xEA1D,
        },
    ));
    let mut images = vec![0.0f32; n * s * s * channels];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % spec.classes as usize) as u16;
        labels.push(class as u32);
        let attrs = class_attributes(class);
        // Per-sample jitter: small orientation wobble and amplitude only;
        // phases stay anchored so the textures are learnable templates.
        let jitter: Vec<(f32, f32)> = (0..4)
            .map(|_| {
                (
                    (rng.gen::<f32>() - 0.5) * 4.0f32.to_radians(),
                    0.35 + (rng.gen::<f32>() - 0.5) * 0.1,
                )
            })
            .collect();
        let base = i * s * s * channels;
        for y in 0..s {
            for x in 0..s {
                // quadrants: 0 TL, 1 TR, 2 BL, 3 BR
                let q = (y >= half) as usize * 2 + (x >= half) as usize;
                let (theta, cycles, phase) = attrs[q];
                let (wobble, amp) = jitter[q];
                let u = (x % half) as f32 / half as f32;
                let v = (y % half) as f32 / half as f32;
                let t = theta + wobble;
                let proj = u * t.cos() + v * t.sin();
                let signal = 0.5 + amp * (std::f32::consts::TAU * cycles * proj + phase).sin();
                for c in 0..channels {
                    let noise: f32 = {
                        let z: f32 = rng.sample(rand_distr::StandardNormal);
                        z * spec.noise_std
                    };
                    images[base + (y * s + x) * channels + c] = (signal + noise).clamp(0.0, 1.0);
                }
            }
        }
    }
    LabeledTensorDataset::new(
        Tensor::new(vec![n, s, s, channels], images)
            .map_err(|e| DatasetError::Invalid(e.to_string()))?,
        labels,
        spec.classes,
        split,
    )
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub samples: usize,
}

/// Top-1/top-5 accuracy over a dataset, optionally with attention layers
/// masked to identity. Deterministic: fixed batch order, no shuffling.
pub fn evaluate<T: Scalar>(
    model: &ViTModel<T>,
    dataset: &LabeledTensorDataset,
    batch_size: usize,
    masked: &BTreeSet<usize>,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(DatasetError::Invalid("empty eval dataset".into()));
    }
    let k = 5.min(model.config.num_classes);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut hit1 = 0usize;
    let mut hitk = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let images = dataset.batch_images::<T>(chunk);
        let labels = dataset.batch_labels(chunk);
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            masked: masked.clone(),
            ..Default::default()
        };
        let pass = model.forward(&mut tape, &images, &opts)?;
        let logits = tape.value(pass.logits);
        let c = model.config.num_classes;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &logits.data()[bi * c..(bi + 1) * c];
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| {
                row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal)
            });
            if order[0] == label as usize {
                hit1 += 1;
            }
            if order[..k].contains(&(label as usize)) {
                hitk += 1;
            }
        }
    }
    Ok(EvalResult {
        top1: hit1 as f64 / dataset.len() as f64,
        top5: hitk as f64 / dataset.len() as f64,
        samples: dataset.len(),
    })
}
