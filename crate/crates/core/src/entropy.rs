//! Gaussian-surrogate entropy of layer features.
//!
//! A layer's entropy is approximated by the sum over feature channels of the
//! log of the channel's standard deviation, computed over every sample in a
//! probe batch (batch and token positions pooled, class token included).
//! Statistics are accumulated in f64 regardless of model dtype; degenerate
//! channels are floored at `ENTROPY_EPS` inside the log so a constant channel
//! cannot poison the sum.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, AnyTensor, IoError};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};
use crate::vit::{ForwardOptions, LayerId, LayerKind, TapSpec, ViTModel, VitError};

/// Floor applied inside the log; keeps the sum finite at sigma = 0.
pub const ENTROPY_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(u64),
    #[error("invalid probe: {0}")]
    BadProbe(String),
}

pub type Result<T> = std::result::Result<T, EntropyError>;

/// Deterministic probe: a fixed set of images plus identifying metadata.
#[derive(Debug, Clone)]
pub struct Probe {
    /// `[K, H, W, C]` images in [0,1].
    pub images: Tensor<f32>,
    pub descriptor: ProbeDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeDescriptor {
    pub dataset_id: String,
    pub batch_size: usize,
    pub seed: u64,
    pub samples: usize,
}

impl Probe {
    pub fn new(images: Tensor<f32>, descriptor: ProbeDescriptor) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] == 0 {
            return Err(EntropyError::BadProbe(format!(
                "probe images must be non-empty [K,H,W,C], got {:?}",
                images.shape()
            )));
        }
        if descriptor.batch_size == 0 {
            return Err(EntropyError::BadProbe("batch_size must be positive".into()));
        }
        Ok(Probe { images, descriptor })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Batch slices `[start, end)` in fixed order.
    pub fn batch_ranges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let bs = self.descriptor.batch_size;
        (0..n.div_ceil(bs))
            .map(|i| (i * bs, ((i + 1) * bs).min(n)))
            .collect()
    }

    pub fn batch<T: Scalar>(&self, range: (usize, usize)) -> Tensor<T> {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let data: Vec<T> = self.images.data()[range.0 * per..range.1 * per]
            .iter()
            .map(|&v| T::from_f64(v as f64))
            .collect();
        Tensor::new(vec![range.1 - range.0, s[1], s[2], s[3]], data).unwrap()
    }
}

/// Streaming per-channel mean/variance (Welford), mergeable in a fixed order.
#[derive(Debug, Clone)]
pub struct ChannelAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ChannelAccumulator {
    pub fn new(channels: usize) -> Self {
        ChannelAccumulator {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Fold in a feature tensor whose last axis is the channel axis; all
    /// leading axes are pooled as samples.
    pub fn push_features<T: Scalar>(&mut self, features: &Tensor<T>) {
        let d = self.mean.len();
        debug_assert_eq!(features.shape().last().copied(), Some(d));
        for row in features.data().chunks_exact(d) {
            self.count += 1;
            let n = self.count as f64;
            for j in 0..d {
                let x = row[j].as_f64();
                let delta = x - self.mean[j];
                self.mean[j] += delta / n;
                self.m2[j] += delta * (x - self.mean[j]);
            }
        }
    }

    /// Parallel-merge rule; callers must merge in a fixed order for
    /// reproducibility.
    pub fn merge(&mut self, other: &ChannelAccumulator) {
        debug_assert_eq!(self.channels(), other.channels());
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for j in 0..self.mean.len() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    /// Population standard deviation per channel. Needs >= 2 samples.
    pub fn std(&self) -> Result<Vec<f64>> {
        if self.count < 2 {
            return Err(EntropyError::TooFewSamples(self.count));
        }
        let n = self.count as f64;
        Ok(self.m2.iter().map(|&m2| (m2 / n).max(0.0).sqrt()).collect())
    }
}

/// Per-channel population std over `[N, d]`-shaped features (leading axes
/// pooled), two-pass. The streaming accumulator must agree with this.
pub fn channel_std<T: Scalar>(features: &Tensor<T>) -> Result<Vec<f64>> {
    let d = *features
        .shape()
        .last()
        .ok_or_else(|| EntropyError::BadProbe("features must have a channel axis".into()))?;
    let n = features.numel() / d;
    if n < 2 {
        return Err(EntropyError::TooFewSamples(n as u64));
    }
    let data = features.data();
    let mut mean = vec![0.0f64; d];
    for row in data.chunks_exact(d) {
        for j in 0..d {
            mean[j] += row[j].as_f64();
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for row in data.chunks_exact(d) {
        for j in 0..d {
            let c = row[j].as_f64() - mean[j];
            var[j] += c * c;
        }
    }
    Ok(var.iter().map(|&v| (v / n as f64).sqrt()).collect())
}

/// `H_sigma = sum_j log(max(sigma_j, eps))`. Finite for any input.
pub fn layer_entropy(sigma: &[f64], eps: f64) -> f64 {
    sigma.iter().map(|&s| s.max(eps).ln()).sum()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub layer_id: LayerId,
    pub channel_count: usize,
    pub sigma: Vec<f64>,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyEntry {
    pub block: usize,
    pub kind: LayerKind,
    pub h_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub probe: ProbeDescriptor,
    pub entries: Vec<EntropyEntry>,
}

impl EntropyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("block,kind,h_sigma\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.block, e.kind, e.h_sigma));
        }
        s
    }

    pub fn entries_from_csv(csv: &str) -> Result<Vec<EntropyEntry>> {
        let mut out = Vec::new();
        for (i, line) in csv.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let (b, k, h) = (parts.next(), parts.next(), parts.next());
            let (b, k, h) = match (b, k, h) {
                (Some(b), Some(k), Some(h)) => (b, k, h),
                _ => {
                    return Err(EntropyError::BadProbe(format!(
                        "csv line {i}: expected 3 fields"
                    )))
                }
            };
            let kind = match k {
                "attn" => LayerKind::Attention,
                "mlp" => LayerKind::Mlp,
                other => {
                    return Err(EntropyError::BadProbe(format!(
                        "csv line {i}: unknown kind {other}"
                    )))
                }
            };
            out.push(EntropyEntry {
                block: b
                    .parse()
                    .map_err(|_| EntropyError::BadProbe(format!("csv line {i}: bad block")))?,
                kind,
                h_sigma: h
                    .parse()
                    .map_err(|_| EntropyError::BadProbe(format!("csv line {i}: bad value")))?,
            });
        }
        Ok(out)
    }

    pub fn entry(&self, block: usize, kind: LayerKind) -> Option<&EntropyEntry> {
        self.entries
            .iter()
            .find(|e| e.block == block && e.kind == kind)
    }
}

fn accumulate_batches<T: Scalar>(
    model: &ViTModel<T>,
    probe: &Probe,
    taps: &[LayerId],
) -> Result<Vec<ChannelAccumulator>> {
    let d = model.config.embed_dim;
    let ranges = probe.batch_ranges();
    let spec = TapSpec::from_ids(taps.iter().copied());
    // Batches run in parallel; accumulators merge in fixed batch order.
    let per_batch: Vec<Result<Vec<ChannelAccumulator>>> = ranges
        .par_iter()
        .map(|&range| {
            let images = probe.batch::<T>(range);
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                taps: spec.clone(),
                ..Default::default()
            };
            let pass = model.forward(&mut tape, &images, &opts)?;
            let mut accs: Vec<ChannelAccumulator> = Vec::with_capacity(taps.len());
            for id in taps {
                let mut acc = ChannelAccumulator::new(d);
                acc.push_features(tape.value(pass.captures[id]));
                accs.push(acc);
            }
            Ok(accs)
        })
        .collect();
    let mut merged: Vec<ChannelAccumulator> = vec![ChannelAccumulator::new(d); taps.len()];
    for batch in per_batch {
        let batch = batch?;
        for (m, b) in merged.iter_mut().zip(&batch) {
            m.merge(b);
        }
    }
    Ok(merged)
}

/// Entropy of every live attention and MLP output over a deterministic probe.
pub fn entropy_profile<T: Scalar>(model: &ViTModel<T>, probe: &Probe) -> Result<EntropyReport> {
    if probe.is_empty() {
        return Err(EntropyError::BadProbe("probe is empty".into()));
    }
    let taps = model.live_taps();
    let accs = accumulate_batches(model, probe, &taps)?;
    let mut entries = Vec::with_capacity(taps.len());
    for (id, acc) in taps.iter().zip(&accs) {
        let sigma = acc.std()?;
        entries.push(EntropyEntry {
            block: id.block,
            kind: id.kind,
            h_sigma: layer_entropy(&sigma, ENTROPY_EPS),
        });
    }
    Ok(EntropyReport {
        probe: probe.descriptor.clone(),
        entries,
    })
}

/// Per-channel stats (not just the entropy scalar) for the given taps.
pub fn channel_stats<T: Scalar>(
    model: &ViTModel<T>,
    probe: &Probe,
    taps: &[LayerId],
) -> Result<Vec<ChannelStats>> {
    let accs = accumulate_batches(model, probe, taps)?;
    taps.iter()
        .zip(&accs)
        .map(|(id, acc)| {
            Ok(ChannelStats {
                layer_id: *id,
                channel_count: acc.channels(),
                sigma: acc.std()?,
                sample_count: acc.count(),
            })
        })
        .collect()
}

/// Run the probe and write every tapped feature tensor (all probe samples
/// concatenated) to an "EACT" container.
pub fn dump_activations<T: Scalar>(
    model: &ViTModel<T>,
    probe: &Probe,
    taps: &[LayerId],
    path: &Path,
) -> Result<()> {
    if probe.is_empty() {
        return Err(EntropyError::BadProbe("probe is empty".into()));
    }
    let spec = TapSpec::from_ids(taps.iter().copied());
    let mut collected: Vec<Vec<T>> = vec![Vec::new(); taps.len()];
    let mut trailing: Vec<Vec<usize>> = vec![Vec::new(); taps.len()];
    for range in probe.batch_ranges() {
        let images = probe.batch::<T>(range);
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            taps: spec.clone(),
            ..Default::default()
        };
        let pass = model.forward(&mut tape, &images, &opts)?;
        for (slot, id) in taps.iter().enumerate() {
            let t = tape.value(pass.captures[id]);
            collected[slot].extend_from_slice(t.data());
            trailing[slot] = t.shape()[1..].to_vec();
        }
    }
    let entries: Vec<(String, AnyTensor)> = taps
        .iter()
        .enumerate()
        .map(|(slot, id)| {
            let mut shape = vec![probe.len()];
            shape.extend_from_slice(&trailing[slot]);
            let tensor = Tensor::<T>::new(shape, std::mem::take(&mut collected[slot]))
                .expect("collected feature size");
            (id.to_string(), io::erase(&tensor))
        })
        .collect();
    io::write_activations(path, &entries)?;
    Ok(())
}

pub fn load_activations(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    Ok(io::read_activations(path)?)
}

/// Offline oracle: recompute `H_sigma` per dumped layer with the two-pass
/// estimator.
pub fn entropy_from_dump(path: &Path, eps: f64) -> Result<Vec<(String, f64)>> {
    let entries = load_activations(path)?;
    entries
        .into_iter()
        .map(|(name, any)| {
            let sigma = match &any {
                AnyTensor::F32(t) => channel_std(t)?,
                AnyTensor::F64(t) => channel_std(t)?,
            };
            Ok((name, layer_entropy(&sigma, eps)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_features_have_zero_std() {
        let f = Tensor::<f64>::full(vec![10, 4], 3.25);
        let sigma = channel_std(&f).unwrap();
        assert_eq!(sigma, vec![0.0; 4]);
    }

    #[test]
    fn two_sample_population_std() {
        let f = Tensor::<f64>::from_f64_slice(vec![2, 2], &[0.0, 0.0, 2.0, 2.0]).unwrap();
        let sigma = channel_std(&f).unwrap();
        assert_eq!(sigma, vec![1.0, 1.0]);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let f = Tensor::<f64>::zeros(vec![1, 4]);
        assert!(matches!(
            channel_std(&f),
            Err(EntropyError::TooFewSamples(1))
        ));
        let mut acc = ChannelAccumulator::new(4);
        acc.push_features(&f);
        assert!(acc.std().is_err());
    }

    #[test]
    fn sampling_oracle_recovers_known_sigma() {
        // 1e5 samples from N(0, e^2): sigma_hat within 2% of e per channel.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let d = 4usize;
        let n = 100_000usize;
        let e = std::f64::consts::E;
        let data: Vec<f64> = (0..n * d)
            .map(|_| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                z * e
            })
            .collect();
        let f = Tensor::<f64>::new(vec![n, d], data).unwrap();
        let sigma = channel_std(&f).unwrap();
        for s in &sigma {
            assert!((s - e).abs() / e < 0.02, "sigma {s}");
        }
        let h = layer_entropy(&sigma, ENTROPY_EPS);
        assert!((h - d as f64).abs() / (d as f64) < 0.02, "H {h}");
    }

    #[test]
    fn entropy_analytic_values() {
        assert_eq!(layer_entropy(&[1.0, 1.0, 1.0], ENTROPY_EPS), 0.0);
        let d = 7;
        let h = layer_entropy(&vec![std::f64::consts::E; d], ENTROPY_EPS);
        assert!((h - d as f64).abs() < 1e-12);
        // A zero sigma contributes log(eps), never NaN or -inf.
        let h = layer_entropy(&[0.0, 1.0], 1e-12);
        assert!(h.is_finite());
        assert!((h - (1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn welford_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 6usize;
        let n = 4000usize;
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect();
        let f = Tensor::<f64>::new(vec![n, d], data).unwrap();
        let two_pass = channel_std(&f).unwrap();

        // Stream in uneven chunks, then merge in order.
        let mut parts = Vec::new();
        for chunk in f.data().chunks(997 * d) {
            let rows = chunk.len() / d;
            let t = Tensor::<f64>::new(vec![rows, d], chunk.to_vec()).unwrap();
            let mut acc = ChannelAccumulator::new(d);
            acc.push_features(&t);
            parts.push(acc);
        }
        let mut merged = ChannelAccumulator::new(d);
        for p in &parts {
            merged.merge(p);
        }
        let streamed = merged.std().unwrap();
        for (a, b) in streamed.iter().zip(&two_pass) {
            assert!((a - b).abs() / b.abs().max(1e-12) < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn scale_law_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 5usize;
        let n = 500usize;
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let scaled: Vec<f64> = data.iter().map(|v| v * 3.5).collect();
        let f = Tensor::<f64>::new(vec![n, d], data).unwrap();
        let fs = Tensor::<f64>::new(vec![n, d], scaled).unwrap();
        let h = layer_entropy(&channel_std(&f).unwrap(), ENTROPY_EPS);
        let hs = layer_entropy(&channel_std(&fs).unwrap(), ENTROPY_EPS);
        let want = d as f64 * 3.5f64.ln();
        assert!(((hs - h) - want).abs() < 1e-8, "{} vs {}", hs - h, want);
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 3usize;
        let n = 64usize;
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>()).collect();
        let f = Tensor::<f64>::new(vec![n, d], data.clone()).unwrap();
        let mut rows: Vec<&[f64]> = data.chunks(d).collect();
        rows.reverse();
        let shuffled: Vec<f64> = rows.concat();
        let fp = Tensor::<f64>::new(vec![n, d], shuffled).unwrap();
        let a = channel_std(&f).unwrap();
        let b = channel_std(&fp).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_weight_model_sits_at_the_eps_floor() {
        use crate::vit::{ViTConfig, ViTModel};
        let cfg = ViTConfig {
            image_hw: (16, 16),
            patch_hw: (8, 8),
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            seed: 0,
        };
        let mut model = ViTModel::<f64>::new(cfg).unwrap();
        for (name, _) in model
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect::<Vec<_>>()
        {
            let t = model.tensor_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        // Every feature is identically zero, so each channel's sigma is 0 and
        // the entropy collapses to d * ln(eps).
        let images = Tensor::<f32>::full(vec![4, 16, 16, 3], 0.5);
        let probe = Probe::new(
            images,
            ProbeDescriptor {
                dataset_id: "const".into(),
                batch_size: 2,
                seed: 0,
                samples: 4,
            },
        )
        .unwrap();
        let report = entropy_profile(&model, &probe).unwrap();
        let floor = 8.0 * ENTROPY_EPS.ln();
        for e in &report.entries {
            assert!(
                (e.h_sigma - floor).abs() < 1e-6,
                "{:?} h {} vs floor {floor}",
                (e.block, e.kind),
                e.h_sigma
            );
        }
    }

    #[test]
    fn profile_is_deterministic_across_runs() {
        use crate::dataset::{synthesize, SynthSpec};
        use crate::vit::{ViTConfig, ViTModel};
        let cfg = ViTConfig {
            image_hw: (16, 16),
            patch_hw: (8, 8),
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            seed: 9,
        };
        let model = ViTModel::<f64>::new(cfg).unwrap();
        let ds = synthesize(
            &SynthSpec {
                classes: 4,
                per_class: 8,
                image: 16,
                ..Default::default()
            },
            "train",
        )
        .unwrap();
        let probe = ds.probe(16, 3, 8).unwrap();
        let a = entropy_profile(&model, &probe).unwrap();
        let b = entropy_profile(&model, &probe).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip() {
        let report = EntropyReport {
            probe: ProbeDescriptor {
                dataset_id: "synth".into(),
                batch_size: 8,
                seed: 1,
                samples: 16,
            },
            entries: vec![
                EntropyEntry {
                    block: 0,
                    kind: LayerKind::Attention,
                    h_sigma: -3.25,
                },
                EntropyEntry {
                    block: 0,
                    kind: LayerKind::Mlp,
                    h_sigma: 1.5e-3,
                },
            ],
        };
        let csv = report.to_csv();
        let parsed = EntropyReport::entries_from_csv(&csv).unwrap();
        assert_eq!(parsed, report.entries);
        let json = serde_json::to_string(&report).unwrap();
        let back: EntropyReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
