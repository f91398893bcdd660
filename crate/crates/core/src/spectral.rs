//! Frequency analysis of per-block output features.
//!
//! Patch-token features are laid back onto their spatial grid per channel
//! and put through an unnormalized forward 2-D DFT. Each frequency bin
//! `(u, v)` gets a radial coordinate `pi * max(|fu|, |fv|)` where `fu, fv`
//! are the signed frequencies normalized to Nyquist (Chebyshev radius on
//! `[0, pi]`); bins partition into low `[0, 0.3pi)`, medium `[0.3pi, 0.7pi)`
//! and high `[0.7pi, pi]`. Radial profiles report `log(1 + |X|)` averaged
//! over batch and channels; band energies use raw `|X|^2` so Parseval holds.

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{Probe, ProbeDescriptor};
use crate::tensor::{Scalar, Tape, Tensor, TensorError};
use crate::vit::{ForwardOptions, LayerId, TapSpec, ViTModel, VitError};

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error("grid error: {0}")]
    Grid(String),
}

pub type Result<T> = std::result::Result<T, SpectralError>;

pub const LOW_BAND_EDGE: f64 = 0.3 * std::f64::consts::PI;
pub const MID_BAND_EDGE: f64 = 0.7 * std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialBin {
    /// Bin center on [0, pi].
    pub freq: f64,
    /// Mean log(1 + |X|) over every cell mapped to this bin.
    pub log_amplitude: f64,
    /// Total |X|^2 over every cell mapped to this bin.
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    pub grid: (usize, usize),
    pub bins: Vec<RadialBin>,
}

impl RadialProfile {
    pub fn total_energy(&self) -> f64 {
        self.bins.iter().map(|b| b.energy).sum()
    }
}

/// Band split of a radial profile. A bin exactly on a boundary belongs to
/// the upper band; pi itself is high.
pub fn band_energy(profile: &RadialProfile) -> (f64, f64, f64) {
    let (mut low, mut mid, mut high) = (0.0, 0.0, 0.0);
    for b in &profile.bins {
        if b.freq < LOW_BAND_EDGE {
            low += b.energy;
        } else if b.freq < MID_BAND_EDGE {
            mid += b.energy;
        } else {
            high += b.energy;
        }
    }
    (low, mid, high)
}

struct BinAccum {
    sum_log: f64,
    cells: u64,
    energy: f64,
}

/// 2-D unnormalized forward DFT of one real map, in place over a complex
/// buffer (rows then columns).
fn dft2(map: &mut [Complex64], gh: usize, gw: usize, planner: &mut FftPlanner<f64>) {
    let row_fft = planner.plan_fft_forward(gw);
    for row in map.chunks_exact_mut(gw) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(gh);
    let mut col = vec![Complex64::new(0.0, 0.0); gh];
    for c in 0..gw {
        for r in 0..gh {
            col[r] = map[r * gw + c];
        }
        col_fft.process(&mut col);
        for r in 0..gh {
            map[r * gw + c] = col[r];
        }
    }
}

/// Bin index and count for a grid: `ceil(max(gh,gw)/2) + 1` bins spanning
/// [0, pi] by normalized Chebyshev radius.
fn bin_count(gh: usize, gw: usize) -> usize {
    gh.max(gw).div_ceil(2) + 1
}

fn bin_of(u: usize, v: usize, gh: usize, gw: usize, n_bins: usize) -> usize {
    let ku = u.min(gh - u) as f64; // signed frequency index magnitude
    let kv = v.min(gw - v) as f64;
    let r = (2.0 * ku / gh as f64).max(2.0 * kv / gw as f64); // [0, 1]
    (r * (n_bins - 1) as f64).round() as usize
}

fn accumulate_spectrum<T: Scalar>(
    features: &Tensor<T>,
    grid: (usize, usize),
    accums: &mut [BinAccum],
    planner: &mut FftPlanner<f64>,
) -> Result<()> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(SpectralError::Grid(format!(
            "features must be [B, P+1, d], got {:?}",
            shape
        )));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (gh, gw) = grid;
    if gh * gw + 1 != t {
        return Err(SpectralError::Grid(format!(
            "grid {}x{} does not match {} patch tokens",
            gh,
            gw,
            t - 1
        )));
    }
    let n_bins = accums.len();
    let data = features.data();
    let mut map = vec![Complex64::new(0.0, 0.0); gh * gw];
    for bi in 0..b {
        for ch in 0..d {
            // Patch token p sits at grid (p / gw, p % gw); token 0 is the
            // class token and is dropped.
            for p in 0..gh * gw {
                let val = data[bi * t * d + (p + 1) * d + ch].as_f64();
                map[p] = Complex64::new(val, 0.0);
            }
            dft2(&mut map, gh, gw, planner);
            for u in 0..gh {
                for v in 0..gw {
                    let amp = map[u * gw + v].norm();
                    let k = bin_of(u, v, gh, gw, n_bins);
                    accums[k].sum_log += (1.0 + amp).ln();
                    accums[k].cells += 1;
                    accums[k].energy += amp * amp;
                }
            }
        }
    }
    Ok(())
}

fn finish_profile(grid: (usize, usize), accums: Vec<BinAccum>) -> RadialProfile {
    let n_bins = accums.len();
    let bins = accums
        .into_iter()
        .enumerate()
        .map(|(k, a)| RadialBin {
            freq: std::f64::consts::PI * k as f64 / (n_bins - 1) as f64,
            log_amplitude: if a.cells > 0 {
                a.sum_log / a.cells as f64
            } else {
                0.0
            },
            energy: a.energy,
        })
        .collect();
    RadialProfile { grid, bins }
}

/// Radial amplitude/energy profile of one feature tensor `[B, P+1, d]`.
pub fn block_spectrum<T: Scalar>(features: &Tensor<T>, grid: (usize, usize)) -> Result<RadialProfile> {
    let mut planner = FftPlanner::new();
    let mut accums: Vec<BinAccum> = (0..bin_count(grid.0, grid.1))
        .map(|_| BinAccum {
            sum_log: 0.0,
            cells: 0,
            energy: 0.0,
        })
        .collect();
    accumulate_spectrum(features, grid, &mut accums, &mut planner)?;
    Ok(finish_profile(grid, accums))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpectrum {
    pub block: usize,
    pub low: f64,
    pub mid: f64,
    pub high: f64,
    pub profile: RadialProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub probe: ProbeDescriptor,
    pub grid: (usize, usize),
    pub blocks: Vec<BlockSpectrum>,
}

impl SpectrumReport {
    pub fn profile_csv(&self) -> String {
        let mut s = String::from("block,bin_freq,log_amplitude\n");
        for b in &self.blocks {
            for bin in &b.profile.bins {
                s.push_str(&format!("{},{},{}\n", b.block, bin.freq, bin.log_amplitude));
            }
        }
        s
    }

    pub fn band_csv(&self) -> String {
        let mut s = String::from("block,low,mid,high\n");
        for b in &self.blocks {
            s.push_str(&format!("{},{},{},{}\n", b.block, b.low, b.mid, b.high));
        }
        s
    }
}

/// Per-block spectra of every block's MLP output over a probe.
pub fn model_spectrum<T: Scalar>(model: &ViTModel<T>, probe: &Probe) -> Result<SpectrumReport> {
    let cfg = &model.config;
    let grid = (
        cfg.image_hw.0 / cfg.patch_hw.0,
        cfg.image_hw.1 / cfg.patch_hw.1,
    );
    let depth = cfg.depth;
    let taps = TapSpec::from_ids((0..depth).map(LayerId::mlp));
    let mut planner = FftPlanner::new();
    let mut per_block: Vec<Vec<BinAccum>> = (0..depth)
        .map(|_| {
            (0..bin_count(grid.0, grid.1))
                .map(|_| BinAccum {
                    sum_log: 0.0,
                    cells: 0,
                    energy: 0.0,
                })
                .collect()
        })
        .collect();
    for range in probe.batch_ranges() {
        let images = probe.batch::<T>(range);
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            taps: taps.clone(),
            ..Default::default()
        };
        let pass = model.forward(&mut tape, &images, &opts)?;
        for i in 0..depth {
            let f = tape.value(pass.captures[&LayerId::mlp(i)]);
            accumulate_spectrum(f, grid, &mut per_block[i], &mut planner)?;
        }
    }
    let blocks = per_block
        .into_iter()
        .enumerate()
        .map(|(i, accums)| {
            let profile = finish_profile(grid, accums);
            let (low, mid, high) = band_energy(&profile);
            BlockSpectrum {
                block: i,
                low,
                mid,
                high,
                profile,
            }
        })
        .collect();
    Ok(SpectrumReport {
        probe: probe.descriptor.clone(),
        grid,
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDelta {
    pub block: usize,
    pub d_low: f64,
    pub d_mid: f64,
    pub d_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumComparison {
    pub a: SpectrumReport,
    pub b: SpectrumReport,
    /// b minus a, per block.
    pub deltas: Vec<BandDelta>,
}

impl SpectrumComparison {
    pub fn delta_csv(&self) -> String {
        let mut s = String::from("block,d_low,d_mid,d_high\n");
        for d in &self.deltas {
            s.push_str(&format!("{},{},{},{}\n", d.block, d.d_low, d.d_mid, d.d_high));
        }
        s
    }
}

/// Spectra of two same-depth models on one probe, with per-block band deltas
/// (model_b minus model_a).
pub fn compare_spectra<T: Scalar>(
    model_a: &ViTModel<T>,
    model_b: &ViTModel<T>,
    probe: &Probe,
) -> Result<SpectrumComparison> {
    if model_a.config.depth != model_b.config.depth {
        return Err(SpectralError::Grid("model depths differ".into()));
    }
    let a = model_spectrum(model_a, probe)?;
    let b = model_spectrum(model_b, probe)?;
    let deltas = a
        .blocks
        .iter()
        .zip(&b.blocks)
        .map(|(x, y)| BandDelta {
            block: x.block,
            d_low: y.low - x.low,
            d_mid: y.mid - x.mid,
            d_high: y.high - x.high,
        })
        .collect();
    Ok(SpectrumComparison { a, b, deltas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Wrap a single spatial map as a [1, P+1, 1] feature tensor (class
    /// token slot zeroed).
    fn as_features(map: &[f64], gh: usize, gw: usize) -> Tensor<f64> {
        let mut data = vec![0.0];
        data.extend_from_slice(map);
        Tensor::new(vec![1, gh * gw + 1, 1], data).unwrap()
    }

    #[test]
    fn constant_map_is_dc_only() {
        let (gh, gw) = (4, 4);
        let map = vec![1.5; gh * gw];
        let p = block_spectrum(&as_features(&map, gh, gw), (gh, gw)).unwrap();
        assert!(p.bins[0].energy > 0.0);
        for b in &p.bins[1..] {
            assert!(b.energy <= 1e-10, "freq {} energy {}", b.freq, b.energy);
        }
        let (low, mid, high) = band_energy(&p);
        assert!(low > 0.0 && mid == 0.0 && high == 0.0);
    }

    #[test]
    fn checkerboard_is_nyquist_only() {
        let (gh, gw) = (4, 4);
        let map: Vec<f64> = (0..gh * gw)
            .map(|i| if (i / gw + i % gw) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let p = block_spectrum(&as_features(&map, gh, gw), (gh, gw)).unwrap();
        let (low, mid, high) = band_energy(&p);
        assert!(high > 0.0);
        assert!(low.abs() <= 1e-10 && mid.abs() <= 1e-10, "low {low} mid {mid}");
        // all energy in the last (pi) bin
        let last = p.bins.last().unwrap();
        assert!((last.energy - p.total_energy()).abs() <= 1e-10);
    }

    #[test]
    fn parseval_under_unnormalized_forward() {
        let (gh, gw) = (6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let p = block_spectrum(&as_features(&map, gh, gw), (gh, gw)).unwrap();
        let spatial: f64 = map.iter().map(|v| v * v).sum();
        let want = (gh * gw) as f64 * spatial;
        let got = p.total_energy();
        assert!(
            (got - want).abs() / want < 1e-8,
            "parseval {got} vs {want}"
        );
    }

    #[test]
    fn bands_partition_total_energy() {
        let (gh, gw) = (8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
        let p = block_spectrum(&as_features(&map, gh, gw), (gh, gw)).unwrap();
        let (low, mid, high) = band_energy(&p);
        let total = p.total_energy();
        assert!(((low + mid + high) - total).abs() / total < 1e-10);
    }

    #[test]
    fn circular_shift_leaves_amplitudes_unchanged() {
        let (gh, gw) = (4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
        let mut shifted = vec![0.0; gh * gw];
        for y in 0..gh {
            for x in 0..gw {
                shifted[((y + 1) % gh) * gw + (x + 2) % gw] = map[y * gw + x];
            }
        }
        let a = block_spectrum(&as_features(&map, gh, gw), (gh, gw)).unwrap();
        let b = block_spectrum(&as_features(&shifted, gh, gw), (gh, gw)).unwrap();
        for (x, y) in a.bins.iter().zip(&b.bins) {
            assert!((x.energy - y.energy).abs() < 1e-8);
            assert!((x.log_amplitude - y.log_amplitude).abs() < 1e-8);
        }
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let f = Tensor::<f64>::zeros(vec![1, 10, 2]);
        assert!(block_spectrum(&f, (4, 4)).is_err());
    }

    #[test]
    fn bin_boundaries_follow_upper_band_rule() {
        // A 20-cell grid puts bin 3 of 11 exactly at 0.3*pi.
        let n_bins = bin_count(20, 20);
        assert_eq!(n_bins, 11);
        let f3 = std::f64::consts::PI * 3.0 / 10.0;
        assert!(f3 >= LOW_BAND_EDGE || f3 < LOW_BAND_EDGE);
        let profile = RadialProfile {
            grid: (20, 20),
            bins: (0..n_bins)
                .map(|k| RadialBin {
                    freq: std::f64::consts::PI * k as f64 / 10.0,
                    log_amplitude: 0.0,
                    energy: 1.0,
                })
                .collect(),
        };
        let (low, mid, high) = band_energy(&profile);
        // bins 0,1,2 -> low; 3..6 -> mid (0.3pi inclusive); 7..10 -> high
        assert_eq!(low, 3.0);
        assert_eq!(mid, 4.0);
        assert_eq!(high, 4.0);
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        use crate::dataset::{synthesize, SynthSpec};
        use crate::vit::{ViTConfig, ViTModel};
        let cfg = ViTConfig {
            image_hw: (16, 16),
            patch_hw: (4, 4),
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            seed: 3,
        };
        let model = ViTModel::<f64>::new(cfg).unwrap();
        let ds = synthesize(
            &SynthSpec {
                classes: 4,
                per_class: 4,
                image: 16,
                ..Default::default()
            },
            "train",
        )
        .unwrap();
        let probe = ds.probe(8, 1, 4).unwrap();
        let cmp = compare_spectra(&model, &model, &probe).unwrap();
        for d in &cmp.deltas {
            assert_eq!(d.d_low, 0.0);
            assert_eq!(d.d_mid, 0.0);
            assert_eq!(d.d_high, 0.0);
        }
        // Deltas equal independent subtraction of individual reports.
        let ra = model_spectrum(&model, &probe).unwrap();
        let rb = model_spectrum(&model, &probe).unwrap();
        for ((d, a), b) in cmp.deltas.iter().zip(&ra.blocks).zip(&rb.blocks) {
            assert_eq!(d.d_low, b.low - a.low);
        }
        let csv = cmp.a.band_csv();
        assert_eq!(csv.lines().count(), 3);
    }
}
