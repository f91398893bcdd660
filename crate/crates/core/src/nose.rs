//! Transfer entropy between masked attention layers and the network output,
//! and the greedy selection loop (NOSE) built on it.
//!
//! Masking replaces an attention sublayer with the identity for the duration
//! of one forward pass: the branch is skipped, `f_attn = x`, parameters are
//! untouched. Transfer entropy is the absolute change this causes in the
//! target feature's entropy, measured on a fixed probe shared by the
//! baseline and every candidate.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetError, LabeledTensorDataset};
use crate::entropy::{
    layer_entropy, ChannelAccumulator, EntropyError, Probe, ProbeDescriptor, ENTROPY_EPS,
};
use crate::seeds;
use crate::stats;
use crate::tensor::{Scalar, Tape};
use crate::vit::{ForwardOptions, LayerId, TapSpec, ViTModel, VitError};

#[derive(Debug, Error)]
pub enum NoseError {
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid selection: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, NoseError>;

/// Which feature Eq-style transfer entropy is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeTarget {
    /// Final transformer block's MLP output (pre-head feature). Default.
    #[default]
    LastBlockMlp,
    /// Classifier logits.
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TEMeasurement {
    pub masked_set: Vec<usize>,
    pub h_baseline: f64,
    pub h_conditional: f64,
    /// `|h_baseline - h_conditional|`.
    pub te: f64,
    pub probe: ProbeDescriptor,
    pub target: TeTarget,
}

/// Entropy of the target feature with `masked` attention layers replaced by
/// identity. Accumulation is f64 Welford, merged in fixed batch order.
pub fn target_entropy<T: Scalar>(
    model: &ViTModel<T>,
    probe: &Probe,
    masked: &BTreeSet<usize>,
    target: TeTarget,
) -> Result<f64> {
    if probe.is_empty() {
        return Err(NoseError::Invalid("probe is empty".into()));
    }
    let channels = match target {
        TeTarget::LastBlockMlp => model.config.embed_dim,
        TeTarget::Logits => model.config.num_classes,
    };
    let tap = LayerId::mlp(model.config.depth - 1);
    let ranges = probe.batch_ranges();
    let per_batch: Vec<Result<ChannelAccumulator>> = ranges
        .par_iter()
        .map(|&range| {
            let images = probe.batch::<T>(range);
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                taps: match target {
                    TeTarget::LastBlockMlp => TapSpec::single(tap),
                    TeTarget::Logits => TapSpec::none(),
                },
                masked: masked.clone(),
                ..Default::default()
            };
            let pass = model.forward(&mut tape, &images, &opts)?;
            let feature = match target {
                TeTarget::LastBlockMlp => tape.value(pass.captures[&tap]),
                TeTarget::Logits => tape.value(pass.logits),
            };
            let mut acc = ChannelAccumulator::new(channels);
            acc.push_features(feature);
            Ok(acc)
        })
        .collect();
    let mut merged = ChannelAccumulator::new(channels);
    for acc in per_batch {
        merged.merge(&acc?);
    }
    let sigma = merged.std().map_err(NoseError::Entropy)?;
    Ok(layer_entropy(&sigma, ENTROPY_EPS))
}

/// Transfer entropy of a masked set against the target feature.
pub fn transfer_entropy<T: Scalar>(
    model: &ViTModel<T>,
    masked: &BTreeSet<usize>,
    probe: &Probe,
    target: TeTarget,
) -> Result<TEMeasurement> {
    let h_baseline = target_entropy(model, probe, &BTreeSet::new(), target)?;
    conditional_te(model, masked, probe, target, h_baseline)
}

fn conditional_te<T: Scalar>(
    model: &ViTModel<T>,
    masked: &BTreeSet<usize>,
    probe: &Probe,
    target: TeTarget,
    h_baseline: f64,
) -> Result<TEMeasurement> {
    let h_conditional = if masked.is_empty() {
        h_baseline
    } else {
        target_entropy(model, probe, masked, target)?
    };
    Ok(TEMeasurement {
        masked_set: masked.iter().copied().collect(),
        h_baseline,
        h_conditional,
        te: (h_baseline - h_conditional).abs(),
        probe: probe.descriptor.clone(),
        target,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub chosen: usize,
    /// TE of `S ∪ {candidate}` for every candidate alive at this step.
    pub candidates: Vec<(usize, f64)>,
}

/// State of one greedy selection run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionState {
    /// Ordered chosen set S.
    pub selected: Vec<usize>,
    /// Remaining candidate set C.
    pub remaining: BTreeSet<usize>,
    pub trace: Vec<TraceStep>,
    pub h_baseline: f64,
    pub target: TeTarget,
    pub probe: ProbeDescriptor,
}

impl SelectionState {
    /// Step-local optimality: the chosen layer's TE is <= every candidate's
    /// TE at that step.
    pub fn step_local_optimality_holds(&self) -> bool {
        self.trace.iter().all(|step| {
            let chosen_te = step
                .candidates
                .iter()
                .find(|(c, _)| *c == step.chosen)
                .map(|(_, te)| *te);
            match chosen_te {
                Some(te) => step.candidates.iter().all(|&(_, other)| te <= other),
                None => false,
            }
        })
    }
}

/// Greedy minimum-transfer-entropy selection: at every step, evaluate
/// `TE(S ∪ {i})` for each remaining candidate and take the argmin (ties to
/// the lowest index).
pub fn nose_select<T: Scalar>(
    model: &ViTModel<T>,
    n: usize,
    probe: &Probe,
    target: TeTarget,
) -> Result<SelectionState> {
    let depth = model.config.depth;
    if n > depth {
        return Err(NoseError::Invalid(format!(
            "cannot select {n} layers from depth {depth}"
        )));
    }
    let h_baseline = target_entropy(model, probe, &BTreeSet::new(), target)?;
    let mut selected: Vec<usize> = Vec::with_capacity(n);
    let mut remaining: BTreeSet<usize> = (0..depth).collect();
    let mut trace = Vec::with_capacity(n);

    for step in 0..n {
        let candidates: Vec<usize> = remaining.iter().copied().collect();
        // Candidate evaluations are independent; results are collected in
        // candidate order so the argmin is deterministic.
        let tes: Vec<Result<f64>> = candidates
            .par_iter()
            .map(|&cand| {
                let mut masked: BTreeSet<usize> = selected.iter().copied().collect();
                masked.insert(cand);
                Ok(target_entropy(model, probe, &masked, target)?)
            })
            .collect();
        let mut pairs: Vec<(usize, f64)> = Vec::with_capacity(candidates.len());
        for (cand, te) in candidates.iter().zip(tes) {
            pairs.push((*cand, (h_baseline - te?).abs()));
        }
        let mut best = pairs[0];
        for &(cand, te) in &pairs[1..] {
            if te < best.1 {
                best = (cand, te);
            }
        }
        selected.push(best.0);
        remaining.remove(&best.0);
        trace.push(TraceStep {
            step,
            chosen: best.0,
            candidates: pairs,
        });
    }

    Ok(SelectionState {
        selected,
        remaining,
        trace,
        h_baseline,
        target,
        probe: probe.descriptor.clone(),
    })
}

/// Uniform sample of `n` distinct layer indices, seeded.
pub fn random_select(depth: usize, n: usize, seed: u64) -> Result<BTreeSet<usize>> {
    if n > depth {
        return Err(NoseError::Invalid(format!(
            "cannot select {n} layers from depth {depth}"
        )));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..depth).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    Ok(idx.into_iter().take(n).collect())
}

/// First-N baseline: the first `n` consecutive attention layers.
pub fn first_n_select(n: usize) -> BTreeSet<usize> {
    (0..n).collect()
}

/// Top-1 accuracy of the masked view on a labeled set, no retraining.
pub fn remained_performance<T: Scalar>(
    model: &ViTModel<T>,
    masked: &BTreeSet<usize>,
    eval: &LabeledTensorDataset,
    batch_size: usize,
) -> Result<f64> {
    Ok(dataset::evaluate(model, eval, batch_size, masked)?.top1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskingStudyRow {
    pub count: usize,
    pub mean_accuracy: f64,
    pub var_accuracy: f64,
    pub mean_te: f64,
    pub var_te: f64,
    pub repeats: usize,
}

/// Random-mask study: for each layer count, draw `repeats` random masks and
/// record mean/variance of remained accuracy and of transfer entropy.
pub fn masking_study<T: Scalar>(
    model: &ViTModel<T>,
    layer_counts: &[usize],
    repeats: usize,
    seed: u64,
    eval: &LabeledTensorDataset,
    probe: &Probe,
    target: TeTarget,
) -> Result<Vec<MaskingStudyRow>> {
    if repeats < 2 {
        return Err(NoseError::Invalid("repeats must be >= 2".into()));
    }
    let h_baseline = target_entropy(model, probe, &BTreeSet::new(), target)?;
    let mut rows = Vec::with_capacity(layer_counts.len());
    for &count in layer_counts {
        if count == 0 {
            let acc = remained_performance(model, &BTreeSet::new(), eval, 64)?;
            rows.push(MaskingStudyRow {
                count: 0,
                mean_accuracy: acc,
                var_accuracy: 0.0,
                mean_te: 0.0,
                var_te: 0.0,
                repeats,
            });
            continue;
        }
        let mut accs = Vec::with_capacity(repeats);
        let mut tes = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let mask = random_select(
                model.config.depth,
                count,
                seeds::derive(seed, (count as u64) << 20 | rep as u64),
            )?;
            let m = conditional_te(model, &mask, probe, target, h_baseline)?;
            tes.push(m.te);
            accs.push(remained_performance(model, &mask, eval, 64)?);
        }
        rows.push(MaskingStudyRow {
            count,
            mean_accuracy: stats::mean(&accs),
            var_accuracy: stats::variance(&accs),
            mean_te: stats::mean(&tes),
            var_te: stats::variance(&tes),
            repeats,
        });
    }
    Ok(rows)
}

// ── Selection report (external interface) ───────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: String,
    pub n: usize,
    pub selected: Vec<usize>,
    /// Absent for baselines that never probe (random, first_n).
    pub h_baseline: Option<f64>,
    pub target: TeTarget,
    pub probe: ProbeDescriptor,
    pub trace: Vec<TraceStep>,
}

impl SelectionReport {
    pub fn from_state(method: &str, state: &SelectionState) -> Self {
        SelectionReport {
            method: method.to_string(),
            n: state.selected.len(),
            selected: state.selected.clone(),
            h_baseline: Some(state.h_baseline),
            target: state.target,
            probe: state.probe.clone(),
            trace: state.trace.clone(),
        }
    }

    /// Without a trace (random / first-n baselines).
    pub fn traceless(method: &str, selected: Vec<usize>, probe: ProbeDescriptor) -> Self {
        SelectionReport {
            method: method.to_string(),
            n: selected.len(),
            selected,
            h_baseline: None,
            target: TeTarget::default(),
            probe,
            trace: Vec::new(),
        }
    }

    /// Flat CSV view of the trace. `te_normalized` is per-step (row) min-max
    /// scaled to [0,1] for heat-map display; raw values stay authoritative.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,layer,te,te_normalized,chosen\n");
        for step in &self.trace {
            let lo = step
                .candidates
                .iter()
                .map(|&(_, te)| te)
                .fold(f64::INFINITY, f64::min);
            let hi = step
                .candidates
                .iter()
                .map(|&(_, te)| te)
                .fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            for &(layer, te) in &step.candidates {
                let norm = if span > 0.0 { (te - lo) / span } else { 0.0 };
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    step.step,
                    layer,
                    te,
                    norm,
                    (layer == step.chosen) as u8
                ));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthesize, SynthSpec};
    use crate::vit::ViTConfig;

    fn toy_setup() -> (ViTModel<f64>, LabeledTensorDataset, Probe) {
        let cfg = ViTConfig {
            image_hw: (16, 16),
            patch_hw: (8, 8),
            embed_dim: 16,
            depth: 4,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            seed: 21,
        };
        let model = ViTModel::<f64>::new(cfg).unwrap();
        let ds = synthesize(
            &SynthSpec {
                classes: 4,
                per_class: 12,
                image: 16,
                ..Default::default()
            },
            "train",
        )
        .unwrap();
        let probe = ds.probe(24, 5, 12).unwrap();
        (model, ds, probe)
    }

    #[test]
    fn te_of_empty_set_is_exactly_zero() {
        let (model, _, probe) = toy_setup();
        let m = transfer_entropy(&model, &BTreeSet::new(), &probe, TeTarget::default()).unwrap();
        assert_eq!(m.te, 0.0);
        assert_eq!(m.h_baseline, m.h_conditional);
    }

    #[test]
    fn zero_value_path_attention_has_negligible_te() {
        let (mut model, _, probe) = toy_setup();
        // Zero the value/projection path of block 2: the branch output is
        // exactly zero, so masking it changes nothing.
        let d = model.config.embed_dim;
        let a = model.blocks[2].attn.as_mut().unwrap();
        a.v.weight = crate::tensor::Tensor::zeros(vec![d, d]).with_grad();
        a.v.bias = crate::tensor::Tensor::zeros(vec![d]).with_grad();
        a.proj.weight = crate::tensor::Tensor::zeros(vec![d, d]).with_grad();
        a.proj.bias = crate::tensor::Tensor::zeros(vec![d]).with_grad();
        let m = transfer_entropy(
            &model,
            &[2usize].into_iter().collect(),
            &probe,
            TeTarget::default(),
        )
        .unwrap();
        assert!(m.te < 1e-6, "te {}", m.te);
    }

    #[test]
    fn selector_leaves_parameters_untouched() {
        let (model, _, probe) = toy_setup();
        let before: Vec<Vec<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.to_f64_vec())
            .collect();
        let _ = nose_select(&model, 2, &probe, TeTarget::default()).unwrap();
        let after: Vec<Vec<f64>> = model
            .named_tensors()
            .iter()
            .map(|(_, t)| t.to_f64_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn full_depth_selection_is_a_permutation() {
        let (model, _, probe) = toy_setup();
        let state = nose_select(&model, 4, &probe, TeTarget::default()).unwrap();
        let mut sorted = state.selected.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(state.remaining.is_empty());
        assert!(state.step_local_optimality_holds());
        assert!(nose_select(&model, 5, &probe, TeTarget::default()).is_err());
    }

    #[test]
    fn greedy_matches_independent_exhaustive_rescan() {
        let (model, _, probe) = toy_setup();
        let state = nose_select(&model, 3, &probe, TeTarget::default()).unwrap();

        // Independent straight-line reimplementation of the per-step scan:
        // sequential loop, two-pass entropy via the public target_entropy,
        // explicit argmin with lowest-index tie-break.
        let h0 = target_entropy(&model, &probe, &BTreeSet::new(), TeTarget::default()).unwrap();
        let mut s: Vec<usize> = Vec::new();
        let mut c: Vec<usize> = (0..4).collect();
        for _ in 0..3 {
            let mut best: Option<(usize, f64)> = None;
            for &cand in &c {
                let mut masked: BTreeSet<usize> = s.iter().copied().collect();
                masked.insert(cand);
                let h = target_entropy(&model, &probe, &masked, TeTarget::default()).unwrap();
                let te = (h0 - h).abs();
                let better = match best {
                    None => true,
                    Some((_, bte)) => te < bte,
                };
                if better {
                    best = Some((cand, te));
                }
            }
            let (chosen, _) = best.unwrap();
            s.push(chosen);
            c.retain(|&x| x != chosen);
        }
        assert_eq!(state.selected, s);
    }

    #[test]
    fn random_select_is_seeded_and_uniform() {
        let a = random_select(12, 5, 7).unwrap();
        let b = random_select(12, 5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(random_select(4, 5, 0).is_err());

        // Binomial oracle: over many draws each index appears with
        // frequency n/depth within 3 sigma.
        let (depth, n, draws) = (8usize, 3usize, 10_000usize);
        let mut counts = vec![0usize; depth];
        for s in 0..draws {
            for i in random_select(depth, n, s as u64).unwrap() {
                counts[i] += 1;
            }
        }
        let p = n as f64 / depth as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - draws as f64 * p).abs();
            assert!(dev < 3.0 * sigma, "index {i}: count {c} deviates {dev:.1}");
        }
    }

    #[test]
    fn first_n_is_prefix() {
        assert_eq!(
            first_n_select(3),
            [0usize, 1, 2].into_iter().collect::<BTreeSet<_>>()
        );
    }

    #[test]
    fn remained_performance_of_untrained_model_is_chance() {
        let (model, ds, _) = toy_setup();
        let masked: BTreeSet<usize> = [0, 2].into_iter().collect();
        let acc = remained_performance(&model, &masked, &ds, 16).unwrap();
        // 4 classes, 48 samples: binomial 3 sigma around 0.25.
        let sigma = (0.25 * 0.75 / 48.0f64).sqrt();
        assert!(
            (acc - 0.25).abs() < 3.0 * sigma + 1e-9,
            "untrained masked accuracy {acc}"
        );
    }

    #[test]
    fn masking_study_is_deterministic_and_handles_zero() {
        let (model, ds, probe) = toy_setup();
        let rows = masking_study(&model, &[0, 2], 3, 11, &ds, &probe, TeTarget::default()).unwrap();
        let rows2 =
            masking_study(&model, &[0, 2], 3, 11, &ds, &probe, TeTarget::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&rows).unwrap(),
            serde_json::to_string(&rows2).unwrap()
        );
        assert_eq!(rows[0].count, 0);
        assert_eq!(rows[0].var_accuracy, 0.0);
        assert_eq!(rows[0].mean_te, 0.0);
        assert!(masking_study(&model, &[1], 1, 0, &ds, &probe, TeTarget::default()).is_err());
    }

    #[test]
    fn selection_report_round_trips_and_exports_csv() {
        let (model, _, probe) = toy_setup();
        let state = nose_select(&model, 2, &probe, TeTarget::default()).unwrap();
        let report = SelectionReport::from_state("nose", &state);
        let json = serde_json::to_string(&report).unwrap();
        let back: SelectionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.selected, report.selected);
        let csv = report.trace_csv();
        // one row per candidate per step: 4 + 3
        assert_eq!(csv.lines().count() - 1, 7);
        assert!(csv.lines().any(|l| l.ends_with(",1")));
    }
}
