//! Command implementations. Every command writes its report files under the
//! run's output directory and prints a one-line summary to stdout.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use entroprune::dataset::{evaluate, synthesize, LabeledTensorDataset, SynthSpec};
use entroprune::dilute::{train_dense, train_dilute};
use entroprune::entropy::{entropy_profile, Probe};
use entroprune::fuse::{default_tolerance, fuse, verify_equivalence, FusionReport};
use entroprune::nose::{
    first_n_select, nose_select, random_select, SelectionReport,
};
use entroprune::spectral::{compare_spectra, model_spectrum};
use entroprune::stats;
use entroprune::tensor::{Dtype, Scalar, Tape, Tensor};
use entroprune::vit::{checkpoint_dtype, load_checkpoint, param_count, ForwardOptions, ViTModel};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

// ── Shared plumbing ─────────────────────────────────────────────────────

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &text)
}

fn load_dataset(path: &Path) -> Result<LabeledTensorDataset> {
    LabeledTensorDataset::load(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Deterministic uniform-[0,1] images matching a model's input shape, for
/// verification batches and benchmarking.
pub fn random_images<T: Scalar>(model: &ViTModel<T>, n: usize, seed: u64) -> Tensor<T> {
    let (h, w) = model.config.image_hw;
    let c = entroprune::vit::IMAGE_CHANNELS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<T> = (0..n * h * w * c)
        .map(|_| T::from_f64(rng.gen::<f64>()))
        .collect();
    Tensor::new(vec![n, h, w, c], data).unwrap()
}

/// Run `$body` with `$m` bound to the checkpoint's model at its stored dtype.
macro_rules! with_model {
    ($path:expr, $m:ident, $body:expr) => {
        match checkpoint_dtype($path)? {
            Dtype::F32 => {
                let $m: ViTModel<f32> = load_checkpoint($path)?;
                $body
            }
            Dtype::F64 => {
                let $m: ViTModel<f64> = load_checkpoint($path)?;
                $body
            }
        }
    };
}
pub(crate) use with_model;

// ── dataset ─────────────────────────────────────────────────────────────

pub fn dataset_synth(cfg: &RunConfig) -> Result<()> {
    let (train_spec, per_class_val) = cfg.synth_spec()?;
    let data_dir = cfg.out.join("data");
    ensure_dir(&data_dir)?;
    let train = synthesize(&train_spec, "train")?;
    let val_spec = SynthSpec {
        per_class: per_class_val,
        ..train_spec.clone()
    };
    let val = synthesize(&val_spec, "val")?;
    let train_path = data_dir.join("train.eltd");
    let val_path = data_dir.join("val.eltd");
    train.save(&train_path)?;
    val.save(&val_path)?;
    println!(
        "synth: {} train + {} val samples ({} classes, {}x{}) -> {}",
        train.len(),
        val.len(),
        train_spec.classes,
        train_spec.image,
        train_spec.image,
        data_dir.display()
    );
    Ok(())
}

pub fn dataset_info(path: &Path) -> Result<()> {
    let ds = load_dataset(path)?;
    let mut counts = vec![0usize; ds.num_classes as usize];
    for &l in &ds.labels {
        counts[l as usize] += 1;
    }
    #[derive(Serialize)]
    struct Info {
        samples: usize,
        image_h: usize,
        image_w: usize,
        channels: usize,
        num_classes: u16,
        per_class: Vec<usize>,
    }
    let s = ds.images.shape();
    let info = Info {
        samples: ds.len(),
        image_h: s[1],
        image_w: s[2],
        channels: s[3],
        num_classes: ds.num_classes,
        per_class: counts,
    };
    println!("{}", serde_json::to_string(&info)?);
    Ok(())
}

// ── train / eval ────────────────────────────────────────────────────────

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: PathBuf,
    log: PathBuf,
    steps: usize,
    final_loss: Option<f64>,
    val_top1: Option<f64>,
    val_top5: Option<f64>,
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    match cfg.dtype {
        Dtype::F32 => train_impl::<f32>(cfg),
        Dtype::F64 => train_impl::<f64>(cfg),
    }
}

fn train_impl<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let model_cfg = cfg.model()?;
    let train_cfg = cfg.train_config()?;
    let data = load_dataset(&cfg.train_path()?)?;
    ensure_dir(&cfg.out)?;
    let mut model = ViTModel::<T>::new(model_cfg)?;
    let log = train_dense(&mut model, &train_cfg, &data)?;
    let ckpt = cfg.out.join("dense.epck");
    model.save_checkpoint(&ckpt)?;
    let log_path = cfg.out.join("train_log.csv");
    write_text(&log_path, &log.to_csv())?;

    let (val_top1, val_top5) = match cfg.val_path() {
        Some(vp) => {
            let val = load_dataset(&vp)?;
            let r = evaluate(&model, &val, train_cfg.batch_size, &BTreeSet::new())?;
            (Some(r.top1), Some(r.top5))
        }
        None => (None, None),
    };
    let summary = TrainSummary {
        checkpoint: ckpt.clone(),
        log: log_path,
        steps: log.rows.len(),
        final_loss: log.final_loss(),
        val_top1,
        val_top5,
    };
    write_json(&cfg.out.join("train_summary.json"), &summary)?;
    println!(
        "train: {} steps, final loss {:.4}, val top1 {} -> {}",
        summary.steps,
        summary.final_loss.unwrap_or(f64::NAN),
        summary
            .val_top1
            .map(|a| format!("{:.4}", a))
            .unwrap_or_else(|| "n/a".into()),
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    checkpoint: PathBuf,
    dataset: PathBuf,
    top1: f64,
    top5: f64,
    samples: usize,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, dataset: Option<&Path>) -> Result<()> {
    let ds_path = match dataset {
        Some(p) => p.to_path_buf(),
        None => cfg.val_path().ok_or_else(|| {
            CliError::Config("eval needs --dataset or a [data] val path".into())
        })?,
    };
    let ds = load_dataset(&ds_path)?;
    let result = with_model!(checkpoint, m, evaluate(&m, &ds, 64, &BTreeSet::new())?);
    ensure_dir(&cfg.out)?;
    let summary = EvalSummary {
        checkpoint: checkpoint.to_path_buf(),
        dataset: ds_path,
        top1: result.top1,
        top5: result.top5,
        samples: result.samples,
    };
    write_json(&cfg.out.join("eval.json"), &summary)?;
    println!(
        "eval: top1 {:.4} top5 {:.4} over {} samples",
        result.top1, result.top5, result.samples
    );
    Ok(())
}

// ── entropy ─────────────────────────────────────────────────────────────

fn probe_for(cfg: &RunConfig, dataset: Option<&Path>) -> Result<Probe> {
    let path = match dataset {
        Some(p) => p.to_path_buf(),
        None => cfg.train_path()?,
    };
    let ds = load_dataset(&path)?;
    Ok(ds.probe(cfg.probe_size()?, cfg.seed, cfg.probe_batch()?)?)
}

pub fn entropy(cfg: &RunConfig, checkpoint: &Path, dataset: Option<&Path>) -> Result<()> {
    let probe = probe_for(cfg, dataset)?;
    let report = with_model!(checkpoint, m, entropy_profile(&m, &probe)?);
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join("entropy.csv"), &report.to_csv())?;
    write_json(&cfg.out.join("entropy.json"), &report)?;
    println!(
        "entropy: {} layer entries over {} probe samples -> {}",
        report.entries.len(),
        report.probe.samples,
        cfg.out.join("entropy.json").display()
    );
    Ok(())
}

// ── select ──────────────────────────────────────────────────────────────

pub fn select(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    let method = cfg.select_method()?;
    let probe = probe_for(cfg, None)?;
    let target = cfg.te_target()?;
    let report = with_model!(checkpoint, m, {
        let n = cfg.select_n(m.config.depth)?;
        match method.as_str() {
            "nose" => {
                let state = nose_select(&m, n, &probe, target)?;
                SelectionReport::from_state("nose", &state)
            }
            "random" => {
                let set = random_select(m.config.depth, n, cfg.seed)?;
                SelectionReport::traceless("random", set.into_iter().collect(), probe.descriptor.clone())
            }
            "first_n" => SelectionReport::traceless(
                "first_n",
                first_n_select(n).into_iter().collect(),
                probe.descriptor.clone(),
            ),
            _ => unreachable!("validated method"),
        }
    });
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join("selection.json"), &report)?;
    if !report.trace.is_empty() {
        write_text(&cfg.out.join("selection_trace.csv"), &report.trace_csv())?;
    }
    println!(
        "select: method {} chose {:?} -> {}",
        report.method,
        report.selected,
        cfg.out.join("selection.json").display()
    );
    Ok(())
}

pub fn read_selection(path: &Path) -> Result<SelectionReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: invalid selection report: {e}", path.display())))
}

// ── dilute ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct DiluteSummary {
    checkpoint: PathBuf,
    log: PathBuf,
    selected: Vec<usize>,
    compensation: bool,
    final_loss: Option<f64>,
    val_top1: Option<f64>,
}

pub fn dilute(cfg: &RunConfig, checkpoint: &Path, selection: &Path) -> Result<()> {
    let report = read_selection(selection)?;
    let schedule = cfg.dilute_schedule()?;
    let train_cfg = cfg.dilute_train_config(report.selected.clone())?;
    let data = load_dataset(&cfg.train_path()?)?;
    ensure_dir(&cfg.out)?;
    let (out_ckpt, log, val_top1) = with_model!(checkpoint, m, {
        let mut model = m;
        let log = train_dilute(&mut model, &train_cfg, &schedule, &data)?;
        let out_ckpt = cfg.out.join("diluted.epck");
        model.save_checkpoint(&out_ckpt)?;
        let val_top1 = match cfg.val_path() {
            Some(vp) => {
                let val = load_dataset(&vp)?;
                Some(evaluate(&model, &val, train_cfg.batch_size, &BTreeSet::new())?.top1)
            }
            None => None,
        };
        (out_ckpt, log, val_top1)
    });
    let log_path = cfg.out.join("dilute_log.csv");
    write_text(&log_path, &log.to_csv())?;
    let summary = DiluteSummary {
        checkpoint: out_ckpt.clone(),
        log: log_path,
        selected: report.selected,
        compensation: train_cfg.compensation,
        final_loss: log.final_loss(),
        val_top1,
    };
    write_json(&cfg.out.join("dilute_summary.json"), &summary)?;
    println!(
        "dilute: layers {:?} decayed to 0, val top1 {} -> {}",
        summary.selected,
        summary
            .val_top1
            .map(|a| format!("{:.4}", a))
            .unwrap_or_else(|| "n/a".into()),
        out_ckpt.display()
    );
    Ok(())
}

// ── fuse / verify ───────────────────────────────────────────────────────

pub fn fuse_cmd(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    ensure_dir(&cfg.out)?;
    let (out_ckpt, report) = with_model!(checkpoint, m, {
        let (fused, rewritten) = fuse(&m)?;
        if rewritten.is_empty() {
            eprintln!("warning: nothing to fuse (no diluted blocks with mask 0); output is a copy");
        }
        let batch = random_images(&m, 64, cfg.seed);
        let tol = default_tolerance(checkpoint_dtype(checkpoint)?);
        let report = verify_equivalence(&m, &fused, &batch, tol)?;
        let out_ckpt = cfg.out.join("fused.epck");
        fused.save_checkpoint(&out_ckpt)?;
        (out_ckpt, report)
    });
    write_json(&cfg.out.join("fusion_report.json"), &report)?;
    if !report.pass {
        return Err(CliError::Verification(format!(
            "fusion deviates beyond tolerance: end-to-end {:.3e} > {:.3e}",
            report.end_to_end_deviation, report.tolerance
        )));
    }
    println!(
        "fuse: blocks {:?} rewritten, params {} -> {} (attention -{}), max dev {:.3e} -> {}",
        report.fused_blocks,
        report.params_before,
        report.params_after,
        report.attention_params_removed,
        report.end_to_end_deviation,
        out_ckpt.display()
    );
    Ok(())
}

pub fn verify(
    out: &Path,
    a: &Path,
    b: &Path,
    tol: Option<f64>,
    batch: usize,
    seed: u64,
) -> Result<()> {
    let da = checkpoint_dtype(a)?;
    let db = checkpoint_dtype(b)?;
    if da != db {
        return Err(CliError::Data(format!(
            "checkpoint dtypes differ: {da} vs {db}"
        )));
    }
    let report: FusionReport = match da {
        Dtype::F32 => {
            let ma: ViTModel<f32> = load_checkpoint(a)?;
            let mb: ViTModel<f32> = load_checkpoint(b)?;
            let images = random_images(&ma, batch, seed);
            verify_equivalence(&ma, &mb, &images, tol.unwrap_or(default_tolerance(da)))?
        }
        Dtype::F64 => {
            let ma: ViTModel<f64> = load_checkpoint(a)?;
            let mb: ViTModel<f64> = load_checkpoint(b)?;
            let images = random_images(&ma, batch, seed);
            verify_equivalence(&ma, &mb, &images, tol.unwrap_or(default_tolerance(da)))?
        }
    };
    ensure_dir(out)?;
    write_json(&out.join("verify_report.json"), &report)?;
    println!(
        "verify: end-to-end max abs dev {:.3e} (tol {:.1e}) -> {}",
        report.end_to_end_deviation,
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if !report.pass {
        return Err(CliError::Verification(format!(
            "max deviation {:.3e} exceeds tolerance {:.3e}",
            report.end_to_end_deviation, report.tolerance
        )));
    }
    Ok(())
}

// ── spectrum ────────────────────────────────────────────────────────────

pub fn spectrum(
    cfg: &RunConfig,
    checkpoint: &Path,
    baseline: Option<&Path>,
    dataset: Option<&Path>,
) -> Result<()> {
    let probe = probe_for(cfg, dataset)?;
    ensure_dir(&cfg.out)?;
    match baseline {
        None => {
            let report = with_model!(checkpoint, m, model_spectrum(&m, &probe)?);
            write_text(&cfg.out.join("spectrum_profile.csv"), &report.profile_csv())?;
            write_text(&cfg.out.join("spectrum_bands.csv"), &report.band_csv())?;
            write_json(&cfg.out.join("spectrum.json"), &report)?;
            println!(
                "spectrum: {} blocks, grid {}x{} -> {}",
                report.blocks.len(),
                report.grid.0,
                report.grid.1,
                cfg.out.join("spectrum.json").display()
            );
        }
        Some(base) => {
            let da = checkpoint_dtype(checkpoint)?;
            if da != checkpoint_dtype(base)? {
                return Err(CliError::Data("checkpoint dtypes differ".into()));
            }
            let cmp = match da {
                Dtype::F32 => {
                    let m: ViTModel<f32> = load_checkpoint(checkpoint)?;
                    let b: ViTModel<f32> = load_checkpoint(base)?;
                    compare_spectra(&b, &m, &probe)?
                }
                Dtype::F64 => {
                    let m: ViTModel<f64> = load_checkpoint(checkpoint)?;
                    let b: ViTModel<f64> = load_checkpoint(base)?;
                    compare_spectra(&b, &m, &probe)?
                }
            };
            write_text(&cfg.out.join("spectrum_profile.csv"), &cmp.b.profile_csv())?;
            write_text(&cfg.out.join("spectrum_bands.csv"), &cmp.b.band_csv())?;
            write_text(&cfg.out.join("spectrum_deltas.csv"), &cmp.delta_csv())?;
            write_json(&cfg.out.join("spectrum_compare.json"), &cmp)?;
            let high_up = cmp.deltas.iter().filter(|d| d.d_high > 0.0).count();
            println!(
                "spectrum: {} / {} blocks gained high-frequency energy vs baseline -> {}",
                high_up,
                cmp.deltas.len(),
                cfg.out.join("spectrum_compare.json").display()
            );
        }
    }
    Ok(())
}

// ── bench ───────────────────────────────────────────────────────────────

#[derive(Serialize)]
pub struct BenchReport {
    pub checkpoint: PathBuf,
    pub batch: usize,
    pub reps: usize,
    pub throughput_ips: f64,
    pub per_rep_ips: Vec<f64>,
    pub param_count: u64,
    pub param_bytes: u64,
    pub activation_bytes_per_image: u64,
    pub budget_bytes: u64,
    /// Analytical memory-bound proxy: max batch with
    /// `param_bytes + batch * activation_bytes_per_image <= budget`.
    pub images_per_budget: u64,
}

pub fn bench(
    out: &Path,
    checkpoint: &Path,
    batch: usize,
    reps: usize,
    budget: u64,
    seed: u64,
) -> Result<()> {
    if reps < 3 {
        return Err(CliError::Config("bench needs reps >= 3".into()));
    }
    if batch == 0 {
        return Err(CliError::Config("bench needs batch >= 1".into()));
    }
    let report = with_model!(checkpoint, m, bench_model(&m, checkpoint, batch, reps, budget, seed)?);
    ensure_dir(out)?;
    write_json(&out.join("bench.json"), &report)?;
    println!(
        "bench: {:.1} images/s (batch {}, median of {}), params {} ({} bytes), mem-bound {} images/budget",
        report.throughput_ips,
        report.batch,
        report.reps,
        report.param_count,
        report.param_bytes,
        report.images_per_budget
    );
    Ok(())
}

pub fn bench_model<T: Scalar>(
    model: &ViTModel<T>,
    checkpoint: &Path,
    batch: usize,
    reps: usize,
    budget: u64,
    seed: u64,
) -> Result<BenchReport> {
    let images = random_images(model, batch, seed);
    // warmup, discarded
    let _ = model.logits(&images)?;
    let mut per_rep = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let _ = model.logits(&images)?;
        let dt = t0.elapsed().as_secs_f64();
        per_rep.push(batch as f64 / dt);
    }
    let throughput = stats::median(&per_rep);

    let params = model.stored_param_count();
    let param_bytes = params * T::DTYPE.size_bytes() as u64;
    let one = random_images(model, 1, seed);
    let mut tape = Tape::new();
    let _ = model.forward(&mut tape, &one, &ForwardOptions::default())?;
    let act1 = tape.activation_bytes() as u64;
    let images_per_budget = if budget > param_bytes && act1 > 0 {
        (budget - param_bytes) / act1
    } else {
        0
    };
    Ok(BenchReport {
        checkpoint: checkpoint.to_path_buf(),
        batch,
        reps,
        throughput_ips: throughput,
        per_rep_ips: per_rep,
        param_count: params,
        param_bytes,
        activation_bytes_per_image: act1,
        budget_bytes: budget,
        images_per_budget,
    })
}

// ── census helper shared with studies ───────────────────────────────────

pub fn census_after_removal(
    config: &entroprune::vit::ViTConfig,
    removed: &BTreeSet<usize>,
) -> Result<(u64, f64)> {
    let base = param_count(config, &BTreeSet::new())?.total;
    let after = param_count(config, removed)?.total;
    let pct = (base - after) as f64 / base as f64 * 100.0;
    Ok((after, pct))
}
