//! Study pipelines: random-mask interaction study, removal-rate sweep, and
//! block transplant compatibility.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use entroprune::dataset::evaluate;
use entroprune::dilute::train_dilute;
use entroprune::fuse::{fuse, transplant};
use entroprune::nose::{masking_study, nose_select};
use entroprune::stats;
use entroprune::tensor::Dtype;
use entroprune::vit::{checkpoint_dtype, load_checkpoint, BlockMode, ViTModel};

use crate::commands::{census_after_removal, ensure_dir, with_model, write_json, write_text};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

// ── masking study (random masks vs accuracy and TE) ─────────────────────

#[derive(Serialize)]
struct MaskingStudyOut {
    rows: Vec<entroprune::nose::MaskingStudyRow>,
    /// Spearman correlation between mean TE and mean accuracy across the
    /// nonzero layer counts.
    spearman_te_accuracy: f64,
}

pub fn masking(
    cfg: &RunConfig,
    checkpoint: &Path,
    counts: &[usize],
    repeats: usize,
) -> Result<()> {
    let train = entroprune::dataset::LabeledTensorDataset::load(&cfg.train_path()?)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let eval_path = cfg
        .val_path()
        .ok_or_else(|| CliError::Config("masking study needs a [data] val path".into()))?;
    let eval_ds = entroprune::dataset::LabeledTensorDataset::load(&eval_path)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let probe = train.probe(cfg.probe_size()?, cfg.seed, cfg.probe_batch()?)?;
    let target = cfg.te_target()?;

    let rows = with_model!(checkpoint, m, {
        masking_study(&m, counts, repeats, cfg.seed, &eval_ds, &probe, target)?
    });
    let nonzero: Vec<&entroprune::nose::MaskingStudyRow> =
        rows.iter().filter(|r| r.count > 0).collect();
    let rho = if nonzero.len() >= 2 {
        stats::spearman(
            &nonzero.iter().map(|r| r.mean_te).collect::<Vec<_>>(),
            &nonzero.iter().map(|r| r.mean_accuracy).collect::<Vec<_>>(),
        )
    } else {
        f64::NAN
    };
    ensure_dir(&cfg.out)?;
    let mut csv = String::from("count,repeats,mean_accuracy,var_accuracy,mean_te,var_te\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.count, r.repeats, r.mean_accuracy, r.var_accuracy, r.mean_te, r.var_te
        ));
    }
    write_text(&cfg.out.join("masking_study.csv"), &csv)?;
    write_json(
        &cfg.out.join("masking_study.json"),
        &MaskingStudyOut {
            rows,
            spearman_te_accuracy: rho,
        },
    )?;
    println!(
        "study masking: spearman(TE, accuracy) = {:.3} -> {}",
        rho,
        cfg.out.join("masking_study.json").display()
    );
    Ok(())
}

// ── removal-rate sweep ──────────────────────────────────────────────────

#[derive(Serialize)]
struct SweepRow {
    n: usize,
    selected: Vec<usize>,
    params_after: u64,
    params_drop_pct: f64,
    top1_fused: f64,
}

/// select(NOSE, n) -> dilute -> fuse -> eval for every n in 1..=depth-2.
pub fn removal_sweep(cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    if checkpoint_dtype(checkpoint)? != Dtype::F32 {
        return Err(CliError::Config(
            "removal sweep expects an f32 training checkpoint".into(),
        ));
    }
    let base: ViTModel<f32> = load_checkpoint(checkpoint)?;
    let depth = base.config.depth;
    if depth < 3 {
        return Err(CliError::Config("removal sweep needs depth >= 3".into()));
    }
    let train = entroprune::dataset::LabeledTensorDataset::load(&cfg.train_path()?)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let eval_path = cfg
        .val_path()
        .ok_or_else(|| CliError::Config("removal sweep needs a [data] val path".into()))?;
    let eval_ds = entroprune::dataset::LabeledTensorDataset::load(&eval_path)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let probe = train.probe(cfg.probe_size()?, cfg.seed, cfg.probe_batch()?)?;
    let target = cfg.te_target()?;
    let schedule = cfg.dilute_schedule()?;

    let mut rows: Vec<SweepRow> = Vec::new();
    for n in 1..=depth - 2 {
        let state = nose_select(&base, n, &probe, target)?;
        let train_cfg = cfg.dilute_train_config(state.selected.clone())?;
        let mut model = base.clone();
        train_dilute(&mut model, &train_cfg, &schedule, &train)?;
        let (fused, _) = fuse(&model)?;
        let top1 = evaluate(&fused, &eval_ds, 64, &BTreeSet::new())?.top1;
        let removed: BTreeSet<usize> = state.selected.iter().copied().collect();
        let (params_after, pct) = census_after_removal(&base.config, &removed)?;
        println!(
            "sweep n={n}: selected {:?}, params {} (-{:.1}%), fused top1 {:.4}",
            state.selected, params_after, pct, top1
        );
        rows.push(SweepRow {
            n,
            selected: state.selected,
            params_after,
            params_drop_pct: pct,
            top1_fused: top1,
        });
    }
    ensure_dir(&cfg.out)?;
    let mut csv = String::from("n,selected,params_after,params_drop_pct,top1_fused\n");
    for r in &rows {
        let sel = r
            .selected
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n, sel, r.params_after, r.params_drop_pct, r.top1_fused
        ));
    }
    write_text(&cfg.out.join("removal_sweep.csv"), &csv)?;
    write_json(&cfg.out.join("removal_sweep.json"), &rows)?;
    println!(
        "study removal-sweep: {} rows -> {}",
        rows.len(),
        cfg.out.join("removal_sweep.csv").display()
    );
    Ok(())
}

// ── transplant study ────────────────────────────────────────────────────

#[derive(Serialize)]
struct TransplantRow {
    block: usize,
    transplanted: bool,
    top1: Option<f64>,
}

/// Swap each donor block into the host (where the slot is not fused) and
/// measure accuracy of the hybrid.
pub fn transplant_study(cfg: &RunConfig, donor: &Path, host: &Path) -> Result<()> {
    let eval_path = cfg
        .val_path()
        .ok_or_else(|| CliError::Config("transplant study needs a [data] val path".into()))?;
    let eval_ds = entroprune::dataset::LabeledTensorDataset::load(&eval_path)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if checkpoint_dtype(donor)? != checkpoint_dtype(host)? {
        return Err(CliError::Data("checkpoint dtypes differ".into()));
    }
    let rows: Vec<TransplantRow> = match checkpoint_dtype(donor)? {
        Dtype::F32 => transplant_rows::<f32>(donor, host, &eval_ds)?,
        Dtype::F64 => transplant_rows::<f64>(donor, host, &eval_ds)?,
    };
    ensure_dir(&cfg.out)?;
    let mut csv = String::from("block,transplanted,top1\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.block,
            r.transplanted as u8,
            r.top1.map(|a| a.to_string()).unwrap_or_default()
        ));
    }
    write_text(&cfg.out.join("transplant.csv"), &csv)?;
    write_json(&cfg.out.join("transplant.json"), &rows)?;
    let done = rows.iter().filter(|r| r.transplanted).count();
    println!(
        "study transplant: {} of {} blocks transplanted -> {}",
        done,
        rows.len(),
        cfg.out.join("transplant.csv").display()
    );
    Ok(())
}

fn transplant_rows<T: entroprune::tensor::Scalar>(
    donor: &Path,
    host: &Path,
    eval_ds: &entroprune::dataset::LabeledTensorDataset,
) -> Result<Vec<TransplantRow>> {
    let donor: ViTModel<T> = load_checkpoint(donor)?;
    let host: ViTModel<T> = load_checkpoint(host)?;
    let mut rows = Vec::with_capacity(host.config.depth);
    for block in 0..host.config.depth {
        if matches!(host.blocks[block].mode, BlockMode::Fused { .. }) {
            rows.push(TransplantRow {
                block,
                transplanted: false,
                top1: None,
            });
            continue;
        }
        let hybrid = transplant(&donor, &host, block)?;
        let top1 = evaluate(&hybrid, eval_ds, 64, &BTreeSet::new())?.top1;
        rows.push(TransplantRow {
            block,
            transplanted: true,
            top1: Some(top1),
        });
    }
    Ok(rows)
}
