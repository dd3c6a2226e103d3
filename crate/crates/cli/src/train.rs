//! `dds train`: one flow per (split, note).

use std::fs;

use anyhow::{Context, Result};
use dds_core::flow::{load_model, save_model};
use dds_core::{train_flow, FlowModel, TrainOutcome};
use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::layout::Layout;
use crate::synth::{load_frames, Manifest};
use crate::table::{num, read_csv, write_csv};

/// Seed of the model for note `pitch` of split number `split`.
pub fn model_seed(root: u64, split: usize, pitch: u8) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((split as u64) << 8) | pitch as u64);
    rng.next_u64()
}

/// Outcome summary of one model, as stored in the training summary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub split: String,
    pub pitch: u8,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_ll: f64,
    pub stopped_early: bool,
}

fn write_history(layout: &Layout, split: &str, pitch: u8, out: &TrainOutcome) -> Result<()> {
    write_csv(
        &layout.history(split, pitch),
        &["epoch", "train_nll", "val_ll", "best_epoch", "stopped_early"],
        out.history.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                num(e.train_nll),
                num(e.val_ll),
                out.best_epoch.to_string(),
                out.stopped_early.to_string(),
            ]
        }),
    )
}

fn write_summary(layout: &Layout, split: &str, patience: usize, models: &[TrainedModel]) -> Result<()> {
    write_csv(
        &layout.training_summary(split),
        &["pitch", "epochs", "best_epoch", "best_val_ll", "stopped_early", "patience"],
        models.iter().map(|m| {
            vec![
                m.pitch.to_string(),
                m.epochs.to_string(),
                m.best_epoch.to_string(),
                num(m.best_val_ll),
                m.stopped_early.to_string(),
                patience.to_string(),
            ]
        }),
    )
}

/// Summary of a previously trained model, recovered from its history file.
fn summary_from_history(layout: &Layout, split: &str, pitch: u8) -> Result<TrainedModel> {
    let (header, rows) = read_csv(&layout.history(split, pitch))?;
    let val = crate::table::column(&header, &rows, "val_ll")?;
    let best_epoch = crate::table::column(&header, &rows, "best_epoch")?;
    let last = rows.last().context("empty history")?;
    let best = best_epoch.first().copied().unwrap_or(0.0) as usize;
    Ok(TrainedModel {
        split: split.into(),
        pitch,
        epochs: rows.len(),
        best_epoch: best,
        best_val_ll: val.get(best.wrapping_sub(1)).copied().unwrap_or(f64::NAN),
        stopped_early: last[header.iter().position(|h| h == "stopped_early").context("stopped_early")?] == "true",
    })
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout, retrain: bool) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    let manifest = Manifest::load(layout)?;
    let mut all = Vec::new();
    for (si, split) in manifest.splits.iter().enumerate() {
        let name = split.spec.name.as_str();
        fs::create_dir_all(layout.models(name))?;
        let jobs: Vec<(usize, u8)> = split.spec.notes.iter().copied().enumerate().collect();
        let trained: Vec<TrainedModel> = jobs
            .par_iter()
            .map(|&(i, pitch)| -> Result<TrainedModel> {
                let path = layout.model(name, pitch);
                if path.exists() && layout.history(name, pitch).exists() && !retrain {
                    info!("train: {name}/note{pitch} exists, skipping");
                    return summary_from_history(layout, name, pitch);
                }
                let frames = load_frames(&layout.data().join(&split.train_files[i]))?;
                let arch = cfg.flow.arch(frames.cols());
                let tc = cfg.flow.train_config(model_seed(cfg.seed, si, pitch));
                let label = format!("{name}/note{pitch}");
                info!("train: {label} on {} frames", frames.rows());
                let out = train_flow(&frames, arch, &label, &tc).with_context(|| format!("training {label}"))?;
                save_model(&out.model, &path)?;
                write_history(layout, name, pitch, &out)?;
                info!(
                    "train: {label} best epoch {} of {} (val {:.4} nats/dim){}",
                    out.best_epoch,
                    out.history.len(),
                    out.best_val_ll / arch.dim as f64,
                    if out.stopped_early { ", stopped early" } else { "" }
                );
                Ok(TrainedModel {
                    split: name.into(),
                    pitch,
                    epochs: out.history.len(),
                    best_epoch: out.best_epoch,
                    best_val_ll: out.best_val_ll,
                    stopped_early: out.stopped_early,
                })
            })
            .collect::<Result<_>>()?;
        write_summary(layout, name, cfg.flow.patience, &trained)?;
        all.extend(trained);
    }
    crate::echo_config(cfg, &layout.root().join("models"))?;
    Ok(all)
}

/// The flows of one split, in note order.
pub fn load_flows(layout: &Layout, manifest: &Manifest, split: &str) -> Result<Vec<FlowModel>> {
    let entry = manifest.split(split)?;
    entry
        .spec
        .notes
        .iter()
        .map(|&p| {
            let path = layout.model(split, p);
            load_model(&path).with_context(|| format!("loading model {} (run `dds train` first)", path.display()))
        })
        .collect()
}
