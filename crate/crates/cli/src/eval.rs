//! `dds eval`: reconstruction errors, confusion matrices and calibrated
//! frame-level F1, written as CSV reports.

use std::path::PathBuf;

use anyhow::{bail, Result};
use dds_core::{calibrate_threshold, confusion_matrix, frame_f1, F1Report, Tensor};
use log::info;

use crate::config::RunConfig;
use crate::layout::{note_target, piece_target, Layout, Method, PIECE_KINDS};
use crate::synth::{load_frames, Manifest};
use crate::table::{column, num, read_csv, read_labelled_matrix, write_csv, write_labelled_matrix};
use crate::train::load_flows;

/// Mean test reconstruction error of one method on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitError {
    pub split: String,
    pub method: Method,
    pub mean_error: f64,
    pub n_frames: usize,
}

/// Threshold calibrated on the train piece, applied to both pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceScore {
    pub split: String,
    pub method: Method,
    pub piece: String,
    pub report: F1Report,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub errors: Vec<SplitError>,
    /// `(split, set, largest off-diagonal entry)`.
    pub confusion: Vec<(String, String, f64)>,
    pub scores: Vec<PieceScore>,
}

/// Every file `eval` reads, for the error listing what is missing.
fn required_inputs(cfg: &RunConfig, layout: &Layout, manifest: &Manifest) -> Vec<PathBuf> {
    let mut paths = Vec::new();
    for split in &manifest.splits {
        let name = split.spec.name.as_str();
        for &p in &split.spec.notes {
            paths.push(layout.model(name, p));
            for m in Method::ALL {
                paths.push(layout.output(m, name, &note_target(p), "loss"));
            }
            paths.push(layout.output(Method::Dds, name, &note_target(p), "components"));
        }
        if cfg.decompose.piece_splits.iter().any(|s| s == name) {
            for kind in PIECE_KINDS {
                paths.push(layout.piece_truth(name, kind));
                for m in Method::ALL {
                    paths.push(layout.output(m, name, &piece_target(kind), "H"));
                }
            }
        }
    }
    paths
}

fn outcome(active: bool, predicted: bool) -> &'static str {
    match (predicted, active) {
        (true, true) => "TP",
        (true, false) => "FP",
        (false, true) => "FN",
        (false, false) => "TN",
    }
}

fn write_heatmap(path: &std::path::Path, pitches: &[String], h: &Tensor, truth: &Tensor, threshold: f64) -> Result<()> {
    write_csv(
        path,
        &["pitch", "frame", "activation", "truth", "predicted", "outcome"],
        (0..h.rows()).flat_map(|k| {
            (0..h.cols()).map(move |t| {
                let v = h.get(k, t);
                let active = truth.get(k, t) == 1.0;
                let predicted = v >= threshold;
                vec![
                    pitches[k].clone(),
                    t.to_string(),
                    num(v),
                    u8::from(active).to_string(),
                    u8::from(predicted).to_string(),
                    outcome(active, predicted).into(),
                ]
            })
        }),
    )
}

fn reconstruction_reports(layout: &Layout, manifest: &Manifest) -> Result<Vec<SplitError>> {
    let mut errors = Vec::new();
    let mut scatter = Vec::new();
    let mut tradeoff = Vec::new();
    for split in &manifest.splits {
        let name = split.spec.name.as_str();
        for m in Method::ALL {
            let mut all = Vec::new();
            for &p in &split.spec.notes {
                let (h, rows) = read_csv(&layout.output(m, name, &note_target(p), "loss"))?;
                let residual = column(&h, &rows, "residual")?;
                let source = column(&h, &rows, "source_frame")?;
                for (r, s) in residual.iter().zip(&source) {
                    scatter.push(vec![name.to_string(), num(*r), m.as_str().into(), p.to_string(), num(*s)]);
                }
                all.extend(residual);
            }
            let mean = all.iter().sum::<f64>() / all.len().max(1) as f64;
            errors.push(SplitError {
                split: name.into(),
                method: m,
                mean_error: mean,
                n_frames: all.len(),
            });
        }

        // likelihood of the DDS components next to the likelihood of the data
        let flows = load_flows(layout, manifest, name)?;
        for (i, &p) in split.spec.notes.iter().enumerate() {
            let target = note_target(p);
            let (h, rows) = read_csv(&layout.output(Method::Dds, name, &target, "loss"))?;
            let residual = column(&h, &rows, "residual")?;
            let source = column(&h, &rows, "source_frame")?;
            let (ch, crow) = read_csv(&layout.output(Method::Dds, name, &target, "components"))?;
            let comp_ll = column(&ch, &crow, "component_loglik_per_dim")?;
            let test = load_frames(&layout.data().join(&split.test_files[i]))?;
            for (t, (&r, &s)) in residual.iter().zip(&source).enumerate() {
                let frame = test.row(s as usize);
                let data_ll = flows[i].log_likelihood(frame)? / frame.len() as f64;
                tradeoff.push(vec![num(r), num(comp_ll[t]), "dds".into(), name.into(), p.to_string(), num(s)]);
                tradeoff.push(vec!["0".into(), num(data_ll), "data".into(), name.into(), p.to_string(), num(s)]);
            }
        }
    }
    write_csv(
        &layout.report("fig3_errors.csv"),
        &["split", "method", "mean_error", "n_frames"],
        errors.iter().map(|e| {
            vec![e.split.clone(), e.method.as_str().into(), num(e.mean_error), e.n_frames.to_string()]
        }),
    )?;
    write_csv(&layout.report("fig3_scatter.csv"), &["x", "y", "series", "pitch", "source_frame"], scatter)?;
    write_csv(
        &layout.report("fig3_likelihood.csv"),
        &["x", "y", "series", "split", "pitch", "source_frame"],
        tradeoff,
    )?;
    Ok(errors)
}

fn confusion_reports(layout: &Layout, manifest: &Manifest) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for split in &manifest.splits {
        let name = split.spec.name.as_str();
        let flows = load_flows(layout, manifest, name)?;
        let labels: Vec<String> = split.spec.notes.iter().map(|p| p.to_string()).collect();
        for (set, files) in [("train", &split.train_files), ("test", &split.test_files)] {
            let sets: Vec<Tensor> = files.iter().map(|f| load_frames(&layout.data().join(f))).collect::<Result<_>>()?;
            let cm = confusion_matrix(&flows, &sets)?;
            write_labelled_matrix(&layout.report(&format!("confusion_{name}_{set}.csv")), "model", &labels, &cm.values)?;
            info!("eval: {name} confusion on {set} frames, max off-diagonal {:.4}", cm.max_off_diagonal());
            out.push((name.to_string(), set.to_string(), cm.max_off_diagonal()));
        }
    }
    Ok(out)
}

fn f1_reports(cfg: &RunConfig, layout: &Layout, manifest: &Manifest) -> Result<Vec<PieceScore>> {
    let mut scores = Vec::new();
    for split in &manifest.splits {
        let name = split.spec.name.as_str();
        if !cfg.decompose.piece_splits.iter().any(|s| s == name) {
            continue;
        }
        for m in Method::ALL {
            let load = |kind: &str| -> Result<(Vec<String>, Tensor, Tensor)> {
                let (labels, h) = read_labelled_matrix(&layout.output(m, name, &piece_target(kind), "H"))?;
                let (_, truth) = read_labelled_matrix(&layout.piece_truth(name, kind))?;
                Ok((labels, h, truth))
            };
            let (labels, h_train, truth_train) = load("train")?;
            let calibrated = calibrate_threshold(&h_train, &truth_train)?;
            for kind in PIECE_KINDS {
                let (_, h, truth) = if kind == "train" {
                    (labels.clone(), h_train.clone(), truth_train.clone())
                } else {
                    load(kind)?
                };
                let report = frame_f1(&h, &truth, calibrated.threshold)?;
                write_heatmap(
                    &layout.report(&format!("heatmap_{name}_{}_{kind}.csv", m.as_str())),
                    &labels,
                    &h,
                    &truth,
                    calibrated.threshold,
                )?;
                info!(
                    "eval: {name} {} {kind} piece F1 {:.3} (P {:.3}, R {:.3})",
                    m.as_str(),
                    report.f1,
                    report.precision,
                    report.recall
                );
                scores.push(PieceScore {
                    split: name.into(),
                    method: m,
                    piece: kind.into(),
                    report,
                });
            }
        }
    }
    write_csv(
        &layout.report("f1_summary.csv"),
        &["split", "method", "piece", "threshold", "precision", "recall", "f1", "tp", "fp", "fn"],
        scores.iter().map(|s| {
            let r = &s.report;
            vec![
                s.split.clone(),
                s.method.as_str().into(),
                s.piece.clone(),
                num(r.threshold),
                num(r.precision),
                num(r.recall),
                num(r.f1),
                r.tp.to_string(),
                r.fp.to_string(),
                r.fn_.to_string(),
            ]
        }),
    )?;
    Ok(scores)
}

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout) -> Result<EvalReport> {
    cfg.validate()?;
    let manifest = Manifest::load(layout)?;
    let missing: Vec<String> = required_inputs(cfg, layout, &manifest)
        .into_iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing inputs (run `dds train` and `dds decompose` first): {}", missing.join(", "));
    }
    let errors = reconstruction_reports(layout, &manifest)?;
    let confusion = confusion_reports(layout, &manifest)?;
    let scores = f1_reports(cfg, layout, &manifest)?;
    crate::echo_config(cfg, &layout.reports())?;
    Ok(EvalReport { errors, confusion, scores })
}
