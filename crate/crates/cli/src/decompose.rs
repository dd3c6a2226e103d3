//! `dds decompose`: note test sets and pieces, with either method, written
//! in one layout so the two can be compared cell by cell.

use std::path::Path;

use anyhow::{Context, Result};
use dds_core::eval::frame_errors;
use dds_core::flow::log_prior;
use dds_core::nmf::{group_by_source, nmf_decompose, FixedDictionary};
use dds_core::{dds_decompose, dsp, FlowModel, SolverSchedule, SolverTrace, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::layout::{note_target, piece_target, Layout, Method, PIECE_KINDS};
use crate::synth::{load_frames, Manifest};
use crate::table::{num, write_csv, write_labelled_matrix};
use crate::train::load_flows;

/// Result of one decomposition, grouped to one activation row per source.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// `K x T`.
    pub activations: Tensor,
    /// `T x D`.
    pub reconstruction: Tensor,
    pub losses: Vec<f64>,
    pub traces: Vec<SolverTrace>,
    /// DDS only: per frame and source, `(h, log p_Z(z)/D, log p(w)/D)`.
    pub components: Option<Vec<Vec<(f64, f64, f64)>>>,
}

pub fn run_nmf(frames: &Tensor, sources: &[Tensor], schedule: &SolverSchedule) -> Result<Decomposition> {
    let dict = FixedDictionary::from_sources(sources)?;
    let out = nmf_decompose(frames, &dict, schedule)?;
    Ok(Decomposition {
        activations: group_by_source(&out.activations, &dict)?,
        reconstruction: dict.reconstruct(&out.activations)?,
        losses: out.losses,
        traces: out.traces,
        components: None,
    })
}

pub fn run_dds(frames: &Tensor, flows: &[FlowModel], cfg: &RunConfig, schedule: &SolverSchedule) -> Result<Decomposition> {
    let out = dds_decompose(frames, flows, schedule, &cfg.dds)?;
    let (t, k, d) = (frames.rows(), flows.len(), frames.cols());
    let mut components = Vec::with_capacity(t);
    for j in 0..t {
        let mut row = Vec::with_capacity(k);
        for (i, flow) in flows.iter().enumerate() {
            let z = &out.latents.data()[(j * k + i) * d..(j * k + i + 1) * d];
            let w = flow.inverse(z)?;
            let ll = flow.log_likelihood(&w)?;
            row.push((out.activations.get(i, j), log_prior(z) / d as f64, ll / d as f64));
        }
        components.push(row);
    }
    Ok(Decomposition {
        activations: out.activations,
        reconstruction: out.reconstruction,
        losses: out.losses,
        traces: out.traces,
        components: Some(components),
    })
}

/// Write every output file of one decomposition target.
pub fn write_outputs(
    dir_of: impl Fn(&str) -> std::path::PathBuf,
    labels: &[String],
    frames: &Tensor,
    source_frames: &[usize],
    dec: &Decomposition,
    trace_frames: usize,
) -> Result<()> {
    write_labelled_matrix(&dir_of("H"), "source", labels, &dec.activations)?;
    let frame_labels: Vec<String> = (0..frames.rows()).map(|t| t.to_string()).collect();
    write_labelled_matrix(&dir_of("recon"), "frame", &frame_labels, &dec.reconstruction)?;
    let residual = frame_errors(frames, &dec.reconstruction)?;
    write_csv(
        &dir_of("loss"),
        &["frame", "source_frame", "loss", "residual"],
        (0..frames.rows()).map(|t| {
            vec![t.to_string(), source_frames[t].to_string(), num(dec.losses[t]), num(residual[t])]
        }),
    )?;
    write_csv(
        &dir_of("solver"),
        &["frame", "steps", "stop", "lr_halvings", "halving_steps", "final_lr", "restarted", "best_loss"],
        dec.traces.iter().enumerate().map(|(t, tr)| {
            vec![
                t.to_string(),
                tr.steps.to_string(),
                tr.stop.as_str().to_string(),
                tr.lr_halvings.len().to_string(),
                tr.lr_halvings.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
                num(tr.final_lr),
                tr.restarted.to_string(),
                num(tr.best_loss),
            ]
        }),
    )?;
    if trace_frames > 0 {
        write_csv(
            &dir_of("trace"),
            &["frame", "step", "loss"],
            dec.traces.iter().take(trace_frames).enumerate().flat_map(|(t, tr)| {
                tr.losses
                    .iter()
                    .enumerate()
                    .map(move |(s, &l)| vec![t.to_string(), s.to_string(), num(l)])
            }),
        )?;
    }
    if let Some(comp) = &dec.components {
        write_csv(
            &dir_of("components"),
            &["frame", "source", "h", "latent_logprior_per_dim", "component_loglik_per_dim"],
            comp.iter().enumerate().flat_map(|(t, row)| {
                row.iter().enumerate().map(move |(k, &(h, lp, ll))| {
                    vec![t.to_string(), labels[k].clone(), num(h), num(lp), num(ll)]
                })
            }),
        )?;
    }
    Ok(())
}

/// Indices of the test frames used for the reconstruction experiment.
pub fn subsample(n: usize, keep: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if keep == 0 || keep >= n {
        return idx;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    idx.shuffle(&mut rng);
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

fn select_rows(m: &Tensor, rows: &[usize]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|&r| m.row(r)).collect::<Vec<_>>())
}

fn schedule(cfg: &RunConfig) -> SolverSchedule {
    SolverSchedule {
        record_losses: cfg.solver.record_losses || cfg.decompose.trace_frames > 0,
        ..cfg.solver.clone()
    }
}

fn decompose_target(
    cfg: &RunConfig,
    method: Method,
    frames: &Tensor,
    train_sets: &[Tensor],
    flows: Option<&[FlowModel]>,
) -> Result<Decomposition> {
    let sched = schedule(cfg);
    match method {
        Method::Nmf => run_nmf(frames, train_sets, &sched),
        Method::Dds => run_dds(frames, flows.context("flows required")?, cfg, &sched),
    }
}

/// Extra input: decompose an audio file with one split's sources.
#[derive(Debug, Clone)]
pub struct AudioInput<'a> {
    pub path: &'a Path,
    pub split: &'a str,
}

/// Which parts of the dataset a decomposition run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    /// The per-note test frames of every split.
    pub notes: bool,
    /// The pieces of the configured piece splits.
    pub pieces: bool,
}

impl Targets {
    pub const ALL: Targets = Targets { notes: true, pieces: true };
}

pub fn cmd_decompose(cfg: &RunConfig, layout: &Layout, method: Method, input: Option<AudioInput>) -> Result<()> {
    decompose_targets(cfg, layout, method, Targets::ALL, input)
}

pub fn decompose_targets(
    cfg: &RunConfig,
    layout: &Layout,
    method: Method,
    targets: Targets,
    input: Option<AudioInput>,
) -> Result<()> {
    cfg.validate()?;
    let manifest = Manifest::load(layout)?;
    if let Some(inp) = &input {
        manifest.split(inp.split)?;
    }
    let trace = cfg.decompose.trace_frames;
    for (si, split) in manifest.splits.iter().enumerate() {
        let name = split.spec.name.as_str();
        let notes = &split.spec.notes;
        let labels: Vec<String> = notes.iter().map(|p| p.to_string()).collect();
        let train_sets: Vec<Tensor> = split
            .train_files
            .iter()
            .map(|f| load_frames(&layout.data().join(f)))
            .collect::<Result<_>>()?;
        let flows = match method {
            Method::Dds => Some(load_flows(layout, &manifest, name)?),
            Method::Nmf => None,
        };

        if targets.notes {
            for (i, &pitch) in notes.iter().enumerate() {
                let test = load_frames(&layout.data().join(&split.test_files[i]))?;
                let idx = subsample(
                    test.rows(),
                    cfg.decompose.test_frames_per_note,
                    cfg.seed,
                    ((si as u64) << 8) | pitch as u64,
                );
                let frames = select_rows(&test, &idx);
                info!("decompose {}: {name}/note{pitch} on {} test frames", method.as_str(), frames.rows());
                let one_flow = flows.as_ref().map(|f| vec![f[i].clone()]);
                let dec = decompose_target(cfg, method, &frames, std::slice::from_ref(&train_sets[i]), one_flow.as_deref())
                    .with_context(|| format!("{name}/note{pitch}"))?;
                let target = note_target(pitch);
                write_outputs(
                    |what| layout.output(method, name, &target, what),
                    &labels[i..=i],
                    &frames,
                    &idx,
                    &dec,
                    trace,
                )?;
            }
        }

        if targets.pieces && cfg.decompose.piece_splits.iter().any(|s| s == name) {
            for kind in PIECE_KINDS {
                let piece = manifest.piece(name, kind)?;
                let frames = load_frames(&layout.data().join(&piece.spectrogram))?;
                info!("decompose {}: {name} {kind} piece, {} frames", method.as_str(), frames.rows());
                let dec = decompose_target(cfg, method, &frames, &train_sets, flows.as_deref())
                    .with_context(|| format!("{name} {kind} piece"))?;
                let target = piece_target(kind);
                let all: Vec<usize> = (0..frames.rows()).collect();
                write_outputs(|what| layout.output(method, name, &target, what), &labels, &frames, &all, &dec, trace)?;
            }
        }

        if let Some(inp) = input.as_ref().filter(|i| i.split == name) {
            let wave = dsp::read_wav(inp.path).with_context(|| format!("reading {}", inp.path.display()))?;
            let frames = dsp::spectrogram(&wave, split.norm)?.frames();
            let stem = inp.path.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
            let target = format!("input_{stem}");
            info!("decompose {}: {} with split {name}, {} frames", method.as_str(), inp.path.display(), frames.rows());
            let dec = decompose_target(cfg, method, &frames, &train_sets, flows.as_deref())?;
            let all: Vec<usize> = (0..frames.rows()).collect();
            write_outputs(|what| layout.output(method, name, &target, what), &labels, &frames, &all, &dec, trace)?;
        }
    }
    crate::echo_config(cfg, &layout.root().join("decompose").join(method.as_str()))?;
    Ok(())
}
