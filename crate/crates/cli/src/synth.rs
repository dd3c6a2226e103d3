//! `dds synth`: presets, split frames, note audio and test pieces.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dds_core::data::{self, default_piece, default_presets, render_piece, synth_note, VELOCITIES};
use dds_core::dsp::{self, SAMPLE_RATE};
use dds_core::{NoteEvent, NormMeta, PresetParams, Spectrogram, SplitSpec, Tensor};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::layout::{Layout, PIECE_KINDS};
use crate::table::write_csv;

/// Everything later stages need to know about the dataset. Paths are
/// relative to the data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub note_duration_s: f64,
    pub notes: Vec<u8>,
    pub presets: Vec<PresetParams>,
    pub splits: Vec<SplitEntry>,
    pub pieces: Vec<PieceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub spec: SplitSpec,
    pub norm: NormMeta,
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
    pub train_files: Vec<String>,
    pub test_files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceEntry {
    pub split: String,
    pub kind: String,
    pub preset: usize,
    pub events: Vec<NoteEvent>,
    pub n_frames: usize,
    pub audio: String,
    pub spectrogram: String,
    pub truth: String,
}

impl Manifest {
    pub fn load(layout: &Layout) -> Result<Self> {
        let path = layout.manifest();
        if !path.exists() {
            bail!("dataset not found: {} is missing (run `dds synth` first)", path.display());
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn split(&self, name: &str) -> Result<&SplitEntry> {
        self.splits
            .iter()
            .find(|s| s.spec.name == name)
            .with_context(|| format!("split {name:?} is not in the dataset"))
    }

    pub fn piece(&self, split: &str, kind: &str) -> Result<&PieceEntry> {
        self.pieces
            .iter()
            .find(|p| p.split == split && p.kind == kind)
            .with_context(|| format!("no {kind} piece for split {split:?}"))
    }
}

fn relative(layout: &Layout, path: &Path) -> String {
    path.strip_prefix(layout.data())
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

/// Write `frames` (`frames x bins`) as a spectrogram file.
pub fn save_frames(path: &Path, frames: &Tensor, norm: NormMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Spectrogram {
        values: frames.transpose(),
        norm,
    }
    .save(path)?;
    Ok(())
}

/// Frames (`frames x bins`) of a spectrogram file.
pub fn load_frames(path: &Path) -> Result<Tensor> {
    let spec = Spectrogram::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(spec.frames())
}

pub fn write_truth(path: &Path, pitches: &[u8], truth: &Tensor) -> Result<()> {
    let labels: Vec<String> = pitches.iter().map(|p| p.to_string()).collect();
    crate::table::write_labelled_matrix(path, "pitch", &labels, truth)
}

pub fn cmd_synth(cfg: &RunConfig, layout: &Layout, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    let data_dir = layout.data();
    if is_nonempty_dir(&data_dir) {
        if !force {
            bail!("{} is not empty (use --force to overwrite)", data_dir.display());
        }
        fs::remove_dir_all(&data_dir)?;
    }
    fs::create_dir_all(&data_dir)?;

    let presets = default_presets(cfg.data.n_presets, cfg.seed);
    let specs = cfg.split_specs();
    for spec in &specs {
        spec.validate(&presets)
            .with_context(|| format!("split {:?}", spec.name))?;
    }

    let mut splits = Vec::new();
    for spec in &specs {
        info!("synth: split {} ({} train presets, {} test presets)", spec.name, spec.train_presets.len(), spec.test_presets.len());
        let split = data::build_split(spec, &presets, cfg.data.note_duration_s)?;
        let mut entry = SplitEntry {
            spec: spec.clone(),
            norm: split.norm,
            train_frames: Vec::new(),
            test_frames: Vec::new(),
            train_files: Vec::new(),
            test_files: Vec::new(),
        };
        for (i, &pitch) in spec.notes.iter().enumerate() {
            let train = layout.frames(&spec.name, "train", pitch);
            let test = layout.frames(&spec.name, "test", pitch);
            save_frames(&train, &split.train[i], split.norm)?;
            save_frames(&test, &split.test[i], split.norm)?;
            entry.train_frames.push(split.train[i].rows());
            entry.test_frames.push(split.test[i].rows());
            entry.train_files.push(relative(layout, &train));
            entry.test_files.push(relative(layout, &test));
        }
        splits.push(entry);
    }

    if cfg.data.write_note_audio {
        let used: BTreeSet<usize> = specs
            .iter()
            .flat_map(|s| s.train_presets.iter().chain(&s.test_presets).copied())
            .collect();
        fs::create_dir_all(data_dir.join("audio"))?;
        for &id in &used {
            let preset = data::find_preset(&presets, id)?;
            for &pitch in &cfg.data.notes {
                for &v in &VELOCITIES {
                    let wave = synth_note(pitch, v, preset, cfg.data.note_duration_s, SAMPLE_RATE)?;
                    dsp::write_wav(layout.note_audio(pitch, id, v), &wave)?;
                }
            }
        }
    }

    let events = default_piece(&cfg.data.notes);
    let mut pieces = Vec::new();
    fs::create_dir_all(data_dir.join("pieces"))?;
    for entry in &splits {
        let name = &entry.spec.name;
        for kind in PIECE_KINDS {
            let preset_id = if kind == "train" {
                entry.spec.train_presets[0]
            } else {
                entry.spec.test_presets[0]
            };
            let preset = data::find_preset(&presets, preset_id)?;
            let (wave, truth) = render_piece(&events, preset, &cfg.data.notes)?;
            let spec = dsp::spectrogram(&wave, entry.norm)?;
            let audio = layout.piece(name, kind, "wav");
            let spec_path = layout.piece(name, kind, "spec");
            let truth_path = layout.piece_truth(name, kind);
            dsp::write_wav(&audio, &wave)?;
            spec.save(&spec_path)?;
            write_truth(&truth_path, &cfg.data.notes, &truth)?;
            pieces.push(PieceEntry {
                split: name.clone(),
                kind: kind.into(),
                preset: preset_id,
                events: events.clone(),
                n_frames: spec.n_frames(),
                audio: relative(layout, &audio),
                spectrogram: relative(layout, &spec_path),
                truth: relative(layout, &truth_path),
            });
        }
    }

    let manifest = Manifest {
        seed: cfg.seed,
        note_duration_s: cfg.data.note_duration_s,
        notes: cfg.data.notes.clone(),
        presets,
        splits,
        pieces,
    };
    fs::write(layout.manifest(), serde_json::to_string_pretty(&manifest)? + "\n")?;
    crate::echo_config(cfg, &data_dir)?;
    write_csv(
        &data_dir.join("presets.csv"),
        &["id", "inharmonicity", "n_partials", "spectral_tilt_db", "decay_rate", "attack_ms", "noise_floor_db", "seed"],
        manifest.presets.iter().map(|p| {
            vec![
                p.id.to_string(),
                crate::table::num(p.inharmonicity),
                p.n_partials.to_string(),
                crate::table::num(p.spectral_tilt_db),
                crate::table::num(p.decay_rate),
                crate::table::num(p.attack_ms),
                crate::table::num(p.noise_floor_db),
                p.seed.to_string(),
            ]
        }),
    )?;
    info!("synth: wrote {}", layout.manifest().display());
    Ok(manifest)
}
