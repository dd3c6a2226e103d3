//! Synthetic piano-like notes and pieces.
//!
//! Each [`PresetParams`] describes one "instrument": an inharmonic additive
//! voice with its own stiffness, brightness and decay. Splits train on one
//! set of presets and test on a disjoint one, so test frames come from a
//! shifted distribution.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dsp::{self, DspError, NormMeta, Waveform, HOP, N_BINS, SAMPLE_RATE, WINDOW};

/// MIDI velocities rendered for every note.
pub const VELOCITIES: [u8; 4] = [32, 64, 96, 127];

/// A1, A2, A3, A4.
pub const DEFAULT_NOTES: [u8; 4] = [33, 45, 57, 69];

/// Overall gain so a handful of simultaneous notes stay within [-1, 1].
const MASTER_GAIN: f64 = 0.2;
const RELEASE_S: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("presets {0:?} appear in both the train and the test set")]
    Overlap(Vec<usize>),
    #[error("unknown preset id {0}")]
    UnknownPreset(usize),
    #[error("pitch {0} outside the piano range 21..=108")]
    PitchOutOfRange(u8),
    #[error("pitch {0} is not one of the modeled notes")]
    UnknownPitch(u8),
    #[error("velocity {0} is not one of 32, 64, 96, 127")]
    BadVelocity(u8),
    #[error("event list is empty")]
    EmptyEvents,
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Timbre of one synthetic instrument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetParams {
    pub id: usize,
    /// Stiffness coefficient: partial `n` sounds at `f0 n sqrt(1 + B n^2)`.
    pub inharmonicity: f64,
    pub n_partials: usize,
    /// Spectral slope in dB per octave at velocity 127 is half of this value.
    pub spectral_tilt_db: f64,
    /// Partial `n` decays at `sqrt(n) * decay_rate` per second.
    pub decay_rate: f64,
    pub attack_ms: f64,
    /// Level of the additive background noise relative to the overall
    /// output gain, in dB. Independent of velocity.
    pub noise_floor_db: f64,
    pub seed: u64,
}

impl PresetParams {
    fn validate(&self) -> Result<()> {
        let finite = [
            self.inharmonicity,
            self.spectral_tilt_db,
            self.decay_rate,
            self.attack_ms,
            self.noise_floor_db,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.inharmonicity < 0.0 || self.n_partials == 0 || self.attack_ms < 0.0 {
            return Err(DataError::Invalid(format!("preset {}", self.id)));
        }
        Ok(())
    }
}

/// `n` presets spread over a range of stiffness, brightness and decay.
pub fn default_presets(n: usize, seed: u64) -> Vec<PresetParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
            PresetParams {
                id,
                inharmonicity: 10f64.powf(u(&mut rng, -4.3, -2.7)),
                n_partials: rng.random_range(12..=40),
                spectral_tilt_db: u(&mut rng, -9.0, -2.0),
                decay_rate: u(&mut rng, 0.4, 3.0),
                attack_ms: u(&mut rng, 2.0, 15.0),
                noise_floor_db: u(&mut rng, -58.0, -46.0),
                seed: rng.random(),
            }
        })
        .collect()
}

pub fn midi_to_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((pitch as f64 - 69.0) / 12.0)
}

/// Frequency of partial `n` (1-based) of a stiff string.
pub fn partial_frequency(f0: f64, n: usize, inharmonicity: f64) -> f64 {
    let n = n as f64;
    f0 * n * (1.0 + inharmonicity * n * n).sqrt()
}

fn check_velocity(velocity: u8) -> Result<()> {
    if VELOCITIES.contains(&velocity) {
        Ok(())
    } else {
        Err(DataError::BadVelocity(velocity))
    }
}

/// Additive rendering of one note. Partials above Nyquist are dropped.
pub fn synth_note(
    pitch: u8,
    velocity: u8,
    preset: &PresetParams,
    duration_s: f64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(21..=108).contains(&pitch) {
        return Err(DataError::PitchOutOfRange(pitch));
    }
    check_velocity(velocity)?;
    preset.validate()?;
    if !(duration_s > 0.0) {
        return Err(DataError::Invalid(format!("duration {duration_s}")));
    }
    let sr = sample_rate as f64;
    let len = (duration_s * sr).round() as usize;
    let f0 = midi_to_hz(pitch);
    let vel = velocity as f64 / 127.0;
    let gain = vel.powf(1.5);
    let tilt = preset.spectral_tilt_db * (1.5 - vel);

    let mut rng = ChaCha8Rng::seed_from_u64(
        preset.seed ^ ((pitch as u64) << 32) ^ ((velocity as u64) << 40),
    );
    let partials: Vec<(f64, f64, f64, f64)> = (1..=preset.n_partials)
        .map(|n| {
            let freq = partial_frequency(f0, n, preset.inharmonicity);
            let amp = 10f64.powf(tilt * (n as f64).log2() / 20.0);
            let phase = 2.0 * PI * rng.random::<f64>();
            (freq, amp, phase, preset.decay_rate * (n as f64).sqrt())
        })
        .filter(|&(freq, ..)| freq < sr / 2.0)
        .collect();
    let norm: f64 = partials.iter().map(|p| p.1).sum::<f64>().max(1e-12);
    let scale = MASTER_GAIN * gain / norm;
    let noise_amp = MASTER_GAIN * 10f64.powf(preset.noise_floor_db / 20.0);
    let attack = preset.attack_ms / 1000.0;

    let samples = (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let mut env = if attack > 0.0 { (t / attack).min(1.0) } else { 1.0 };
            let remaining = duration_s - t;
            if remaining < RELEASE_S {
                env *= (remaining / RELEASE_S).max(0.0);
            }
            let tone: f64 = partials
                .iter()
                .map(|&(f, a, ph, rate)| a * (-rate * t).exp() * (2.0 * PI * f * t + ph).sin())
                .sum();
            let noise: f64 = rng.sample(StandardNormal);
            env * (scale * tone + noise_amp * noise)
        })
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}

/// A note in a piece.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_s: f64,
    pub duration_s: f64,
}

/// Which presets train and which test, and for which notes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub train_presets: Vec<usize>,
    pub test_presets: Vec<usize>,
    pub notes: Vec<u8>,
}

impl SplitSpec {
    pub fn validate(&self, presets: &[PresetParams]) -> Result<()> {
        let train: BTreeSet<_> = self.train_presets.iter().copied().collect();
        let overlap: Vec<usize> = self
            .test_presets
            .iter()
            .copied()
            .filter(|p| train.contains(p))
            .collect();
        if !overlap.is_empty() {
            return Err(DataError::Overlap(overlap));
        }
        for &id in self.train_presets.iter().chain(&self.test_presets) {
            find_preset(presets, id)?;
        }
        for &p in &self.notes {
            if !(21..=108).contains(&p) {
                return Err(DataError::PitchOutOfRange(p));
            }
        }
        Ok(())
    }
}

pub fn find_preset(presets: &[PresetParams], id: usize) -> Result<&PresetParams> {
    presets
        .iter()
        .find(|p| p.id == id)
        .ok_or(DataError::UnknownPreset(id))
}

/// Frames of one split, one matrix (`frames x bins`) per note.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub notes: Vec<u8>,
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
    /// Computed on the training audio only.
    pub norm: NormMeta,
}

fn note_magnitudes(pitch: u8, presets: &[&PresetParams], duration_s: f64) -> Result<Vec<Tensor>> {
    let mut mags = Vec::new();
    for preset in presets {
        for &v in &VELOCITIES {
            let wave = synth_note(pitch, v, preset, duration_s, SAMPLE_RATE)?;
            mags.push(dsp::stft_magnitude(&wave, WINDOW, HOP)?);
        }
    }
    Ok(mags)
}

fn pool_frames(mags: &[Tensor], norm: NormMeta) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for m in mags {
        let spec = dsp::normalize_with(m, N_BINS, norm)?;
        let frames = spec.frames();
        rows.extend((0..frames.rows()).map(|i| frames.row(i).to_vec()));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Render every (preset, velocity) version of every note and pool the
/// normalized frames. The dB reference comes from the training audio.
pub fn build_split(spec: &SplitSpec, presets: &[PresetParams], note_duration_s: f64) -> Result<SplitData> {
    spec.validate(presets)?;
    let lookup = |ids: &[usize]| -> Result<Vec<&PresetParams>> {
        ids.iter().map(|&id| find_preset(presets, id)).collect()
    };
    let train_presets = lookup(&spec.train_presets)?;
    let test_presets = lookup(&spec.test_presets)?;

    let train_mags: Vec<Vec<Tensor>> = spec
        .notes
        .iter()
        .map(|&p| note_magnitudes(p, &train_presets, note_duration_s))
        .collect::<Result<_>>()?;
    let reference = dsp::reference_max(train_mags.iter().flatten(), N_BINS);
    if !(reference > 0.0) {
        return Err(DspError::SilentCorpus.into());
    }
    let norm = NormMeta {
        reference,
        floor_db: dsp::FLOOR_DB,
    };
    let train = train_mags
        .iter()
        .map(|m| pool_frames(m, norm))
        .collect::<Result<_>>()?;
    let test = spec
        .notes
        .iter()
        .map(|&p| pool_frames(&note_magnitudes(p, &test_presets, note_duration_s)?, norm))
        .collect::<Result<_>>()?;
    Ok(SplitData {
        notes: spec.notes.clone(),
        train,
        test,
        norm,
    })
}

/// Mix note renderings into one waveform and mark, for each of `pitches`,
/// the frames whose window center lies inside one of its events.
pub fn render_piece(
    events: &[NoteEvent],
    preset: &PresetParams,
    pitches: &[u8],
) -> Result<(Waveform, Tensor)> {
    if events.is_empty() {
        return Err(DataError::EmptyEvents);
    }
    let sr = SAMPLE_RATE as f64;
    for e in events {
        if !pitches.contains(&e.pitch) {
            return Err(DataError::UnknownPitch(e.pitch));
        }
        if !(e.onset_s >= 0.0) {
            return Err(DataError::Invalid(format!("onset {}", e.onset_s)));
        }
    }
    let end_s = events
        .iter()
        .map(|e| e.onset_s + e.duration_s)
        .fold(0.0, f64::max);
    let len = ((end_s * sr).ceil() as usize).max(WINDOW);
    let mut samples = vec![0.0; len];
    for e in events {
        let note = synth_note(e.pitch, e.velocity, preset, e.duration_s, SAMPLE_RATE)?;
        let start = (e.onset_s * sr).round() as usize;
        for (s, &x) in samples[start..].iter_mut().zip(&note.samples) {
            *s += x;
        }
    }
    let t = dsp::n_frames(len, WINDOW, HOP);
    let mut truth = Tensor::zeros(vec![pitches.len(), t]);
    for frame in 0..t {
        let center = (frame * HOP + WINDOW / 2) as f64 / sr;
        for (k, &p) in pitches.iter().enumerate() {
            let active = events
                .iter()
                .any(|e| e.pitch == p && center >= e.onset_s && center <= e.onset_s + e.duration_s);
            if active {
                truth.data_mut()[k * t + frame] = 1.0;
            }
        }
    }
    Ok((Waveform::new(samples, SAMPLE_RATE), truth))
}

/// A short polyphonic sequence over `notes`: a rising arpeggio with
/// overlapping sustains followed by a chord, with varied velocities.
pub fn default_piece(notes: &[u8]) -> Vec<NoteEvent> {
    let mut events = Vec::new();
    let step = 0.25;
    for (i, &p) in notes.iter().enumerate() {
        events.push(NoteEvent {
            pitch: p,
            velocity: VELOCITIES[(i + 2) % VELOCITIES.len()],
            onset_s: step * i as f64,
            duration_s: 0.45,
        });
    }
    let chord_at = step * notes.len() as f64 + 0.2;
    for (i, &p) in notes.iter().enumerate().filter(|(i, _)| i % 2 == 0) {
        events.push(NoteEvent {
            pitch: p,
            velocity: VELOCITIES[3 - i % 2],
            onset_s: chord_at,
            duration_s: 0.4,
        });
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> PresetParams {
        PresetParams {
            id: 0,
            inharmonicity: 0.0,
            n_partials: 1,
            spectral_tilt_db: 0.0,
            decay_rate: 1.0,
            attack_ms: 5.0,
            noise_floor_db: -120.0,
            seed: 1,
        }
    }

    #[test]
    fn louder_velocity_has_more_energy() {
        let p = &default_presets(1, 3)[0];
        let loud = synth_note(57, 127, p, 1.0, SAMPLE_RATE).unwrap();
        let soft = synth_note(57, 32, p, 1.0, SAMPLE_RATE).unwrap();
        assert!(loud.rms() > soft.rms());
    }

    #[test]
    fn single_harmonic_peaks_at_nearest_bin() {
        let wave = synth_note(69, 127, &plain(), 1.0, SAMPLE_RATE).unwrap();
        let mag = dsp::stft_magnitude(&wave, WINDOW, HOP).unwrap();
        let expected = (440.0 * WINDOW as f64 / SAMPLE_RATE as f64).round() as usize;
        let argmax = (0..mag.rows())
            .max_by(|&a, &b| mag.get(a, 3).total_cmp(&mag.get(b, 3)))
            .unwrap();
        assert_eq!(argmax, expected);
    }

    #[test]
    fn inharmonic_partial_frequency() {
        let f = partial_frequency(440.0, 10, 4e-4);
        assert!((f - 440.0 * 10.0 * 1.04f64.sqrt()).abs() < 1e-9);
        assert!(f > 4000.0);
    }

    #[test]
    fn bad_inputs() {
        let p = plain();
        assert!(matches!(synth_note(10, 64, &p, 1.0, SAMPLE_RATE), Err(DataError::PitchOutOfRange(10))));
        assert!(matches!(synth_note(60, 50, &p, 1.0, SAMPLE_RATE), Err(DataError::BadVelocity(50))));
        assert!(matches!(render_piece(&[], &p, &[60]), Err(DataError::EmptyEvents)));
    }

    #[test]
    fn overlapping_split_rejected() {
        let presets = default_presets(4, 0);
        let spec = SplitSpec {
            name: "s".into(),
            train_presets: vec![0, 1],
            test_presets: vec![1, 2],
            notes: vec![45],
        };
        assert!(matches!(build_split(&spec, &presets, 1.0), Err(DataError::Overlap(v)) if v == vec![1]));
        let spec = SplitSpec {
            test_presets: vec![9],
            ..spec
        };
        assert!(matches!(build_split(&spec, &presets, 1.0), Err(DataError::UnknownPreset(9))));
    }

    #[test]
    fn split_frame_counts() {
        let presets = default_presets(3, 0);
        let spec = SplitSpec {
            name: "s".into(),
            train_presets: vec![0, 1],
            test_presets: vec![2],
            notes: vec![45],
        };
        let data = build_split(&spec, &presets, 2.0).unwrap();
        let per_note = 1 + (32000 - 2048) / 512;
        assert_eq!(per_note, 59);
        assert_eq!(data.train[0].rows(), 2 * 4 * per_note);
        assert_eq!(data.test[0].rows(), 4 * per_note);
        assert_eq!(data.train[0].cols(), N_BINS);
        assert!(data.train[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        let again = build_split(&spec, &presets, 2.0).unwrap();
        assert_eq!(again, data);
    }

    #[test]
    fn piece_truth_and_linearity() {
        let p = &default_presets(1, 5)[0];
        let a = NoteEvent {
            pitch: 45,
            velocity: 96,
            onset_s: 0.2,
            duration_s: 1.0,
        };
        let b = NoteEvent {
            pitch: 57,
            velocity: 64,
            ..a.clone()
        };
        let (wa, ta) = render_piece(&[a.clone()], p, &[45, 57]).unwrap();
        let (wb, _) = render_piece(&[b.clone()], p, &[45, 57]).unwrap();
        let (wab, tab) = render_piece(&[a, b], p, &[45, 57]).unwrap();
        for ((x, y), s) in wa.samples.iter().zip(&wb.samples).zip(&wab.samples) {
            assert_eq!(x + y, *s);
        }
        let t = ta.cols();
        assert_eq!(t, dsp::n_frames(wa.samples.len(), WINDOW, HOP));
        assert!(ta.row(1).iter().all(|&v| v == 0.0));
        let on: Vec<usize> = (0..t).filter(|&i| ta.get(0, i) == 1.0).collect();
        assert!(!on.is_empty());
        assert_eq!(on.len(), on.last().unwrap() - on[0] + 1, "one contiguous run");
        assert_eq!(tab.row(0), tab.row(1));
    }
}
