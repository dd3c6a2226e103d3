//! Audio to spectrogram frames: WAV ingestion, Hann-windowed STFT,
//! dB compression and normalization to `[0, 1]`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 2048;
pub const HOP: usize = 512;
/// Kept spectral bins (0..4 kHz at 16 kHz with a 2048-point window).
pub const N_BINS: usize = 512;
pub const FLOOR_DB: f64 = -80.0;

const SPEC_MAGIC: &[u8; 4] = b"DDSS";

#[derive(Debug, Error)]
pub enum DspError {
    #[error("window length must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("signal of {len} samples is shorter than the {window}-sample window")]
    SignalTooShort { len: usize, window: usize },
    #[error("cannot normalize: every magnitude is zero")]
    SilentCorpus,
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed WAV file: {0}")]
    MalformedWav(String),
    #[error("not a spectrogram file")]
    NotASpectrogram,
    #[error("spectrogram file is truncated")]
    Truncated,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Scaling constants of the dB normalization, reused on unseen data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    /// Linear magnitude mapped to 0 dB (and hence to 1.0).
    pub reference: f64,
    pub floor_db: f64,
}

/// Normalized log-magnitude spectrogram, `bins x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Tensor,
    pub norm: NormMeta,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.values.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols()
    }

    /// Frames as rows, `frames x bins`.
    pub fn frames(&self) -> Tensor {
        self.values.transpose()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 8 * self.values.len() + 16);
        buf.extend_from_slice(SPEC_MAGIC);
        buf.extend_from_slice(&(self.n_bins() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        for v in self.values.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.norm.reference.to_le_bytes());
        buf.extend_from_slice(&self.norm.floor_db.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != SPEC_MAGIC {
            return Err(DspError::NotASpectrogram);
        }
        if bytes.len() < 12 {
            return Err(DspError::Truncated);
        }
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = d as u64 * t as u64;
        let expected = 12 + 8 * n + 16;
        if (bytes.len() as u64) < expected {
            return Err(DspError::Truncated);
        }
        let f = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let data = (0..n as usize).map(|i| f(12 + 8 * i)).collect();
        let off = 12 + 8 * n as usize;
        Ok(Self {
            values: Tensor::matrix(d, t, data),
            norm: NormMeta {
                reference: f(off),
                floor_db: f(off + 8),
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Periodic Hann window, `w[i] = 0.5 (1 - cos(2 pi i / n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(DspError::WindowTooShort(n));
    }
    Ok((0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos()))
        .collect())
}

/// Number of STFT frames without padding.
pub fn n_frames(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        1 + (len - window) / hop
    }
}

/// Magnitude STFT, `(window/2 + 1) x frames`.
pub fn stft_magnitude(wave: &Waveform, window: usize, hop: usize) -> Result<Tensor> {
    let win = hann_window(window)?;
    let len = wave.samples.len();
    if len < window {
        return Err(DspError::SignalTooShort { len, window });
    }
    if hop == 0 {
        return Err(DspError::Invalid("hop must be positive".into()));
    }
    let t = n_frames(len, window, hop);
    let bins = window / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let mut out = vec![0.0; bins * t];
    for frame in 0..t {
        let start = frame * hop;
        for (b, (&x, &w)) in buf.iter_mut().zip(wave.samples[start..start + window].iter().zip(&win)) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, c) in buf[..bins].iter().enumerate() {
            out[k * t + frame] = c.norm();
        }
    }
    Ok(Tensor::matrix(bins, t, out))
}

/// Largest magnitude among the kept bins of all given spectra.
pub fn reference_max<'a>(mags: impl IntoIterator<Item = &'a Tensor>, keep_bins: usize) -> f64 {
    mags.into_iter()
        .flat_map(|m| {
            let keep = keep_bins.min(m.rows());
            m.data()[..keep * m.cols()].iter().copied()
        })
        .fold(0.0, f64::max)
}

/// Keep the lowest `keep_bins` rows, convert to dB relative to the largest
/// kept magnitude, clamp to `[floor_db, 0]` and map affinely onto `[0, 1]`.
pub fn log_normalize(mag: &Tensor, keep_bins: usize, floor_db: f64) -> Result<Spectrogram> {
    let reference = reference_max([mag], keep_bins);
    if !(reference > 0.0) {
        return Err(DspError::SilentCorpus);
    }
    normalize_with(mag, keep_bins, NormMeta { reference, floor_db })
}

/// Same mapping as [`log_normalize`] with fixed constants, for data that must
/// share the scaling of another corpus.
pub fn normalize_with(mag: &Tensor, keep_bins: usize, norm: NormMeta) -> Result<Spectrogram> {
    if !(norm.reference > 0.0) || !(norm.floor_db < 0.0) {
        return Err(DspError::Invalid(format!("bad normalization constants {norm:?}")));
    }
    if mag.rows() < keep_bins {
        return Err(DspError::Invalid(format!(
            "{} bins available, {keep_bins} requested",
            mag.rows()
        )));
    }
    let t = mag.cols();
    let values = mag.data()[..keep_bins * t]
        .iter()
        .map(|&m| {
            let db = if m > 0.0 {
                20.0 * (m / norm.reference).log10()
            } else {
                f64::NEG_INFINITY
            };
            (db.clamp(norm.floor_db, 0.0) - norm.floor_db) / -norm.floor_db
        })
        .collect();
    Ok(Spectrogram {
        values: Tensor::matrix(keep_bins, t, values),
        norm,
    })
}

/// Full pipeline with fixed normalization constants.
pub fn spectrogram(wave: &Waveform, norm: NormMeta) -> Result<Spectrogram> {
    let mag = stft_magnitude(wave, WINDOW, HOP)?;
    normalize_with(&mag, N_BINS, norm)
}

/// Read a PCM 16-bit or 32-bit float WAV, downmix to mono and resample to
/// 16 kHz.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(DspError::UnsupportedFormat(format!("{channels} channels")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(map_hound)?,
        (fmt, bits) => {
            return Err(DspError::UnsupportedFormat(format!("{fmt:?} {bits}-bit")));
        }
    };
    let mono: Vec<f64> = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample(&mono, spec.sample_rate, SAMPLE_RATE)
    };
    Ok(Waveform::new(samples, SAMPLE_RATE))
}

fn map_hound(e: hound::Error) -> DspError {
    match e {
        hound::Error::IoError(io) => DspError::Io(io),
        hound::Error::Unsupported => DspError::UnsupportedFormat("codec not supported".into()),
        hound::Error::FormatError(msg) => DspError::MalformedWav(msg.to_string()),
        other => DspError::MalformedWav(other.to_string()),
    }
}

/// Write mono 32-bit float WAV.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(map_hound)?;
    for &s in &wave.samples {
        w.write_sample(s as f32).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)?;
    Ok(())
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    const ZERO_CROSSINGS: f64 = 32.0;
    let ratio = to as f64 / from as f64;
    // cutoff relative to the input Nyquist frequency
    let fc = 0.95 * ratio.min(1.0);
    let half = ZERO_CROSSINGS / fc;
    let n_out = ((x.len() as f64) * ratio).round() as usize;
    let sinc = |v: f64| if v == 0.0 { 1.0 } else { (PI * v).sin() / (PI * v) };
    (0..n_out)
        .map(|i| {
            let center = i as f64 / ratio;
            let lo = ((center - half).ceil().max(0.0)) as usize;
            let hi = ((center + half).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (n, &xn) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = center - n as f64;
                let w = 0.5 * (1.0 + (PI * d / half).cos());
                acc += xn * fc * sinc(fc * d) * w;
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hann_closed_form() {
        let w = hann_window(4).unwrap();
        for (a, b) in w.iter().zip([0.0, 0.5, 1.0, 0.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let w = hann_window(2048).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1024], 1.0);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1024.0, epsilon = 1e-9);
        assert!(matches!(hann_window(1), Err(DspError::WindowTooShort(1))));
    }

    #[test]
    fn sinusoid_peak_bin() {
        let samples = (0..8000)
            .map(|i| (2.0 * PI * 500.0 * i as f64 / 16000.0).sin())
            .collect();
        let mag = stft_magnitude(&Waveform::new(samples, 16000), 2048, 512).unwrap();
        assert_eq!(mag.rows(), 1025);
        assert_eq!(mag.cols(), 1 + (8000 - 2048) / 512);
        for t in 0..mag.cols() {
            let argmax = (0..mag.rows())
                .max_by(|&a, &b| mag.get(a, t).total_cmp(&mag.get(b, t)))
                .unwrap();
            assert_eq!(argmax, 64);
        }
    }

    #[test]
    fn silence_and_short_input() {
        let mag = stft_magnitude(&Waveform::new(vec![0.0; 4096], 16000), 2048, 512).unwrap();
        assert!(mag.data().iter().all(|&v| v == 0.0));
        assert!(matches!(log_normalize(&mag, 512, -80.0), Err(DspError::SilentCorpus)));
        assert!(matches!(
            stft_magnitude(&Waveform::new(vec![0.0; 100], 16000), 2048, 512),
            Err(DspError::SignalTooShort { .. })
        ));
    }

    #[test]
    fn normalization_anchors() {
        let reference = 2.0;
        let mag = Tensor::matrix(
            3,
            1,
            vec![reference, reference * 10f64.powf(-40.0 / 20.0), reference * 1e-5],
        );
        let s = log_normalize(&mag, 3, -80.0).unwrap();
        assert_eq!(s.values.data()[0], 1.0);
        assert_abs_diff_eq!(s.values.data()[1], 0.5, epsilon = 1e-12);
        assert_eq!(s.values.data()[2], 0.0);
        assert_eq!(s.norm.reference, reference);
    }

    #[test]
    fn spectrogram_file_roundtrip() {
        let s = Spectrogram {
            values: Tensor::matrix(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0]),
            norm: NormMeta {
                reference: 3.5,
                floor_db: -80.0,
            },
        };
        let back = Spectrogram::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        assert!(matches!(Spectrogram::from_bytes(b"NOPE...."), Err(DspError::NotASpectrogram)));
        let bytes = s.to_bytes();
        assert!(matches!(
            Spectrogram::from_bytes(&bytes[..bytes.len() - 1]),
            Err(DspError::Truncated)
        ));
    }
}
