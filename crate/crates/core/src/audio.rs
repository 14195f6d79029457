//! Log-mel spectrogram frontend.
//!
//! Mono audio is resampled to 16 kHz if needed, cut into 40 ms Hann-windowed
//! frames every 20 ms, transformed with a zero-padded FFT and projected onto
//! a 64-band triangular mel filterbank before log compression.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
/// Offset inside the log; also the value of silent cells.
pub const EPS_MEL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("clip has {samples} samples, shorter than one {window}-sample analysis window")]
    TooShort { samples: usize, window: usize },
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("invalid frontend configuration: {0}")]
    Config(String),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = AudioError> = std::result::Result<T, E>;

/// Mono samples in `[-1, 1]` at a known rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target: u32) -> Result<Self> {
        if target == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        if target == self.sample_rate || self.samples.is_empty() {
            return Ok(Self {
                samples: self.samples.clone(),
                sample_rate: target,
            });
        }
        let ratio = self.sample_rate as f64 / target as f64;
        let n_out = ((self.samples.len() as f64) / ratio).floor() as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let lo = (pos.floor() as usize).min(last);
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                self.samples[lo] * (1.0 - frac) + self.samples[hi] * frac
            })
            .collect();
        Ok(Self {
            samples,
            sample_rate: target,
        })
    }
}

/// Reads a PCM or float WAV file; multichannel audio is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path)?;
    decode_wav(reader)
}

pub fn read_wav_bytes(bytes: &[u8]) -> Result<AudioClip> {
    decode_wav(hound::WavReader::new(std::io::Cursor::new(bytes))?)
}

fn decode_wav<R: std::io::Read>(mut reader: hound::WavReader<R>) -> Result<AudioClip> {
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioClip::new(mono, spec.sample_rate)
}

/// Encodes a clip as 16-bit mono PCM WAV.
pub fn wav_bytes(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec)?;
        for &s in &clip.samples {
            writer.write_sample(quantize_i16(s))?;
        }
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let bytes = wav_bytes(clip)?;
    std::fs::write(path, bytes).map_err(|e| AudioError::Wav(hound::Error::IoError(e)))
}

pub fn quantize_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: DEFAULT_SAMPLE_RATE,
            window: 640,
            hop: 320,
            n_fft: 1024,
            n_mels: 64,
        }
    }
}

impl FrontendConfig {
    pub fn hop_seconds(&self) -> f64 {
        self.hop as f64 / self.sample_rate as f64
    }

    pub fn window_seconds(&self) -> f64 {
        self.window as f64 / self.sample_rate as f64
    }

    /// Number of frames for a clip of `n` samples, if it holds at least one window.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        (n >= self.window).then(|| (n - self.window) / self.hop + 1)
    }
}

/// `I × m` log-mel energies plus frame timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelFeature {
    #[serde(with = "tensor_rows")]
    frames: Tensor,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl LogMelFeature {
    pub fn new(frames: Tensor, hop_seconds: f64, window_seconds: f64) -> Self {
        assert_eq!(frames.rank(), 2, "log-mel frames must be a matrix");
        Self {
            frames,
            hop_seconds,
            window_seconds,
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_bands(&self) -> usize {
        self.frames.shape()[1]
    }
}

mod tensor_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        let cols = t.shape()[1];
        let rows: Vec<&[f64]> = t.data().chunks(cols.max(1)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Cuts the clip into Hann-windowed frames.
pub fn frame_signal(samples: &[f64], cfg: &FrontendConfig) -> Result<Vec<Vec<f64>>> {
    let count = cfg.frame_count(samples.len()).ok_or(AudioError::TooShort {
        samples: samples.len(),
        window: cfg.window,
    })?;
    let window = hann_window(cfg.window);
    Ok((0..count)
        .map(|i| {
            let start = i * cfg.hop;
            samples[start..start + cfg.window]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect())
}

/// `|FFT|²` of each frame, zero-padded to `n_fft`, keeping `n_fft/2 + 1` bins.
pub fn stft_power(frames: &[Vec<f64>], n_fft: usize) -> Result<Vec<Vec<f64>>> {
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    frames.iter().map(|f| power_spectrum(f, n_fft, fft.as_ref())).collect()
}

fn power_spectrum(frame: &[f64], n_fft: usize, fft: &dyn Fft<f64>) -> Result<Vec<f64>> {
    if frame.len() > n_fft {
        return Err(AudioError::Config(format!(
            "frame of {} samples exceeds n_fft {n_fft}",
            frame.len()
        )));
    }
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(n_fft, Complex::new(0.0, 0.0));
    fft.process(&mut buf);
    Ok(buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect())
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of `m` filters spread evenly on the mel scale
/// between 0 and Nyquist.
pub fn mel_centers(sample_rate: u32, m: usize) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (1..=m).map(|i| mel_to_hz(top * i as f64 / (m + 1) as f64)).collect()
}

/// `m × (n_fft/2 + 1)` triangular mel filterbank.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, m: usize) -> Result<Vec<Vec<f64>>> {
    if m == 0 || n_fft < 2 {
        return Err(AudioError::Config(format!("need m >= 1 and n_fft >= 2, got m={m}, n_fft={n_fft}")));
    }
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..m + 2).map(|i| mel_to_hz(top * i as f64 / (m + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut filters = Vec::with_capacity(m);
    for k in 0..m {
        let (lo, mid, hi) = (edges[k], edges[k + 1], edges[k + 2]);
        let row: Vec<f64> = (0..bins)
            .map(|b| {
                let f = b as f64 * bin_hz;
                let rising = (f - lo) / (mid - lo);
                let falling = (hi - f) / (hi - mid);
                rising.min(falling).max(0.0)
            })
            .collect();
        if row.iter().all(|&w| w == 0.0) {
            return Err(AudioError::Config(format!(
                "{m} mel bands is too many for {bins} FFT bins: band {k} covers no bin"
            )));
        }
        filters.push(row);
    }
    Ok(filters)
}

/// `log(filters · power + EPS_MEL)` per frame.
pub fn log_mel(power: &[Vec<f64>], filters: &[Vec<f64>], cfg: &FrontendConfig) -> LogMelFeature {
    let m = filters.len();
    let mut data = Vec::with_capacity(power.len() * m);
    for frame in power {
        for filt in filters {
            let e: f64 = filt.iter().zip(frame).map(|(w, p)| w * p).sum();
            data.push((e + EPS_MEL).ln());
        }
    }
    let frames = Tensor::new(vec![power.len(), m], data).expect("consistent frame layout");
    LogMelFeature::new(frames, cfg.hop_seconds(), cfg.window_seconds())
}

/// Reusable extractor holding the filterbank and FFT plan.
#[derive(Clone)]
pub struct LogMelExtractor {
    cfg: FrontendConfig,
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl LogMelExtractor {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        if cfg.hop == 0 || cfg.window == 0 || cfg.n_fft < cfg.window {
            return Err(AudioError::Config(format!(
                "need hop > 0 and n_fft >= window, got {cfg:?}"
            )));
        }
        let filters = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.n_mels)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { cfg, filters, fft })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<LogMelFeature> {
        let clip = clip.resample(self.cfg.sample_rate)?;
        let frames = frame_signal(clip.samples(), &self.cfg)?;
        let power = frames
            .iter()
            .map(|f| power_spectrum(f, self.cfg.n_fft, self.fft.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_mel(&power, &self.filters, &self.cfg))
    }
}
