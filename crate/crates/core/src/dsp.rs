//! Audio frontend: resampling, log-mel spectrograms and WAV I/O.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample rate expected by [`log_mel`].
pub const MODEL_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("empty input signal")]
    EmptySignal,
    #[error("invalid sample rate {0} Hz")]
    InvalidSampleRate(u32),
    #[error("expected {expected} Hz audio, got {actual} Hz")]
    SampleRateMismatch { expected: u32, actual: u32 },
    #[error("audio has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("unsupported WAV format: {0}")]
    UnsupportedWav(String),
    #[error("wav i/o on {path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
}

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, DspError> {
        if sample_rate_hz == 0 {
            return Err(DspError::InvalidSampleRate(sample_rate_hz));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Samples in `[start_s, end_s)`, clamped to the signal.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> Waveform {
        let sr = self.sample_rate_hz as f64;
        let a = ((start_s * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end_s * sr).round().max(0.0) as usize).clamp(a, self.samples.len());
        Waveform {
            samples: self.samples[a..b].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Linear-interpolation resampling.
pub fn resample(w: &Waveform, target_hz: u32) -> Result<Waveform, DspError> {
    if target_hz == 0 {
        return Err(DspError::InvalidSampleRate(target_hz));
    }
    if w.is_empty() {
        return Err(DspError::EmptySignal);
    }
    if target_hz == w.sample_rate_hz {
        return Ok(w.clone());
    }
    let ratio = w.sample_rate_hz as f64 / target_hz as f64;
    let out_len = ((w.len() as f64) / ratio).round().max(1.0) as usize;
    let last = w.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            if hi == lo {
                w.samples[lo]
            } else {
                w.samples[lo] + (w.samples[hi] - w.samples[lo]) * frac
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: target_hz,
    })
}

/// Framing and filterbank parameters of the log-mel frontend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub energy_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: MODEL_SAMPLE_RATE,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 128,
            f_min_hz: 0.0,
            f_max_hz: 8000.0,
            energy_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn log_floor(&self) -> f64 {
        self.energy_floor.ln()
    }

    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.window {
            0
        } else {
            (num_samples - self.window) / self.hop + 1
        }
    }
}

/// Time-frequency log energies, row-major `num_frames x num_mels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMelSpectrogram {
    pub frames: Vec<f64>,
    pub num_frames: usize,
    pub num_mels: usize,
    pub hop_seconds: f64,
    pub window_seconds: f64,
}

impl LogMelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.num_mels..(t + 1) * self.num_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.frames[t * self.num_mels + m]
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank over the non-negative FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels x (n_fft/2 + 1)`, row-major.
    weights: Vec<f64>,
    n_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.n_fft / 2 + 1;
        let lo = hz_to_mel(cfg.f_min_hz);
        let hi = hz_to_mel(cfg.f_max_hz);
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate_hz as f64 / cfg.n_fft as f64;
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f >= l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f <= r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self {
            weights,
            n_bins,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// Reusable log-mel extractor holding the FFT plan and filterbank.
#[derive(Clone)]
pub struct LogMelExtractor {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new(MelConfig::default())
    }
}

impl LogMelExtractor {
    pub fn new(cfg: MelConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // periodic Hann
        let window = (0..cfg.window)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / cfg.window as f64).cos()
            })
            .collect();
        let filterbank = MelFilterbank::new(&cfg);
        Self {
            cfg,
            fft,
            window,
            filterbank,
        }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, w: &Waveform) -> Result<LogMelSpectrogram, DspError> {
        let cfg = &self.cfg;
        if w.sample_rate_hz != cfg.sample_rate_hz {
            return Err(DspError::SampleRateMismatch {
                expected: cfg.sample_rate_hz,
                actual: w.sample_rate_hz,
            });
        }
        if w.is_empty() {
            return Err(DspError::EmptySignal);
        }
        let num_frames = cfg.num_frames(w.len());
        if num_frames == 0 {
            return Err(DspError::TooShort {
                samples: w.len(),
                window: cfg.window,
            });
        }
        let n_bins = cfg.n_fft / 2 + 1;
        let log_floor = cfg.log_floor();
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0; n_bins];
        let mut frames = Vec::with_capacity(num_frames * cfg.n_mels);
        for t in 0..num_frames {
            let start = t * cfg.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < cfg.window {
                    Complex::new(w.samples[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..cfg.n_mels {
                let energy: f64 = self
                    .filterbank
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(a, b)| a * b)
                    .sum();
                let v = if energy > cfg.energy_floor {
                    energy.ln()
                } else {
                    log_floor
                };
                frames.push(v);
            }
        }
        Ok(LogMelSpectrogram {
            frames,
            num_frames,
            num_mels: cfg.n_mels,
            hop_seconds: cfg.hop as f64 / cfg.sample_rate_hz as f64,
            window_seconds: cfg.window as f64 / cfg.sample_rate_hz as f64,
        })
    }
}

/// Log-mel spectrogram under the default 16 kHz / 128-band configuration.
pub fn log_mel(w: &Waveform) -> Result<LogMelSpectrogram, DspError> {
    LogMelExtractor::default().compute(w)
}

/// Reads a PCM16 WAV file; multi-channel audio is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform, DspError> {
    let wav_err = |source| DspError::Wav {
        path: path.display().to_string(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(DspError::UnsupportedWav(format!(
            "{}: {:?} {}-bit (only PCM16 is supported)",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let raw: Vec<i16> = reader
        .samples::<i16>()
        .collect::<Result<_, _>>()
        .map_err(wav_err)?;
    let samples = raw
        .chunks(channels)
        .map(|c| c.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / c.len() as f64)
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Writes mono PCM16.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), DspError> {
    let wav_err = |source| DspError::Wav {
        path: path.display().to_string(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
