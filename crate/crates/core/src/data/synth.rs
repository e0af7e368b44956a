use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::derive_seed;
use crate::dsp::{Waveform, MODEL_SAMPLE_RATE};
use crate::model::fnv1a;
use crate::prompts::Sex;

pub const MALE_F0_HZ: (f64, f64) = (85.0, 155.0);
pub const FEMALE_F0_HZ: (f64, f64) = (165.0, 255.0);
/// Spectral tilt bands in dB per octave for young and old speakers.
pub const YOUNG_TILT: (f64, f64) = (-7.0, -5.0);
pub const OLD_TILT: (f64, f64) = (-13.0, -11.0);
/// HNR bands in dB for condition-positive and condition-negative speakers.
pub const CONDITION_HNR: (f64, f64) = (0.0, 5.0);
pub const HEALTHY_HNR: (f64, f64) = (20.0, 30.0);

pub const AM_RATE_HZ: f64 = 4.0;
pub const AM_DEPTH: f64 = 0.5;
pub const PEAK: f64 = 0.9;
/// Highest harmonic frequency generated.
pub const MAX_HARMONIC_HZ: f64 = 7600.0;
pub const MIN_CLIP_S: f64 = 0.5;

mod hnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Acoustic parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpeakerProfile {
    pub f0_hz: f64,
    pub tilt_db_per_oct: f64,
    /// Harmonic-to-noise ratio; `f64::INFINITY` (JSON `null`) means no noise.
    #[serde(with = "hnr_serde")]
    pub hnr_db: f64,
    pub seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, band: (f64, f64)) -> f64 {
    rng.gen_range(band.0..=band.1)
}

impl SynthSpeakerProfile {
    /// Profile fully determined by `(speaker_id, global_seed)` and the attributes.
    pub fn for_speaker(speaker_id: &str, sex: Sex, old: bool, condition: bool, global_seed: u64) -> Self {
        let seed = derive_seed(global_seed, &[fnv1a(speaker_id.as_bytes())]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0_hz = uniform(&mut rng, if sex == Sex::Male { MALE_F0_HZ } else { FEMALE_F0_HZ });
        let tilt_db_per_oct = uniform(&mut rng, if old { OLD_TILT } else { YOUNG_TILT });
        let hnr_db = uniform(&mut rng, if condition { CONDITION_HNR } else { HEALTHY_HNR });
        Self {
            f0_hz,
            tilt_db_per_oct,
            hnr_db,
            seed,
        }
    }
}

/// Unnormalized voiced source: harmonics of f0 with the profile's tilt and
/// per-clip random phases, before modulation and noise.
pub fn harmonic_component(profile: &SynthSpeakerProfile, num_samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, &[seed, 1]));
    let sr = MODEL_SAMPLE_RATE as f64;
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64)
        .take_while(|k| k * profile.f0_hz <= MAX_HARMONIC_HZ)
        .map(|k| {
            let amp = 10f64.powf(profile.tilt_db_per_oct * k.log2() / 20.0);
            (2.0 * PI * k * profile.f0_hz / sr, amp, rng.gen_range(0.0..2.0 * PI))
        })
        .collect();
    (0..num_samples)
        .map(|n| {
            let n = n as f64;
            harmonics.iter().map(|&(w, a, phi)| a * (w * n + phi).sin()).sum()
        })
        .collect()
}

/// Harmonic stack plus white noise at the profile's HNR, amplitude-modulated
/// at 4 Hz and peak-normalized to 0.9. Deterministic per `(profile, seed)`.
pub fn synth_clip(profile: &SynthSpeakerProfile, duration_s: f64, seed: u64) -> Waveform {
    let sr = MODEL_SAMPLE_RATE as f64;
    let n = (duration_s.max(MIN_CLIP_S) * sr).round() as usize;
    let harmonic = harmonic_component(profile, n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(profile.seed, &[seed, 2]));
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let noise_gain = if profile.hnr_db.is_infinite() {
        0.0
    } else {
        let power = harmonic.iter().map(|x| x * x).sum::<f64>() / n as f64;
        (power / 10f64.powf(profile.hnr_db / 10.0)).sqrt()
    };
    let mut samples: Vec<f64> = harmonic
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let noise: f64 = if noise_gain > 0.0 {
                StandardNormal.sample(&mut rng)
            } else {
                0.0
            };
            let am = 1.0 + AM_DEPTH * (2.0 * PI * AM_RATE_HZ * i as f64 / sr + am_phase).sin();
            am * (h + noise_gain * noise)
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        samples.iter_mut().for_each(|x| *x *= g);
    }
    Waveform {
        samples,
        sample_rate_hz: MODEL_SAMPLE_RATE,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dominant_hz(x: &[f64]) -> f64 {
        let sr = MODEL_SAMPLE_RATE as f64;
        let n = x.len();
        let mut best = (0.0, 0.0);
        let mut f = 50.0;
        while f <= 400.0 {
            let w = 2.0 * PI * f / sr;
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                re += v * (w * i as f64).cos();
                im -= v * (w * i as f64).sin();
            }
            let p = (re * re + im * im) / n as f64;
            if p > best.1 {
                best = (f, p);
            }
            f += 1.0;
        }
        best.0
    }

    #[test]
    fn profiles_respect_bands() {
        for i in 0..50 {
            let id = format!("s{i}");
            let m = SynthSpeakerProfile::for_speaker(&id, Sex::Male, i % 2 == 0, true, 3);
            let f = SynthSpeakerProfile::for_speaker(&id, Sex::Female, false, false, 3);
            assert!((MALE_F0_HZ.0..=MALE_F0_HZ.1).contains(&m.f0_hz));
            assert!((FEMALE_F0_HZ.0..=FEMALE_F0_HZ.1).contains(&f.f0_hz));
            assert!(m.hnr_db < f.hnr_db);
            assert_eq!(m, SynthSpeakerProfile::for_speaker(&id, Sex::Male, i % 2 == 0, true, 3));
        }
    }

    #[test]
    fn male_dominant_component_in_band() {
        for i in 0..5 {
            let p = SynthSpeakerProfile::for_speaker(&format!("m{i}"), Sex::Male, false, false, 11);
            let w = synth_clip(&p, 0.5, 0);
            let f = dominant_hz(&w.samples);
            assert!((MALE_F0_HZ.0..=MALE_F0_HZ.1).contains(&f), "{f} vs f0 {}", p.f0_hz);
            assert!((f - p.f0_hz).abs() <= 3.0);
        }
    }

    #[test]
    fn infinite_hnr_is_pure_harmonic() {
        let mut p = SynthSpeakerProfile::for_speaker("x", Sex::Female, true, false, 0);
        p.hnr_db = f64::INFINITY;
        let w = synth_clip(&p, 1.0, 5);
        let h = harmonic_component(&p, w.len(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, &[5, 2]));
        let am_phase = rng.gen_range(0.0..2.0 * PI);
        let sr = MODEL_SAMPLE_RATE as f64;
        let clean: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + AM_DEPTH * (2.0 * PI * AM_RATE_HZ * i as f64 / sr + am_phase).sin()))
            .collect();
        let peak = clean.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let sig: f64 = w.samples.iter().map(|x| x * x).sum();
        let resid: f64 = w
            .samples
            .iter()
            .zip(&clean)
            .map(|(a, c)| (a - c * PEAK / peak).powi(2))
            .sum();
        assert!(10.0 * (resid.max(1e-300) / sig).log10() < -80.0);
    }

    #[test]
    fn hnr_is_realized() {
        let mut p = SynthSpeakerProfile::for_speaker("y", Sex::Male, false, true, 0);
        p.hnr_db = 10.0;
        let n = 16_000;
        let h = harmonic_component(&p, n, 9);
        let mut q = p.clone();
        q.hnr_db = f64::INFINITY;
        // Undo AM and normalization by comparing against the noiseless version.
        let noisy = synth_clip(&p, 1.0, 9);
        let clean = synth_clip(&q, 1.0, 9);
        let scale = |w: &Waveform| {
            let dot: f64 = w.samples.iter().zip(&clean.samples).map(|(a, b)| a * b).sum();
            dot / clean.samples.iter().map(|b| b * b).sum::<f64>()
        };
        let g = scale(&noisy);
        let sig: f64 = clean.samples.iter().map(|b| (g * b).powi(2)).sum();
        let noise: f64 = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| (a - g * b).powi(2)).sum();
        let hnr = 10.0 * (sig / noise).log10();
        assert!((hnr - 10.0).abs() < 0.5, "measured {hnr}");
        assert_eq!(h.len(), n);
    }

    #[test]
    fn deterministic_and_normalized() {
        let p = SynthSpeakerProfile::for_speaker("z", Sex::Female, true, true, 1);
        let a = synth_clip(&p, 1.0, 2);
        assert_eq!(a, synth_clip(&p, 1.0, 2));
        assert_ne!(a, synth_clip(&p, 1.0, 3));
        let peak = a.samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!((peak - PEAK).abs() < 1e-12);
        assert_eq!(a.len(), 16_000);
    }

    #[test]
    fn infinite_hnr_serializes_as_null() {
        let mut p = SynthSpeakerProfile::for_speaker("z", Sex::Female, true, true, 1);
        p.hnr_db = f64::INFINITY;
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"hnr_db\":null"));
        let back: SynthSpeakerProfile = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
