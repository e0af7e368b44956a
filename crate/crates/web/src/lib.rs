//! WebAssembly bindings for the static demo page in `www/`.

use wasm_bindgen::prelude::*;

use slap::data::{synth_clip, SynthSpeakerProfile};
use slap::dsp::log_mel;
use slap::model::clap_loss;
use slap::tensor::{Tape, Tensor};
use slap::train::{lr_at, TrainConfig};

/// Log-mel spectrogram laid out frame-major.
#[wasm_bindgen]
pub struct Spectrogram {
    values: Vec<f64>,
    num_frames: usize,
    num_mels: usize,
}

#[wasm_bindgen]
impl Spectrogram {
    #[wasm_bindgen(getter)]
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    #[wasm_bindgen(getter)]
    pub fn num_mels(&self) -> usize {
        self.num_mels
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

impl Spectrogram {
    pub fn get(&self, frame: usize, mel: usize) -> f64 {
        self.values[frame * self.num_mels + mel]
    }
}

pub fn voice_spectrogram(f0_hz: f64, tilt_db_per_oct: f64, hnr_db: f64, seconds: f64, seed: u64) -> Result<Spectrogram, String> {
    if !(40.0..=600.0).contains(&f0_hz) {
        return Err(format!("f0 {f0_hz} Hz is outside 40..600"));
    }
    if !(0.5..=10.0).contains(&seconds) {
        return Err(format!("duration {seconds} s is outside 0.5..10"));
    }
    let profile = SynthSpeakerProfile {
        f0_hz,
        tilt_db_per_oct,
        hnr_db,
        seed,
    };
    let wave = synth_clip(&profile, seconds, seed);
    let spec = log_mel(&wave).map_err(|e| e.to_string())?;
    Ok(Spectrogram {
        values: spec.frames,
        num_frames: spec.num_frames,
        num_mels: spec.num_mels,
    })
}

pub fn lr_curve(total_steps: u64, warmup_steps: u64, base_lr: f64, decay_factor: f64, decay_every: u64) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig {
        total_steps,
        warmup_steps,
        base_lr,
        decay_factor,
        decay_every,
        ..Default::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((0..total_steps).map(|s| lr_at(s, &cfg)).collect())
}

/// Contrastive loss of a row-major `B x B` similarity matrix at temperature `tau`.
pub fn contrastive_loss(similarity: &[f64], tau: f64) -> Result<f64, String> {
    let b = (similarity.len() as f64).sqrt().round() as usize;
    if b == 0 || b * b != similarity.len() {
        return Err(format!("{} values do not form a square matrix", similarity.len()));
    }
    if !(tau > 0.0) {
        return Err(format!("temperature {tau} must be positive"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::new(vec![b, b], similarity.to_vec()).map_err(|e| e.to_string())?);
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    let loss = clap_loss(&mut tape, s, lt).map_err(|e| e.to_string())?;
    Ok(tape.value(loss).item())
}

#[wasm_bindgen]
pub fn synth_spectrogram(f0_hz: f64, tilt_db_per_oct: f64, hnr_db: f64, seconds: f64, seed: u32) -> Result<Spectrogram, JsError> {
    voice_spectrogram(f0_hz, tilt_db_per_oct, hnr_db, seconds, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn lr_schedule(total_steps: u32, warmup_steps: u32, base_lr: f64, decay_factor: f64, decay_every: u32) -> Result<Vec<f64>, JsError> {
    lr_curve(total_steps as u64, warmup_steps as u64, base_lr, decay_factor, decay_every as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn clap_loss_value(similarity: Vec<f64>, tau: f64) -> Result<f64, JsError> {
    contrastive_loss(&similarity, tau).map_err(|e| JsError::new(&e))
}
