use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError};
use crate::dsp::LogMelSpectrogram;
use crate::tensor::Tensor;

/// Spectrogram cut into `patch_time x patch_mel` tiles, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `num_patches x patch_dim`; each row is the tile flattened frame-major.
    pub patches: Tensor,
    pub time_patches: usize,
    pub mel_patches: usize,
    pub patch_time: usize,
    pub patch_mel: usize,
    /// Frames before padding.
    pub num_frames: usize,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.time_patches * self.mel_patches
    }

    /// `(time index, mel index)` of patch `p`.
    pub fn coords(&self, p: usize) -> (usize, usize) {
        (p / self.mel_patches, p % self.mel_patches)
    }

    /// Fixed 2-D sin-cos encodings, `num_patches x dim`.
    pub fn positions(&self, dim: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.num_patches() * dim);
        for p in 0..self.num_patches() {
            let (t, m) = self.coords(p);
            data.extend(sincos(t, dim / 2));
            data.extend(sincos(m, dim / 2));
        }
        Tensor::new(vec![self.num_patches(), dim], data).expect("positions shape")
    }
}

fn sincos(pos: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let omega = 1.0 / 10_000f64.powf(k as f64 / half as f64);
        out.push((pos as f64 * omega).sin());
    }
    for k in 0..half {
        let omega = 1.0 / 10_000f64.powf(k as f64 / half as f64);
        out.push((pos as f64 * omega).cos());
    }
    out
}

/// Tiles a spectrogram, padding the time axis with `pad_value` up to a
/// multiple of `patch_time`.
pub fn patchify(
    spec: &LogMelSpectrogram,
    cfg: &ModelConfig,
    pad_value: f64,
) -> Result<PatchGrid, ModelError> {
    if spec.num_frames == 0 || spec.frames.is_empty() {
        return Err(ModelError::EmptySpectrogram);
    }
    if spec.num_mels != cfg.num_mels || !spec.num_mels.is_multiple_of(cfg.patch_mel) {
        return Err(ModelError::Config(format!(
            "spectrogram has {} mel bins, model expects {} in tiles of {}",
            spec.num_mels, cfg.num_mels, cfg.patch_mel
        )));
    }
    let (pt, pm) = (cfg.patch_time, cfg.patch_mel);
    let time_patches = spec.num_frames.div_ceil(pt);
    let mel_patches = spec.num_mels / pm;
    let mut data = Vec::with_capacity(time_patches * mel_patches * pt * pm);
    for tp in 0..time_patches {
        for mp in 0..mel_patches {
            for dt in 0..pt {
                let t = tp * pt + dt;
                for dm in 0..pm {
                    let v = if t < spec.num_frames {
                        spec.get(t, mp * pm + dm)
                    } else {
                        pad_value
                    };
                    data.push(v);
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![time_patches * mel_patches, pt * pm], data)?,
        time_patches,
        mel_patches,
        patch_time: pt,
        patch_mel: pm,
        num_frames: spec.num_frames,
    })
}

/// Reassembles the original (unpadded) frames, row-major `num_frames x num_mels`.
pub fn unpatchify(grid: &PatchGrid) -> Vec<f64> {
    let num_mels = grid.mel_patches * grid.patch_mel;
    let mut out = vec![0.0; grid.num_frames * num_mels];
    let pd = grid.patch_time * grid.patch_mel;
    for p in 0..grid.num_patches() {
        let (tp, mp) = grid.coords(p);
        let row = &grid.patches.data()[p * pd..(p + 1) * pd];
        for dt in 0..grid.patch_time {
            let t = tp * grid.patch_time + dt;
            if t >= grid.num_frames {
                continue;
            }
            for dm in 0..grid.patch_mel {
                out[t * num_mels + mp * grid.patch_mel + dm] = row[dt * grid.patch_mel + dm];
            }
        }
    }
    out
}

/// Partition of patch indices into encoder-visible and masked sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSplit {
    /// Ascending.
    pub visible: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
}

impl MaskSplit {
    pub fn none(num_patches: usize) -> Self {
        Self {
            visible: (0..num_patches).collect(),
            masked: Vec::new(),
        }
    }
}

/// Seeded random masking of `round(mask_ratio * num_patches)` patches.
///
/// At least one patch always stays visible so the encoder has input.
pub fn mask_patches(num_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskSplit, ModelError> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(ModelError::Config(format!("mask_ratio {mask_ratio} outside [0, 1)")));
    }
    if num_patches == 0 {
        return Err(ModelError::EmptySpectrogram);
    }
    let n_mask = ((mask_ratio * num_patches as f64).round() as usize).min(num_patches - 1);
    let mut perm: Vec<usize> = (0..num_patches).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = perm[..n_mask].to_vec();
    let mut visible = perm[n_mask..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskSplit { visible, masked })
}
