//! The SLAP model: masked-autoencoder audio encoder, frozen text features,
//! projection heads and the training objectives.

mod config;
mod layers;
mod loss;
mod patch;
mod text;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::ModelConfig;
pub use layers::{Attention, Block, Bound, LayerNorm, Linear, ProjectionHead};
pub use loss::{
    clap_loss, mae_loss, mae_loss_value, normalize_targets, similarity_matrix, total_loss,
    SimilarityMatrix, NORM_EPS, TARGET_VAR_FLOOR,
};
pub use patch::{mask_patches, patchify, unpatchify, MaskSplit, PatchGrid};
pub use text::{char_ngrams, embed_text, normalize_text, DEFAULT_TEXT_FEAT_DIM};

pub(crate) use text::fnv1a;

use crate::dsp::LogMelSpectrogram;
use crate::tensor::{
    ParamId, ParamStore, Tape, Tensor, TensorError, TensorRecord, Var, CHECKPOINT_FORMAT_VERSION,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty spectrogram")]
    EmptySpectrogram,
    #[error("empty text")]
    EmptyText,
    #[error("empty batch")]
    EmptyBatch,
    #[error("similarity matrix must be square, got {0:?}")]
    NonSquare(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Encoder output for one spectrogram.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `num_encoded x enc_dim`.
    pub latents: Var,
    /// `1 x enc_dim`, mean over the encoded patches.
    pub pooled: Var,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: Linear,
    encoder: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    decoder: Vec<Block>,
    dec_norm: LayerNorm,
    dec_pred: Linear,
    proj_a: ProjectionHead,
    proj_t: ProjectionHead,
    log_tau: ParamId,
}

/// Model configuration, parameters and their roles.
#[derive(Debug, Clone)]
pub struct SlapModel {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl SlapModel {
    /// Freshly initialized model; parameters are a pure function of `(cfg, seed)`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let eps = cfg.layer_norm_eps;
        let patch_embed = Linear::new(&mut p, "encoder.patch_embed", cfg.patch_dim(), cfg.enc_dim, &mut rng);
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                Block::new(&mut p, &format!("encoder.block{i}"), cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio, eps, &mut rng)
            })
            .collect();
        let enc_norm = LayerNorm::new(&mut p, "encoder.norm", cfg.enc_dim, eps);
        let dec_embed = Linear::new(&mut p, "decoder.embed", cfg.enc_dim, cfg.dec_dim, &mut rng);
        let mask_token = p.add_zeros("decoder.mask_token", &[1, cfg.dec_dim]);
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                Block::new(&mut p, &format!("decoder.block{i}"), cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio, eps, &mut rng)
            })
            .collect();
        let dec_norm = LayerNorm::new(&mut p, "decoder.norm", cfg.dec_dim, eps);
        let dec_pred = Linear::new(&mut p, "decoder.pred", cfg.dec_dim, cfg.patch_dim(), &mut rng);
        let proj_a = ProjectionHead::new(&mut p, "proj_a", cfg.enc_dim, cfg.embed_dim, &mut rng);
        let proj_t = ProjectionHead::new(&mut p, "proj_t", cfg.text_feat_dim, cfg.embed_dim, &mut rng);
        let log_tau = p.add("log_tau", Tensor::vector(vec![cfg.tau_init.ln()]));
        Ok(Self {
            cfg,
            params: p,
            layout: Layout {
                patch_embed,
                encoder,
                enc_norm,
                dec_embed,
                mask_token,
                decoder,
                dec_norm,
                dec_pred,
                proj_a,
                proj_t,
                log_tau,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound::new(&self.params, tape, trainable)
    }

    /// Parameter ids of the text projection head.
    pub fn proj_t_params(&self) -> Vec<ParamId> {
        let h = &self.layout.proj_t;
        vec![h.fc1.w, h.fc1.b, h.fc2.w, h.fc2.b]
    }

    pub fn proj_a_params(&self) -> Vec<ParamId> {
        let h = &self.layout.proj_a;
        vec![h.fc1.w, h.fc1.b, h.fc2.w, h.fc2.b]
    }

    pub fn log_tau_param(&self) -> ParamId {
        self.layout.log_tau
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.layout.log_tau).item().exp()
    }

    pub fn patchify(&self, spec: &LogMelSpectrogram, pad_value: f64) -> Result<PatchGrid, ModelError> {
        patchify(spec, &self.cfg, pad_value)
    }

    fn normalized_input(&self, grid: &PatchGrid, rows: &[usize]) -> Result<Tensor, ModelError> {
        let pd = self.cfg.patch_dim();
        let mut data = Vec::with_capacity(rows.len() * pd);
        for &r in rows {
            data.extend(
                grid.patches
                    .row(r)
                    .iter()
                    .map(|x| (x - self.cfg.input_mean) / self.cfg.input_std),
            );
        }
        Ok(Tensor::new(vec![rows.len(), pd], data)?)
    }

    /// Encodes the visible patches (all patches when `visible` is `None`).
    pub fn encode_audio(
        &self,
        tape: &mut Tape,
        p: &Bound,
        grid: &PatchGrid,
        visible: Option<&[usize]>,
    ) -> Result<EncoderOutput, ModelError> {
        let all: Vec<usize>;
        let rows = match visible {
            Some(v) => v,
            None => {
                all = (0..grid.num_patches()).collect();
                &all
            }
        };
        if rows.is_empty() {
            return Err(ModelError::EmptySpectrogram);
        }
        let input = tape.constant(self.normalized_input(grid, rows)?);
        let pos_all = grid.positions(self.cfg.enc_dim);
        let mut pos = Vec::with_capacity(rows.len() * self.cfg.enc_dim);
        for &r in rows {
            pos.extend_from_slice(pos_all.row(r));
        }
        let pos = tape.constant(Tensor::new(vec![rows.len(), self.cfg.enc_dim], pos)?);
        self.encode_tokens(tape, p, input, pos)
    }

    /// Encoder on pre-assembled token inputs and position encodings.
    pub fn encode_tokens(&self, tape: &mut Tape, p: &Bound, input: Var, pos: Var) -> Result<EncoderOutput, ModelError> {
        let x = self.layout.patch_embed.forward(tape, p, input)?;
        let mut x = tape.add(x, pos)?;
        for block in &self.layout.encoder {
            x = block.forward(tape, p, x)?;
        }
        let latents = self.layout.enc_norm.forward(tape, p, x)?;
        let pooled = tape.mean_rows(latents)?;
        Ok(EncoderOutput { latents, pooled })
    }

    /// Predicts every patch from the visible latents plus mask tokens.
    pub fn decode_reconstruct(
        &self,
        tape: &mut Tape,
        p: &Bound,
        latents: Var,
        split: &MaskSplit,
        grid: &PatchGrid,
    ) -> Result<Var, ModelError> {
        let n_vis = split.visible.len();
        if tape.shape(latents).first() != Some(&n_vis) {
            return Err(TensorError::ShapeMismatch {
                op: "decode_reconstruct",
                lhs: tape.shape(latents).to_vec(),
                rhs: vec![n_vis, self.cfg.enc_dim],
            }
            .into());
        }
        let y = self.layout.dec_embed.forward(tape, p, latents)?;
        let with_token = tape.concat(&[y, p.var(self.layout.mask_token)], 0)?;
        let mut index = vec![n_vis; grid.num_patches()];
        for (row, &patch) in split.visible.iter().enumerate() {
            index[patch] = row;
        }
        let full = tape.gather_rows(with_token, &index)?;
        let pos = tape.constant(grid.positions(self.cfg.dec_dim));
        let mut x = tape.add(full, pos)?;
        for block in &self.layout.decoder {
            x = block.forward(tape, p, x)?;
        }
        let x = self.layout.dec_norm.forward(tape, p, x)?;
        Ok(self.layout.dec_pred.forward(tape, p, x)?)
    }

    pub fn project_audio(&self, tape: &mut Tape, p: &Bound, pooled: Var) -> Result<Var, ModelError> {
        Ok(self.layout.proj_a.forward(tape, p, pooled)?)
    }

    pub fn project_text(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<Var, ModelError> {
        Ok(self.layout.proj_t.forward(tape, p, features)?)
    }

    pub fn log_tau(&self, p: &Bound) -> Var {
        p.var(self.layout.log_tau)
    }

    /// Frozen text features for one description.
    pub fn text_features(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        embed_text(text, self.cfg.text_feat_dim)
    }

    /// Mask-free pooled encoder output (before projection).
    pub fn pooled_audio(&self, spec: &LogMelSpectrogram, pad_value: f64) -> Result<Vec<f64>, ModelError> {
        let grid = self.patchify(spec, pad_value)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.encode_audio(&mut tape, &p, &grid, None)?;
        Ok(tape.value(out.pooled).data().to_vec())
    }

    /// Projected audio embedding `s_a` of one spectrogram, without masking.
    pub fn audio_embedding(&self, spec: &LogMelSpectrogram, pad_value: f64) -> Result<Vec<f64>, ModelError> {
        let grid = self.patchify(spec, pad_value)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let out = self.encode_audio(&mut tape, &p, &grid, None)?;
        let s = self.project_audio(&mut tape, &p, out.pooled)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Projected text embedding `s_t` of one string.
    pub fn text_embedding(&self, text: &str) -> Result<Vec<f64>, ModelError> {
        let feats = self.text_features(text)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, feats.len()], feats)?);
        let s = self.project_text(&mut tape, &p, x)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_config: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), TensorRecord::from(t)))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {} (expected {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let mut model = Self::new(ckpt.model_config.clone(), 0)?;
        let map: BTreeMap<String, Tensor> = ckpt
            .params
            .iter()
            .map(|(n, r)| Tensor::try_from(r).map(|t| (n.clone(), t)))
            .collect::<Result<_, _>>()
            .map_err(ModelError::Checkpoint)?;
        model.params.load_map(&map).map_err(ModelError::Checkpoint)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(&self.to_checkpoint()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(path, json).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: ModelCheckpoint = serde_json::from_str(&text)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ckpt)
    }
}

/// On-disk model: config plus named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub params: BTreeMap<String, TensorRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            patch_time: 2,
            patch_mel: 4,
            num_mels: 8,
            enc_dim: 8,
            enc_layers: 2,
            enc_heads: 2,
            dec_dim: 8,
            dec_layers: 1,
            dec_heads: 2,
            mlp_ratio: 2,
            embed_dim: 4,
            text_feat_dim: 16,
            ..Default::default()
        }
    }

    fn spec(frames: usize, mels: usize, seed: u64) -> LogMelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        LogMelSpectrogram {
            frames: (0..frames * mels).map(|_| rng.gen_range(-10.0..2.0)).collect(),
            num_frames: frames,
            num_mels: mels,
            hop_seconds: 0.01,
            window_seconds: 0.025,
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let model = SlapModel::new(tiny_cfg(), 7).unwrap();
        let s = spec(5, 8, 1);
        let grid = model.patchify(&s, -23.0).unwrap();
        assert_eq!(grid.num_patches(), 6);
        let split = mask_patches(6, 0.5, 3).unwrap();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let out = model.encode_audio(&mut tape, &p, &grid, Some(&split.visible)).unwrap();
        assert_eq!(tape.shape(out.latents), &[3, 8]);
        assert_eq!(tape.shape(out.pooled), &[1, 8]);
        let rec = model.decode_reconstruct(&mut tape, &p, out.latents, &split, &grid).unwrap();
        assert_eq!(tape.shape(rec), &[6, 8]);

        let a = model.pooled_audio(&s, -23.0).unwrap();
        assert_eq!(a, model.pooled_audio(&s, -23.0).unwrap());
        assert_eq!(model.audio_embedding(&s, -23.0).unwrap().len(), 4);
        assert_eq!(model.text_embedding("The speaker is a man.").unwrap().len(), 4);
        let again = SlapModel::new(tiny_cfg(), 7).unwrap();
        assert_eq!(again.params(), model.params());
    }

    #[test]
    fn tau_starts_at_init() {
        let model = SlapModel::new(ModelConfig::default(), 0).unwrap();
        assert!((model.tau() - 0.07).abs() < 1e-15);
    }

    #[test]
    fn permutation_equivariance() {
        let model = SlapModel::new(tiny_cfg(), 11).unwrap();
        let grid = model.patchify(&spec(6, 8, 2), -23.0).unwrap();
        let n = grid.num_patches();
        let perm: Vec<usize> = (0..n).rev().collect();
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            let out = model.encode_audio(&mut tape, &p, &grid, Some(order)).unwrap();
            tape.value(out.latents).clone()
        };
        let base = run(&(0..n).collect::<Vec<_>>());
        let permuted = run(&perm);
        for (k, &src) in perm.iter().enumerate() {
            for (a, b) in permuted.row(k).iter().zip(base.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let model = SlapModel::new(tiny_cfg(), 5).unwrap();
        model.save(&path).unwrap();
        let back = SlapModel::load(&path).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.config(), model.config());

        let mut ckpt = model.to_checkpoint();
        ckpt.model_config.enc_dim = 16;
        let err = SlapModel::from_checkpoint(&ckpt).unwrap_err();
        assert!(matches!(err, ModelError::Checkpoint(_)));
    }
}
