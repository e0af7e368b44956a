use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture and objective settings of the SLAP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per patch.
    pub patch_time: usize,
    /// Mel bins per patch.
    pub patch_mel: usize,
    pub num_mels: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    /// Hidden width multiplier of the transformer MLPs.
    pub mlp_ratio: usize,
    /// Shared embedding dimension `d`.
    pub embed_dim: usize,
    pub text_feat_dim: usize,
    pub mask_ratio: f64,
    pub tau_init: f64,
    /// Log-mel values are mapped to `(x - input_mean) / input_std` before patch embedding.
    pub input_mean: f64,
    pub input_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_time: 4,
            patch_mel: 16,
            num_mels: 128,
            enc_dim: 64,
            enc_layers: 2,
            enc_heads: 4,
            dec_dim: 32,
            dec_layers: 1,
            dec_heads: 4,
            mlp_ratio: 4,
            embed_dim: 64,
            text_feat_dim: 256,
            mask_ratio: 0.75,
            tau_init: 0.07,
            input_mean: -4.0,
            input_std: 4.0,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch_time == 0 || self.patch_mel == 0 {
            return bad("patch sizes must be positive".into());
        }
        if !self.num_mels.is_multiple_of(self.patch_mel) {
            return bad(format!(
                "num_mels {} is not divisible by patch_mel {}",
                self.num_mels, self.patch_mel
            ));
        }
        for (name, dim, heads) in [
            ("enc", self.enc_dim, self.enc_heads),
            ("dec", self.dec_dim, self.dec_heads),
        ] {
            if heads == 0 || dim == 0 || dim % heads != 0 {
                return bad(format!("{name}_dim {dim} must be a positive multiple of {name}_heads {heads}"));
            }
            if dim % 4 != 0 {
                return bad(format!("{name}_dim {dim} must be divisible by 4 for 2-D position encodings"));
            }
        }
        if self.embed_dim == 0 || self.text_feat_dim == 0 || self.mlp_ratio == 0 {
            return bad("embed_dim, text_feat_dim and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(self.tau_init > 0.0) || !(self.input_std > 0.0) {
            return bad("tau_init and input_std must be positive".into());
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_time * self.patch_mel
    }

    /// Compact summary of every dimension that determines parameter shapes.
    pub fn dimension_signature(&self) -> String {
        format!(
            "patch={}x{} mels={} enc={}x{}h{} dec={}x{}h{} mlp_ratio={} d={} text={}",
            self.patch_time,
            self.patch_mel,
            self.num_mels,
            self.enc_dim,
            self.enc_layers,
            self.enc_heads,
            self.dec_dim,
            self.dec_layers,
            self.dec_heads,
            self.mlp_ratio,
            self.embed_dim,
            self.text_feat_dim
        )
    }
}
