use super::{lr_at, TrainConfig, TrainError};
use crate::data::derive_seed;
use crate::dsp::LogMelSpectrogram;
use crate::model::{clap_loss, mae_loss, mask_patches, similarity_matrix, total_loss, Bound, SlapModel};
use crate::tensor::{clip_global_norm, Adam, AdamState, Tape, Tensor, Var};

const TAG_MASK: u64 = 0x3a5c;

/// Model, optimizer state and bookkeeping of a run in progress.
///
/// All randomness is derived from `(seed, step)`, so this is the complete
/// resumable state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub model: SlapModel,
    pub adam: AdamState,
    pub faults: u64,
}

impl TrainState {
    pub fn new(model: SlapModel) -> Self {
        let adam = AdamState::new(model.params());
        Self {
            step: 0,
            model,
            adam,
            faults: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub clap: f64,
    pub mae: f64,
    pub total: f64,
    /// Temperature used in this step's forward pass.
    pub tau: f64,
    pub grad_norm: f64,
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub clap: Var,
    pub mae: Var,
    pub total: Var,
}

/// Forward pass of one batch: masked encoding and reconstruction per clip,
/// projection of pooled audio and text, contrastive and MAE losses.
pub fn batch_losses(
    model: &SlapModel,
    tape: &mut Tape,
    p: &Bound,
    specs: &[&LogMelSpectrogram],
    texts: &[&str],
    lambda: f64,
    mask_seed: u64,
    pad_value: f64,
) -> Result<BatchLosses, TrainError> {
    let cfg = model.config();
    let mut pooled = Vec::with_capacity(specs.len());
    let mut mae_sum: Option<Var> = None;
    for (i, spec) in specs.iter().enumerate() {
        let grid = model.patchify(spec, pad_value)?;
        let split = mask_patches(grid.num_patches(), cfg.mask_ratio, derive_seed(mask_seed, &[TAG_MASK, i as u64]))?;
        let enc = model.encode_audio(tape, p, &grid, Some(&split.visible))?;
        pooled.push(enc.pooled);
        let recon = model.decode_reconstruct(tape, p, enc.latents, &split, &grid)?;
        let mae = mae_loss(tape, recon, &grid.patches, &split.masked)?;
        mae_sum = Some(match mae_sum {
            Some(acc) => tape.add(acc, mae)?,
            None => mae,
        });
    }
    let b = specs.len();
    let mae_total = mae_sum.ok_or(crate::model::ModelError::EmptyBatch)?;
    let mae = tape.scale(mae_total, 1.0 / b as f64);

    let pooled = tape.concat(&pooled, 0)?;
    let audio = model.project_audio(tape, p, pooled)?;
    let mut feats = Vec::with_capacity(b * cfg.text_feat_dim);
    for t in texts {
        feats.extend(model.text_features(t)?);
    }
    let feats = tape.constant(Tensor::new(vec![texts.len(), cfg.text_feat_dim], feats)?);
    let text = model.project_text(tape, p, feats)?;
    let sim = similarity_matrix(tape, audio, text)?;
    let log_tau = model.log_tau(p);
    let clap = clap_loss(tape, sim, log_tau)?;
    let total = total_loss(tape, clap, mae, lambda)?;
    Ok(BatchLosses { clap, mae, total })
}

/// One optimization step at `state.step`. On a non-finite loss nothing but
/// the fault counter changes.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    specs: &[&LogMelSpectrogram],
    texts: &[&str],
    pad_value: f64,
) -> Result<StepMetrics, TrainError> {
    if specs.len() < 2 || specs.len() != texts.len() {
        return Err(TrainError::Config(format!(
            "batch needs at least 2 matched pairs, got {} clips and {} texts",
            specs.len(),
            texts.len()
        )));
    }
    let mut tape = Tape::new();
    let p = state.model.bind(&mut tape, true);
    let mask_seed = derive_seed(cfg.seed, &[state.step]);
    let losses = batch_losses(&state.model, &mut tape, &p, specs, texts, cfg.lambda, mask_seed, pad_value)?;
    let value = |v: Var| tape.value(v).item();
    let (clap, mae, total) = (value(losses.clap), value(losses.mae), value(losses.total));
    if !total.is_finite() {
        state.faults += 1;
        return Err(TrainError::NonFiniteLoss { step: state.step });
    }
    tape.backward(losses.total)?;
    let mut grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(state.model.params().iter())
        .map(|(&v, (_, _, t))| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    let lr = lr_at(state.step, cfg);
    let tau = state.model.tau();
    if let Err(e) = Adam::default().step(state.model.params_mut(), &grads, &mut state.adam, lr) {
        state.faults += 1;
        return Err(e.into());
    }
    let metrics = StepMetrics {
        step: state.step,
        lr,
        clap,
        mae,
        total,
        tau,
        grad_norm,
    };
    state.step += 1;
    Ok(metrics)
}
