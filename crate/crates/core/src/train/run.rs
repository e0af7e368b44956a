use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{train_step, RunConfig, StepMetrics, TrainCheckpoint, TrainError, TrainState};
use crate::data::{BatchSampler, FeatureCache, Manifest, Split};
use crate::dsp::MelConfig;
use crate::model::SlapModel;
use crate::prompts::TemplateBank;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub clap: f64,
    pub mae: f64,
    pub total: f64,
    pub tau: f64,
}

impl From<&StepMetrics> for MetricsRow {
    fn from(m: &StepMetrics) -> Self {
        Self {
            step: m.step,
            lr: m.lr,
            clap: m.clap,
            mae: m.mae,
            total: m.total,
            tau: m.tau,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    pub resume: Option<TrainCheckpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub faults: u64,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Mean contrastive loss over the first and last epoch of this run.
    pub initial_clap: Option<f64>,
    pub final_clap: Option<f64>,
    pub wall_seconds: f64,
}

fn io(path: &Path, e: impl ToString) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io(path, e))).collect()
}

/// Runs `total_steps` training steps (continuing from `opts.resume` if set),
/// writing `metrics.csv`, periodic checkpoints and `final.json` to `out_dir`.
pub fn run(
    cfg: &RunConfig,
    manifests: &[Manifest],
    opts: &RunOptions,
    progress: &mut dyn FnMut(&StepMetrics),
) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    if manifests.is_empty() {
        return Err(TrainError::Config("no manifests given".into()));
    }
    let t0 = Instant::now();
    let tc = &cfg.train;
    let mut state = match &opts.resume {
        Some(ck) => {
            if ck.model.model_config != cfg.model {
                return Err(TrainError::Config("checkpoint model config differs from run config".into()));
            }
            ck.to_state()?
        }
        None => TrainState::new(SlapModel::new(cfg.model.clone(), tc.seed)?),
    };
    let start_step = state.step;
    let sampler = BatchSampler::new(manifests, tc.sampler(), &TemplateBank::default())?;
    let mut cache = FeatureCache::default();
    let pad = MelConfig::default().log_floor();

    let out = &opts.out_dir;
    fs::create_dir_all(out.join(CHECKPOINT_DIR)).map_err(|e| io(out, e))?;
    let metrics_path = out.join(METRICS_FILE);
    let kept: Vec<MetricsRow> = if opts.resume.is_some() && metrics_path.exists() {
        read_metrics(&metrics_path)?
            .into_iter()
            .filter(|r| r.step < start_step)
            .collect()
    } else {
        Vec::new()
    };
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&metrics_path)
        .map_err(|e| io(&metrics_path, e))?;
    writer
        .write_record(["step", "lr", "clap", "mae", "total", "tau"])
        .map_err(|e| io(&metrics_path, e))?;
    for r in &kept {
        writer.serialize(r).map_err(|e| io(&metrics_path, e))?;
    }

    let train_speakers: usize = manifests.iter().map(|m| m.speakers_in(Split::Train).len()).sum();
    let epoch_len = (train_speakers / tc.batch_size).max(1);
    let mut claps = Vec::new();
    while state.step < tc.total_steps {
        let batch = sampler.next_batch(manifests, state.step)?;
        let specs = cache.batch(manifests, &batch)?;
        let spec_refs: Vec<_> = specs.iter().map(|s| s.as_ref()).collect();
        let texts: Vec<&str> = batch.items.iter().map(|it| it.description.as_str()).collect();
        match train_step(&mut state, tc, &spec_refs, &texts, pad) {
            Ok(m) => {
                writer
                    .serialize(MetricsRow::from(&m))
                    .map_err(|e| io(&metrics_path, e))?;
                claps.push(m.clap);
                progress(&m);
            }
            Err(TrainError::NonFiniteLoss { .. } | TrainError::Optim(_)) => {
                if state.faults > tc.max_faults {
                    return Err(TrainError::TooManyFaults(state.faults));
                }
                state.step += 1;
            }
            Err(e) => return Err(e),
        }
        if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 && state.step < tc.total_steps {
            writer.flush().map_err(|e| io(&metrics_path, e))?;
            let p = out.join(CHECKPOINT_DIR).join(format!("step-{:06}.json", state.step));
            TrainCheckpoint::from_state(&state, tc).save(&p)?;
        }
    }
    writer.flush().map_err(|e| io(&metrics_path, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    TrainCheckpoint::from_state(&state, tc).save(&final_checkpoint)?;

    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let k = epoch_len.min(claps.len());
    Ok(RunSummary {
        start_step,
        end_step: state.step,
        faults: state.faults,
        final_checkpoint,
        metrics: metrics_path,
        initial_clap: mean(&claps[..k]),
        final_clap: mean(&claps[claps.len() - k..]),
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}
