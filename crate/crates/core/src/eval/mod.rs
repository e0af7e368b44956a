//! Zero-shot and linear-probe evaluation, F1 metrics and report aggregation.

mod metrics;
mod probe;
mod report;

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{plan_windows, DataError, Manifest, Split};
use crate::dsp::{DspError, LogMelExtractor, Waveform};
use crate::model::{ModelError, SlapModel};
use crate::prompts::{Label, TaskSpec};

pub use metrics::{chance_f1, f1, macro_f1, majority_class, naive_baseline, positive_rate};
pub use probe::{fit_probe, LinearProbe, DEFAULT_REG, GRAD_TOL, MAX_ITERS};
pub use report::{aggregate, DimensionMean, EvalReport, MarginRow, OverallMean, ReportRow, REPORT_SCHEMA};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("training split has a single class")]
    SingleClass,
    #[error("probe: {0}")]
    Probe(String),
    #[error("modes {0} need a model checkpoint")]
    MissingModel(String),
    #[error("unknown evaluation mode {0:?} (expected zeroshot, probe or naive)")]
    UnknownMode(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Zeroshot,
    Probe,
    Naive,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Zeroshot, EvalMode::Probe, EvalMode::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Zeroshot => "zeroshot",
            EvalMode::Probe => "probe",
            EvalMode::Naive => "naive",
        }
    }

    pub fn needs_model(self) -> bool {
        self != EvalMode::Naive
    }
}

impl FromStr for EvalMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zeroshot" | "zero-shot" => Ok(EvalMode::Zeroshot),
            "probe" => Ok(EvalMode::Probe),
            "naive" => Ok(EvalMode::Naive),
            other => Err(EvalError::UnknownMode(other.to_string())),
        }
    }
}

/// Clip-level embedding: mean of the projected embeddings of its windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEmbedding {
    pub clip_id: String,
    pub vector: Vec<f64>,
    pub n_windows: usize,
}

/// Elementwise mean of equally sized vectors.
pub fn pool_windows(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= vectors.len() as f64);
    out
}

/// Embeds each window of `audio` without masking and mean-pools them.
pub fn embed_clip(
    model: &SlapModel,
    clip_id: &str,
    audio: &Waveform,
    extractor: &LogMelExtractor,
) -> Result<ClipEmbedding, EvalError> {
    let window = extractor.config().window;
    if audio.len() < window {
        return Err(DspError::TooShort {
            samples: audio.len(),
            window,
        }
        .into());
    }
    let pad = extractor.config().log_floor();
    let plan = plan_windows(audio.duration_s())?;
    let vectors = plan
        .windows
        .iter()
        .map(|&(a, b)| {
            let spec = extractor.compute(&audio.slice_seconds(a, b))?;
            Ok(model.audio_embedding(&spec, pad)?)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(ClipEmbedding {
        clip_id: clip_id.to_string(),
        n_windows: vectors.len(),
        vector: pool_windows(&vectors),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(crate::model::NORM_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShotDecision {
    pub positive: bool,
    /// `cos(e, positive prompt) - cos(e, negative prompt)`.
    pub margin: f64,
}

/// Picks the prompt with the higher cosine similarity; a tie is negative.
pub fn zeroshot_classify(embedding: &[f64], positive_prompt: &[f64], negative_prompt: &[f64]) -> ZeroShotDecision {
    let margin = cosine(embedding, positive_prompt) - cosine(embedding, negative_prompt);
    ZeroShotDecision {
        positive: margin > 0.0,
        margin,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub modes: Vec<EvalMode>,
    pub probe_reg: f64,
    /// Keep per-clip zero-shot margins in the report.
    pub margins: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            modes: EvalMode::ALL.to_vec(),
            probe_reg: DEFAULT_REG,
            margins: false,
        }
    }
}

struct Item {
    corpus: usize,
    entry: usize,
    label: bool,
}

/// Clip embeddings shared across tasks, computed on first use.
pub struct EmbeddingCache<'a> {
    model: &'a SlapModel,
    extractor: LogMelExtractor,
    map: HashMap<(usize, usize), ClipEmbedding>,
}

impl<'a> EmbeddingCache<'a> {
    pub fn new(model: &'a SlapModel) -> Self {
        Self {
            model,
            extractor: LogMelExtractor::new(Default::default()),
            map: HashMap::new(),
        }
    }

    pub fn get(&mut self, manifests: &[Manifest], corpus: usize, entry: usize) -> Result<&ClipEmbedding, EvalError> {
        if !self.map.contains_key(&(corpus, entry)) {
            let m = &manifests[corpus];
            let e = &m.entries[entry];
            let audio = m.load_audio(e)?;
            let emb = embed_clip(self.model, &e.clip_id, &audio, &self.extractor)?;
            self.map.insert((corpus, entry), emb);
        }
        Ok(&self.map[&(corpus, entry)])
    }
}

fn items_for(manifests: &[Manifest], task: &TaskSpec, split: Split) -> Vec<Item> {
    let mut out = Vec::new();
    for (c, m) in manifests.iter().enumerate() {
        if !task.applies_to_corpus(&m.corpus_id) {
            continue;
        }
        for (i, e) in m.entries.iter().enumerate() {
            if e.split != split {
                continue;
            }
            let Some(rec) = m.speaker(&e.speaker_id) else { continue };
            match task.label(rec) {
                Label::Positive => out.push(Item { corpus: c, entry: i, label: true }),
                Label::Negative => out.push(Item { corpus: c, entry: i, label: false }),
                Label::Excluded => {}
            }
        }
    }
    out
}

/// Runs every requested mode on every task. Tasks that cannot be scored keep
/// a row with `f1 = None` and the reason.
pub fn evaluate(
    manifests: &[Manifest],
    tasks: &[TaskSpec],
    model: Option<&SlapModel>,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let needs: Vec<&str> = opts.modes.iter().filter(|m| m.needs_model()).map(|m| m.as_str()).collect();
    if model.is_none() && !needs.is_empty() {
        return Err(EvalError::MissingModel(needs.join(",")));
    }
    let mut cache = model.map(EmbeddingCache::new);
    let mut rows = Vec::new();
    let mut margins = Vec::new();
    for task in tasks {
        let test = items_for(manifests, task, Split::Test);
        let train = items_for(manifests, task, Split::Train);
        let test_labels: Vec<bool> = test.iter().map(|i| i.label).collect();
        let train_labels: Vec<bool> = train.iter().map(|i| i.label).collect();
        let n_pos = test_labels.iter().filter(|&&l| l).count();
        let n_neg = test_labels.len() - n_pos;
        for &mode in &opts.modes {
            let mut row = ReportRow {
                task_id: task.task_id.clone(),
                dimension: task.dimension,
                mode,
                f1: None,
                macro_f1: None,
                n_pos,
                n_neg,
                skipped: None,
            };
            let skip = if n_pos == 0 || n_neg == 0 {
                Some("test split lacks an example of each class")
            } else if mode == EvalMode::Probe && train_labels.iter().all(|&l| l == train_labels[0]) {
                Some("training split lacks an example of each class")
            } else if mode == EvalMode::Naive && train_labels.is_empty() {
                Some("training split is empty")
            } else {
                None
            };
            if let Some(reason) = skip {
                row.skipped = Some(reason.to_string());
                rows.push(row);
                continue;
            }
            let preds: Vec<bool> = match mode {
                EvalMode::Naive => vec![majority_class(&train_labels); test.len()],
                EvalMode::Zeroshot => {
                    let (model, cache) = (model.expect("checked"), cache.as_mut().expect("checked"));
                    let pos = model.text_embedding(&task.positive_prompt)?;
                    let neg = model.text_embedding(&task.negative_prompt)?;
                    let mut preds = Vec::with_capacity(test.len());
                    for it in &test {
                        let emb = cache.get(manifests, it.corpus, it.entry)?;
                        let d = zeroshot_classify(&emb.vector, &pos, &neg);
                        if opts.margins {
                            let e = &manifests[it.corpus].entries[it.entry];
                            margins.push(MarginRow {
                                task_id: task.task_id.clone(),
                                clip_id: e.clip_id.clone(),
                                speaker_id: e.speaker_id.clone(),
                                label: it.label,
                                margin: d.margin,
                            });
                        }
                        preds.push(d.positive);
                    }
                    preds
                }
                EvalMode::Probe => {
                    let cache = cache.as_mut().expect("checked");
                    let embed = |items: &[Item], cache: &mut EmbeddingCache| -> Result<Vec<Vec<f64>>, EvalError> {
                        items
                            .iter()
                            .map(|it| Ok(cache.get(manifests, it.corpus, it.entry)?.vector.clone()))
                            .collect()
                    };
                    let xtr = embed(&train, cache)?;
                    let xte = embed(&test, cache)?;
                    fit_probe(&xtr, &train_labels, opts.probe_reg)?.predict_all(&xte)
                }
            };
            row.f1 = Some(f1(&preds, &test_labels));
            row.macro_f1 = Some(macro_f1(&preds, &test_labels));
            rows.push(row);
        }
    }
    Ok(EvalReport::from_rows(rows, margins))
}
