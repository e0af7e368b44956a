use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Split};
use super::windows::plan_windows;
use super::{derive_seed, DataError};
use crate::dsp::{LogMelExtractor, LogMelSpectrogram, MelConfig};
use crate::prompts::{PromptError, TemplateBank, DESCRIPTIONS_PER_SPEAKER};

const TAG_SUBSET: u64 = 0x5ab5e7;
const TAG_BATCH: u64 = 0xba7c4;
const TAG_DESC: u64 = 0xde5c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Steps between redraws of the active subset of large corpora.
    pub resample_period: u64,
    /// Active-subset size for large corpora; `None` uses
    /// `4 * batch_size * resample_period`.
    pub active_subset_size: Option<usize>,
    pub descriptions_per_speaker: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            resample_period: 2000,
            active_subset_size: None,
            descriptions_per_speaker: DESCRIPTIONS_PER_SPEAKER,
            seed: 0,
        }
    }
}

/// One audio-text pair: a window of a clip and a description of its speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub corpus: usize,
    pub speaker_id: String,
    pub clip_id: String,
    pub window: (f64, f64),
    pub variant: usize,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioTextBatch {
    pub step: u64,
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone)]
struct SpeakerSlot {
    speaker_id: String,
    entries: Vec<usize>,
    descriptions: Vec<String>,
}

/// Deterministic batch assembly over training splits of one or more corpora.
///
/// Speakers without any known attribute have no description and are skipped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    cfg: SamplerConfig,
    pools: Vec<Vec<SpeakerSlot>>,
    large: Vec<bool>,
}

impl BatchSampler {
    pub fn new(manifests: &[Manifest], cfg: SamplerConfig, bank: &TemplateBank) -> Result<Self, DataError> {
        if cfg.batch_size < 2 {
            return Err(DataError::Config(format!("batch size must be at least 2, got {}", cfg.batch_size)));
        }
        if cfg.resample_period == 0 || cfg.descriptions_per_speaker == 0 {
            return Err(DataError::Config("resample_period and descriptions_per_speaker must be positive".into()));
        }
        let mut pools = Vec::new();
        for m in manifests {
            let mut by_speaker: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
            for (i, e) in m.entries.iter().enumerate() {
                if e.split == Split::Train {
                    by_speaker.entry(e.speaker_id.as_str()).or_default().push(i);
                }
            }
            let mut pool = Vec::new();
            for (id, entries) in by_speaker {
                let rec = m.speaker(id).expect("validated manifest");
                match bank.render_descriptions(rec, cfg.descriptions_per_speaker, derive_seed(cfg.seed, &[TAG_DESC])) {
                    Ok(descriptions) => pool.push(SpeakerSlot {
                        speaker_id: id.to_string(),
                        entries,
                        descriptions,
                    }),
                    Err(PromptError::NoAttributes(_)) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            pools.push(pool);
        }
        Ok(Self {
            cfg,
            pools,
            large: manifests.iter().map(|m| m.large).collect(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    /// Descriptions rendered for a speaker of corpus `corpus`.
    pub fn descriptions(&self, corpus: usize, speaker_id: &str) -> Option<&[String]> {
        self.pools
            .get(corpus)?
            .iter()
            .find(|s| s.speaker_id == speaker_id)
            .map(|s| s.descriptions.as_slice())
    }

    /// Speaker ids eligible at `step` for corpus `corpus`, sorted.
    pub fn active_speakers(&self, corpus: usize, step: u64) -> Vec<&str> {
        self.active_indices(corpus, step)
            .into_iter()
            .map(|i| self.pools[corpus][i].speaker_id.as_str())
            .collect()
    }

    fn active_indices(&self, corpus: usize, step: u64) -> Vec<usize> {
        let n = self.pools[corpus].len();
        if !self.large[corpus] {
            return (0..n).collect();
        }
        let size = self
            .cfg
            .active_subset_size
            .unwrap_or(4 * self.cfg.batch_size * self.cfg.resample_period as usize)
            .min(n);
        let epoch = step / self.cfg.resample_period;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_SUBSET, corpus as u64, epoch]));
        let mut idx = (0..n).choose_multiple(&mut rng, size);
        idx.sort_unstable();
        idx
    }

    pub fn next_batch(&self, manifests: &[Manifest], step: u64) -> Result<AudioTextBatch, DataError> {
        let b = self.cfg.batch_size;
        let candidates: Vec<(usize, usize)> = (0..self.pools.len())
            .flat_map(|c| self.active_indices(c, step).into_iter().map(move |i| (c, i)))
            .collect();
        if candidates.len() < b {
            return Err(DataError::NotEnoughSpeakers {
                needed: b,
                available: candidates.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_BATCH, step]));
        let chosen: Vec<&(usize, usize)> = candidates.choose_multiple(&mut rng, b).collect();
        let mut items = Vec::with_capacity(b);
        for &&(c, i) in &chosen {
            let slot = &self.pools[c][i];
            let entry = &manifests[c].entries[*slot.entries.choose(&mut rng).expect("nonempty")];
            let plan = plan_windows(entry.duration_s)?;
            let window = plan.windows[rng.gen_range(0..plan.windows.len())];
            let variant = rng.gen_range(0..slot.descriptions.len());
            items.push(BatchItem {
                corpus: c,
                speaker_id: slot.speaker_id.clone(),
                clip_id: entry.clip_id.clone(),
                window,
                variant,
                description: slot.descriptions[variant].clone(),
            });
        }
        Ok(AudioTextBatch { step, items })
    }
}

/// One-shot form of [`BatchSampler::next_batch`] with default settings.
pub fn next_batch(manifests: &[Manifest], batch_size: usize, step: u64, seed: u64) -> Result<AudioTextBatch, DataError> {
    let cfg = SamplerConfig {
        batch_size,
        seed,
        ..Default::default()
    };
    BatchSampler::new(manifests, cfg, &TemplateBank::default())?.next_batch(manifests, step)
}

type CacheKey = (usize, String, u64, u64);

/// Memoized log-mel features of clip windows.
#[derive(Debug)]
pub struct FeatureCache {
    extractor: LogMelExtractor,
    map: HashMap<CacheKey, Arc<LogMelSpectrogram>>,
}

impl Default for FeatureCache {
    fn default() -> Self {
        Self::new(MelConfig::default())
    }
}

impl FeatureCache {
    pub fn new(cfg: MelConfig) -> Self {
        Self {
            extractor: LogMelExtractor::new(cfg),
            map: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn extractor(&self) -> &LogMelExtractor {
        &self.extractor
    }

    pub fn window(
        &mut self,
        manifests: &[Manifest],
        corpus: usize,
        clip_id: &str,
        window: (f64, f64),
    ) -> Result<Arc<LogMelSpectrogram>, DataError> {
        let key = (corpus, clip_id.to_string(), window.0.to_bits(), window.1.to_bits());
        if let Some(s) = self.map.get(&key) {
            return Ok(Arc::clone(s));
        }
        let m = &manifests[corpus];
        let entry = m
            .entries
            .iter()
            .find(|e| e.clip_id == clip_id)
            .ok_or_else(|| DataError::UnknownClip(clip_id.to_string()))?;
        let audio = m.load_audio(entry)?;
        let seg = audio.slice_seconds(window.0, window.1);
        let spec = self.extractor.compute(&seg).map_err(|source| DataError::Clip {
            corpus_id: m.corpus_id.clone(),
            clip_id: clip_id.to_string(),
            source,
        })?;
        let spec = Arc::new(spec);
        self.map.insert(key, Arc::clone(&spec));
        Ok(spec)
    }

    pub fn batch(&mut self, manifests: &[Manifest], batch: &AudioTextBatch) -> Result<Vec<Arc<LogMelSpectrogram>>, DataError> {
        batch
            .items
            .iter()
            .map(|it| self.window(manifests, it.corpus, &it.clip_id, it.window))
            .collect()
    }
}
