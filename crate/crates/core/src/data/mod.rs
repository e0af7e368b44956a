//! Manifests, splits, window plans, synthetic corpora and batch sampling.

mod corpus;
mod manifest;
mod sampler;
mod synth;
mod windows;

use thiserror::Error;

use crate::dsp::DspError;
use crate::prompts::PromptError;

pub use corpus::{generate_corpus, CorpusConfig, SynthCell, SynthCorpus, SYNTH_CONDITION, SYNTH_CORPUS_ID};
pub use manifest::{sidecar_path, AudioSource, Manifest, ManifestEntry, SpeakersFile, Split};
pub use sampler::{next_batch, AudioTextBatch, BatchItem, BatchSampler, FeatureCache, SamplerConfig};
pub use synth::{harmonic_component, synth_clip, SynthSpeakerProfile, FEMALE_F0_HZ, MALE_F0_HZ};
pub use windows::{plan_windows, WindowPlan, HOP_S, WINDOW_S};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}{}: {message}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse {
        path: String,
        line: Option<usize>,
        message: String,
    },
    #[error("corpus {corpus_id}: {message}")]
    Invalid { corpus_id: String, message: String },
    #[error("corpus {corpus_id}, clip {clip_id}: {source}")]
    Clip {
        corpus_id: String,
        clip_id: String,
        #[source]
        source: DspError,
    },
    #[error("unknown clip {0}")]
    UnknownClip(String),
    #[error("batch needs {needed} distinct speakers, only {available} available")]
    NotEnoughSpeakers { needed: usize, available: usize },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Mixes `parts` into `base` with splitmix64 finalization.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
