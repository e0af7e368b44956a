use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::manifest::{AudioSource, Manifest, ManifestEntry, Split};
use super::synth::SynthSpeakerProfile;
use super::{derive_seed, DataError};
use crate::dsp::{write_wav, Waveform};
use crate::model::fnv1a;
use crate::prompts::{Sex, SpeakerAttributes, SpeakerRecord};

pub const SYNTH_CORPUS_ID: &str = "synth";
pub const SYNTH_CONDITION: &str = "dysphonia";
pub const YOUNG_AGES: (u32, u32) = (20, 39);
pub const OLD_AGES: (u32, u32) = (60, 79);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub clips_per_speaker: usize,
    pub clip_duration_s: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 40,
            clips_per_speaker: 3,
            clip_duration_s: 1.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Cells in an order whose every prefix of length 2 or 4 is balanced in
/// all three attributes.
const CELL_ORDER: [usize; 8] = [0, 7, 3, 4, 1, 6, 2, 5];

/// Attribute cell of a synthetic speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SynthCell {
    pub sex: Sex,
    pub old: bool,
    pub condition: bool,
}

impl SynthCell {
    fn from_index(i: usize) -> Self {
        Self {
            sex: if i.is_multiple_of(2) { Sex::Male } else { Sex::Female },
            condition: (i / 2) % 2 == 1,
            old: (i / 4) % 2 == 1,
        }
    }
}

/// In-memory synthetic corpus; entries use synth sources until written.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub profiles: Vec<SynthSpeakerProfile>,
}

/// Balanced, seeded synthetic corpus with a stratified speaker-disjoint split.
///
/// Speakers cycle through the 8 cells of sex x age band x condition; test
/// speakers are drawn round-robin across cells.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<SynthCorpus, DataError> {
    if cfg.n_speakers < 4 {
        return Err(DataError::Config(format!("need at least 4 speakers, got {}", cfg.n_speakers)));
    }
    if cfg.clips_per_speaker == 0 {
        return Err(DataError::Config("clips_per_speaker must be positive".into()));
    }
    if !(cfg.clip_duration_s >= super::synth::MIN_CLIP_S) {
        return Err(DataError::Config(format!(
            "clip duration must be at least {} s",
            super::synth::MIN_CLIP_S
        )));
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(DataError::Config("test_fraction must be in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[fnv1a(b"corpus")]));
    let mut slots: Vec<usize> = (0..cfg.n_speakers).collect();
    slots.shuffle(&mut rng);

    let n_test = ((cfg.n_speakers as f64 * cfg.test_fraction).round() as usize).min(cfg.n_speakers - 1);
    let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); 8];
    for (speaker, &slot) in slots.iter().enumerate() {
        by_cell[slot % 8].push(speaker);
    }
    let mut test = BTreeSet::new();
    let mut round = 0;
    while test.len() < n_test {
        for cell in CELL_ORDER.iter().map(|&c| &by_cell[c]) {
            if test.len() < n_test {
                if let Some(&s) = cell.get(round) {
                    test.insert(s);
                }
            }
        }
        round += 1;
    }

    let mut speakers = Vec::new();
    let mut profiles = Vec::new();
    let mut entries = Vec::new();
    for (i, &slot) in slots.iter().enumerate() {
        let id = format!("synth-{i:03}");
        let cell = SynthCell::from_index(slot);
        let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[fnv1a(id.as_bytes()), 7]));
        let ages = if cell.old { OLD_AGES } else { YOUNG_AGES };
        let age = rand::Rng::gen_range(&mut arng, ages.0..=ages.1);
        let conditions = if cell.condition {
            BTreeSet::from([SYNTH_CONDITION.to_string()])
        } else {
            BTreeSet::new()
        };
        let profile = SynthSpeakerProfile::for_speaker(&id, cell.sex, cell.old, cell.condition, cfg.seed);
        let split = if test.contains(&i) { Split::Test } else { Split::Train };
        let mut rec = SpeakerRecord::new(
            id.clone(),
            SpeakerAttributes {
                sex: Some(cell.sex),
                age_years: Some(age as f64),
                conditions: Some(conditions),
                ..Default::default()
            },
        );
        for c in 0..cfg.clips_per_speaker {
            let clip_id = format!("{id}-{c}");
            entries.push(ManifestEntry {
                clip_id: clip_id.clone(),
                source: AudioSource::Synth {
                    profile: profile.clone(),
                    seed: derive_seed(cfg.seed, &[fnv1a(clip_id.as_bytes())]),
                },
                speaker_id: id.clone(),
                split,
                duration_s: cfg.clip_duration_s,
            });
            rec.clip_ids.push(clip_id);
        }
        speakers.push(rec);
        profiles.push(profile);
    }
    let manifest = Manifest {
        corpus_id: SYNTH_CORPUS_ID.into(),
        large: false,
        entries,
        speakers,
        base_dir: PathBuf::new(),
    };
    manifest.validate()?;
    Ok(SynthCorpus { manifest, profiles })
}

impl SynthCorpus {
    pub fn waveform(&self, entry: &ManifestEntry) -> Result<Waveform, DataError> {
        self.manifest.load_audio(entry)
    }

    /// Writes `wav/<clip_id>.wav` and `manifest.jsonl` (+ sidecar) under `dir`;
    /// returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, DataError> {
        let wav_dir = dir.join("wav");
        fs::create_dir_all(&wav_dir).map_err(|source| DataError::Io {
            path: wav_dir.display().to_string(),
            source,
        })?;
        let mut on_disk = self.manifest.clone();
        for e in on_disk.entries.iter_mut() {
            let w = self.manifest.load_audio(e)?;
            let rel = PathBuf::from("wav").join(format!("{}.wav", e.clip_id));
            write_wav(&dir.join(&rel), &w).map_err(|source| DataError::Clip {
                corpus_id: self.manifest.corpus_id.clone(),
                clip_id: e.clip_id.clone(),
                source,
            })?;
            e.source = AudioSource::File { path: rel };
        }
        on_disk.base_dir = dir.to_path_buf();
        let path = dir.join("manifest.jsonl");
        on_disk.save(&path)?;
        Ok(path)
    }
}
