use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::{synth_clip, SynthSpeakerProfile};
use super::DataError;
use crate::dsp::{read_wav, resample, Waveform, MODEL_SAMPLE_RATE};
use crate::prompts::SpeakerRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Where a clip's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AudioSource {
    /// WAV file; relative paths resolve against the manifest's directory.
    File { path: PathBuf },
    Synth { profile: SynthSpeakerProfile, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub source: AudioSource,
    pub speaker_id: String,
    pub split: Split,
    pub duration_s: f64,
}

/// Sidecar file holding corpus-level metadata and speaker records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakersFile {
    pub corpus_id: String,
    /// Large corpora are sampled from a periodically redrawn active subset.
    #[serde(default)]
    pub large: bool,
    pub speakers: Vec<SpeakerRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub corpus_id: String,
    pub large: bool,
    pub entries: Vec<ManifestEntry>,
    pub speakers: Vec<SpeakerRecord>,
    /// Directory that relative audio paths resolve against.
    pub base_dir: PathBuf,
}

/// `corpus/manifest.jsonl` → `corpus/manifest.speakers.json`.
pub fn sidecar_path(manifest_path: &Path) -> PathBuf {
    let stem = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    manifest_path.with_file_name(format!("{stem}.speakers.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl Manifest {
    pub fn validate(&self) -> Result<(), DataError> {
        let known: BTreeSet<&str> = self.speakers.iter().map(|s| s.speaker_id.as_str()).collect();
        if known.len() != self.speakers.len() {
            return Err(self.invalid("duplicate speaker_id in speakers file"));
        }
        let mut clips = BTreeSet::new();
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if !known.contains(e.speaker_id.as_str()) {
                return Err(self.invalid(&format!("clip {} references unknown speaker {}", e.clip_id, e.speaker_id)));
            }
            if !clips.insert(e.clip_id.as_str()) {
                return Err(self.invalid(&format!("duplicate clip_id {}", e.clip_id)));
            }
            if !(e.duration_s > 0.0) {
                return Err(self.invalid(&format!("clip {} has nonpositive duration", e.clip_id)));
            }
            match split_of.insert(e.speaker_id.as_str(), e.split) {
                Some(prev) if prev != e.split => {
                    return Err(self.invalid(&format!("speaker {} appears in both train and test", e.speaker_id)));
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn invalid(&self, msg: &str) -> DataError {
        DataError::Invalid {
            corpus_id: self.corpus_id.clone(),
            message: msg.to_string(),
        }
    }

    pub fn speaker(&self, speaker_id: &str) -> Option<&SpeakerRecord> {
        self.speakers.iter().find(|s| s.speaker_id == speaker_id)
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Speakers with at least one clip in `split`, sorted by id.
    pub fn speakers_in(&self, split: Split) -> BTreeSet<&str> {
        self.split_entries(split).map(|e| e.speaker_id.as_str()).collect()
    }

    /// Mono 16 kHz samples of an entry.
    pub fn load_audio(&self, entry: &ManifestEntry) -> Result<Waveform, DataError> {
        let ctx = |source| DataError::Clip {
            corpus_id: self.corpus_id.clone(),
            clip_id: entry.clip_id.clone(),
            source,
        };
        match &entry.source {
            AudioSource::File { path } => {
                let full = if path.is_absolute() { path.clone() } else { self.base_dir.join(path) };
                let w = read_wav(&full).map_err(ctx)?;
                if w.sample_rate_hz == MODEL_SAMPLE_RATE {
                    Ok(w)
                } else {
                    resample(&w, MODEL_SAMPLE_RATE).map_err(ctx)
                }
            }
            AudioSource::Synth { profile, seed } => Ok(synth_clip(profile, entry.duration_s, *seed)),
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| DataError::Parse {
                path: path.display().to_string(),
                line: Some(i + 1),
                message: e.to_string(),
            })?;
            entries.push(e);
        }
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(io_err(&side))?;
        let sf: SpeakersFile = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: side.display().to_string(),
            line: None,
            message: e.to_string(),
        })?;
        let m = Manifest {
            corpus_id: sf.corpus_id,
            large: sf.large,
            entries,
            speakers: sf.speakers,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        m.validate()?;
        Ok(m)
    }

    /// Writes the JSONL manifest and its speakers sidecar.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|e| DataError::Parse {
                path: path.display().to_string(),
                line: None,
                message: e.to_string(),
            })?;
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(io_err(path))?;
        let side = sidecar_path(path);
        let sf = SpeakersFile {
            corpus_id: self.corpus_id.clone(),
            large: self.large,
            speakers: self.speakers.clone(),
        };
        let text = serde_json::to_string_pretty(&sf).expect("speakers serialize");
        fs::write(&side, text + "\n").map_err(io_err(&side))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{Sex, SpeakerAttributes};

    fn tiny() -> Manifest {
        let profile = SynthSpeakerProfile::for_speaker("a", Sex::Male, false, false, 0);
        let rec = |id: &str| {
            SpeakerRecord::new(
                id,
                SpeakerAttributes {
                    sex: Some(Sex::Male),
                    ..Default::default()
                },
            )
        };
        let entry = |clip: &str, spk: &str, split| ManifestEntry {
            clip_id: clip.into(),
            source: AudioSource::Synth {
                profile: profile.clone(),
                seed: 1,
            },
            speaker_id: spk.into(),
            split,
            duration_s: 0.5,
        };
        Manifest {
            corpus_id: "t".into(),
            large: false,
            entries: vec![entry("c1", "a", Split::Train), entry("c2", "b", Split::Test)],
            speakers: vec![rec("a"), rec("b")],
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(sidecar_path(Path::new("x/manifest.jsonl")), PathBuf::from("x/manifest.speakers.json"));
    }

    #[test]
    fn invariants_enforced() {
        let mut m = tiny();
        m.validate().unwrap();
        m.entries[1].speaker_id = "a".into();
        assert!(matches!(m.validate(), Err(DataError::Invalid { .. })));
        let mut m = tiny();
        m.entries[1].speaker_id = "ghost".into();
        assert!(m.validate().is_err());
        let mut m = tiny();
        m.entries[1].clip_id = "c1".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = tiny();
        m.save(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.speakers, m.speakers);
        assert_eq!(back.base_dir, dir.path());
        let w = back.load_audio(&back.entries[0]).unwrap();
        assert_eq!(w.len(), 8000);
    }

    #[test]
    fn missing_sidecar_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        let err = Manifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("m.speakers.json"), "{err}");
    }
}
