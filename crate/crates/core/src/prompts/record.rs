use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn key(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

/// Speaker metadata; every field may be missing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerAttributes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_years: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub education: Option<String>,
    /// `Some(empty)` means assessed with no conditions; `None` means unknown.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditions: Option<BTreeSet<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cognition: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub voice_ratings: BTreeMap<String, f64>,
}

/// Which attribute a rendered phrase verbalizes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum AttributeKey {
    Sex,
    Age,
    Language,
    Education,
    Conditions,
    Cognition,
    VoiceRating(String),
}

impl SpeakerAttributes {
    /// Known attributes in canonical order.
    pub fn known(&self) -> Vec<AttributeKey> {
        let mut out = Vec::new();
        if self.sex.is_some() {
            out.push(AttributeKey::Sex);
        }
        if self.age_years.is_some() {
            out.push(AttributeKey::Age);
        }
        if self.language.is_some() {
            out.push(AttributeKey::Language);
        }
        if self.education.is_some() {
            out.push(AttributeKey::Education);
        }
        if self.conditions.is_some() {
            out.push(AttributeKey::Conditions);
        }
        if self.cognition.is_some() {
            out.push(AttributeKey::Cognition);
        }
        out.extend(self.voice_ratings.keys().cloned().map(AttributeKey::VoiceRating));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    #[serde(default)]
    pub attributes: SpeakerAttributes,
    #[serde(default)]
    pub clip_ids: Vec<String>,
}

impl SpeakerRecord {
    pub fn new(speaker_id: impl Into<String>, attributes: SpeakerAttributes) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            attributes,
            clip_ids: Vec::new(),
        }
    }
}
