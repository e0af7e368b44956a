use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{AttributeKey, SpeakerRecord};
use super::PromptError;
use crate::model::fnv1a;

const DEFAULT_BANK: &str = include_str!("../../data/templates.json");

/// Variants tried per description before giving up on finding a new one.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotForm {
    pub slot: Slot,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeStage {
    pub max_age: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeForms {
    pub decades: Vec<String>,
    pub stages: Vec<AgeStage>,
    pub forms: Vec<SlotForm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageForms {
    pub forms: Vec<SlotForm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingForms {
    pub levels: Vec<String>,
    pub forms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeletons {
    pub with_predicates: Vec<String>,
    pub without_predicates: Vec<String>,
}

/// Synonym sets and sentence skeletons for speaker descriptions.
///
/// Maps keyed by attribute value may carry `_default` (with a `{value}`
/// placeholder) for values without dedicated phrasing; `conditions._none`
/// verbalizes an assessed speaker with no conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub version: u32,
    pub subject_nouns: BTreeMap<String, Vec<String>>,
    pub possessive: BTreeMap<String, String>,
    pub age: AgeForms,
    pub language: LanguageForms,
    pub education: BTreeMap<String, Vec<String>>,
    pub conditions: BTreeMap<String, Vec<String>>,
    pub cognition: BTreeMap<String, Vec<String>>,
    pub voice_ratings: RatingForms,
    pub skeletons: Skeletons,
}

/// One rendered description with the phrase used for each attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedDescription {
    pub text: String,
    pub parts: Vec<(AttributeKey, String)>,
}

fn pick<'a, T>(items: &'a [T], rng: &mut ChaCha8Rng) -> &'a T {
    items.choose(rng).expect("validated non-empty")
}

fn humanize(value: &str) -> String {
    value.replace('_', " ")
}

fn join_predicates(preds: &[String]) -> String {
    match preds {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn with_article(phrase: &str) -> String {
    let vowel = phrase
        .chars()
        .next()
        .is_some_and(|c| "aeiouAEIOU".contains(c));
    format!("{} {phrase}", if vowel { "an" } else { "a" })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

impl Default for TemplateBank {
    fn default() -> Self {
        Self::from_json(DEFAULT_BANK).expect("bundled template bank is valid")
    }
}

impl TemplateBank {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let bank: Self = serde_json::from_str(text).map_err(|e| PromptError::Data(e.to_string()))?;
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let check = |what: &str, n: usize| {
            if n < 2 {
                Err(PromptError::Data(format!(
                    "{what} needs at least 2 surface forms, has {n}"
                )))
            } else {
                Ok(())
            }
        };
        for key in ["male", "female", "unknown"] {
            let nouns = self
                .subject_nouns
                .get(key)
                .ok_or_else(|| PromptError::Data(format!("subject_nouns.{key} missing")))?;
            check(&format!("subject_nouns.{key}"), nouns.len())?;
            if !self.possessive.contains_key(key) {
                return Err(PromptError::Data(format!("possessive.{key} missing")));
            }
        }
        check("age.forms", self.age.forms.len())?;
        if self.age.decades.is_empty() || self.age.stages.is_empty() {
            return Err(PromptError::Data("age decades/stages must be non-empty".into()));
        }
        check("language.forms", self.language.forms.len())?;
        for (name, map) in [
            ("education", &self.education),
            ("conditions", &self.conditions),
            ("cognition", &self.cognition),
        ] {
            if !map.contains_key("_default") {
                return Err(PromptError::Data(format!("{name}._default missing")));
            }
            for (k, v) in map {
                check(&format!("{name}.{k}"), v.len())?;
            }
        }
        if !self.conditions.contains_key("_none") {
            return Err(PromptError::Data("conditions._none missing".into()));
        }
        check("voice_ratings.forms", self.voice_ratings.forms.len())?;
        if self.voice_ratings.levels.is_empty() {
            return Err(PromptError::Data("voice_ratings.levels empty".into()));
        }
        check("skeletons.with_predicates", self.skeletons.with_predicates.len())?;
        check("skeletons.without_predicates", self.skeletons.without_predicates.len())?;
        Ok(())
    }

    fn valued(map: &BTreeMap<String, Vec<String>>, value: &str, rng: &mut ChaCha8Rng) -> String {
        match map.get(value) {
            Some(forms) => pick(forms, rng).clone(),
            None => pick(&map["_default"], rng).replace("{value}", &humanize(value)),
        }
    }

    /// Renders one description. Pure in `(record, variant, seed, attempt)`.
    pub fn render(&self, record: &SpeakerRecord, variant: u64, seed: u64, attempt: u64) -> Result<RenderedDescription, PromptError> {
        let attrs = &record.attributes;
        if attrs.known().is_empty() {
            return Err(PromptError::NoAttributes(record.speaker_id.clone()));
        }
        let mix = seed
            ^ fnv1a(record.speaker_id.as_bytes())
            ^ variant.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ attempt.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        let mut rng = ChaCha8Rng::seed_from_u64(mix);

        let sex_key = attrs.sex.map(|s| s.key()).unwrap_or("unknown");
        let poss = &self.possessive[sex_key];
        let noun = pick(&self.subject_nouns[sex_key], &mut rng).clone();
        let mut parts = Vec::new();
        if attrs.sex.is_some() {
            parts.push((AttributeKey::Sex, noun.clone()));
        }
        let (mut pre, mut post, mut preds) = (Vec::new(), Vec::new(), Vec::new());

        let mut language_slot = None;
        if let Some(lang) = &attrs.language {
            let form = pick(&self.language.forms, &mut rng);
            let phrase = form.text.replace("{language}", lang);
            parts.push((AttributeKey::Language, phrase.clone()));
            language_slot = Some((form.slot, phrase));
        }
        if let Some(age) = attrs.age_years {
            let idx = ((age.max(0.0) / 10.0).floor() as usize).min(self.age.decades.len() - 1);
            let stage = self
                .age
                .stages
                .iter()
                .find(|s| age <= s.max_age)
                .or(self.age.stages.last())
                .map(|s| s.label.as_str())
                .unwrap_or_default();
            let form = pick(&self.age.forms, &mut rng);
            let phrase = form
                .text
                .replace("{poss}", poss)
                .replace("{decade}", &self.age.decades[idx])
                .replace("{stage}", stage)
                .replace("{decade_start}", &(idx * 10).to_string())
                .replace("{decade_end}", &(idx * 10 + 9).to_string());
            parts.push((AttributeKey::Age, phrase.clone()));
            match form.slot {
                Slot::Pre => pre.push(phrase),
                Slot::Post => post.push(phrase),
            }
        }
        match language_slot {
            Some((Slot::Pre, p)) => pre.insert(0, p),
            Some((Slot::Post, p)) => post.push(p),
            None => {}
        }
        if let Some(edu) = &attrs.education {
            let phrase = Self::valued(&self.education, edu, &mut rng);
            parts.push((AttributeKey::Education, phrase.clone()));
            preds.push(phrase);
        }
        if let Some(conds) = &attrs.conditions {
            if conds.is_empty() {
                let phrase = pick(&self.conditions["_none"], &mut rng).clone();
                parts.push((AttributeKey::Conditions, phrase.clone()));
                preds.push(phrase);
            }
            for c in conds {
                let phrase = Self::valued(&self.conditions, c, &mut rng);
                parts.push((AttributeKey::Conditions, phrase.clone()));
                preds.push(phrase);
            }
        }
        if let Some(cog) = &attrs.cognition {
            let phrase = Self::valued(&self.cognition, cog, &mut rng);
            parts.push((AttributeKey::Cognition, phrase.clone()));
            preds.push(phrase);
        }
        for (name, value) in &attrs.voice_ratings {
            let levels = &self.voice_ratings.levels;
            let level = (value.round().max(0.0) as usize).min(levels.len() - 1);
            let phrase = pick(&self.voice_ratings.forms, &mut rng)
                .replace("{level}", &levels[level])
                .replace("{rating}", &humanize(name));
            parts.push((AttributeKey::VoiceRating(name.clone()), phrase.clone()));
            preds.push(phrase);
        }

        let subject_bare = pre
            .iter()
            .chain(std::iter::once(&noun))
            .chain(post.iter())
            .cloned()
            .collect::<Vec<_>>()
            .join(" ");
        let skeletons = if preds.is_empty() {
            &self.skeletons.without_predicates
        } else {
            &self.skeletons.with_predicates
        };
        let text = pick(skeletons, &mut rng)
            .replace("{subject_bare}", &subject_bare)
            .replace("{subject}", &with_article(&subject_bare))
            .replace("{predicates}", &join_predicates(&preds));
        Ok(RenderedDescription {
            text: capitalize(&text),
            parts,
        })
    }

    /// `n` distinct descriptions of one speaker.
    pub fn render_descriptions(&self, record: &SpeakerRecord, n: usize, seed: u64) -> Result<Vec<String>, PromptError> {
        let mut out: Vec<String> = Vec::with_capacity(n);
        for v in 0..n as u64 {
            let mut found = None;
            for attempt in 0..MAX_ATTEMPTS {
                let d = self.render(record, v, seed, attempt)?;
                if !out.contains(&d.text) {
                    found = Some(d.text);
                    break;
                }
            }
            match found {
                Some(t) => out.push(t),
                None => {
                    return Err(PromptError::NotEnoughVariants {
                        speaker_id: record.speaker_id.clone(),
                        requested: n,
                    })
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::record::{Sex, SpeakerAttributes};
    use std::collections::BTreeSet;

    fn ewa_record() -> SpeakerRecord {
        SpeakerRecord::new(
            "ewa-001",
            SpeakerAttributes {
                sex: Some(Sex::Male),
                age_years: Some(63.0),
                language: Some("Slovak".into()),
                education: Some("university".into()),
                conditions: Some(BTreeSet::from(["parkinsons".to_string()])),
                cognition: Some("normal".into()),
                ..Default::default()
            },
        )
    }

    #[test]
    fn bundled_bank_validates() {
        TemplateBank::default();
    }

    #[test]
    fn every_attribute_mentioned_once() {
        let bank = TemplateBank::default();
        let rec = ewa_record();
        for v in 0..20 {
            let d = bank.render(&rec, v, 42, 0).unwrap();
            assert_eq!(d.parts.len(), 6, "{}", d.text);
            for (_, phrase) in &d.parts {
                assert_eq!(d.text.matches(phrase.as_str()).count(), 1, "{phrase:?} in {}", d.text);
            }
            assert!(d.text.ends_with('.'));
            assert!(d.text.chars().next().unwrap().is_uppercase());
        }
    }

    #[test]
    fn ewa_style_exemplar() {
        let bank = TemplateBank::default();
        let texts = bank.render_descriptions(&ewa_record(), 3, 7).unwrap();
        assert_eq!(texts.len(), 3);
        for t in &texts {
            assert!(t.contains("Slovak"));
            assert!(t.contains("Parkinson's disease"));
            assert!(["man", "male", "gentleman"].iter().any(|w| t.contains(w)));
            assert!(["sixties", "mature adult", "between 60 and 69"].iter().any(|w| t.contains(w)));
        }
        let uniq: BTreeSet<&String> = texts.iter().collect();
        assert_eq!(uniq.len(), 3);
    }

    #[test]
    fn deterministic_given_seed() {
        let bank = TemplateBank::default();
        let a = bank.render_descriptions(&ewa_record(), 1, 99).unwrap();
        assert_eq!(a, bank.render_descriptions(&ewa_record(), 1, 99).unwrap());
    }

    #[test]
    fn single_attribute_female() {
        let bank = TemplateBank::default();
        let rec = SpeakerRecord::new(
            "f",
            SpeakerAttributes {
                sex: Some(Sex::Female),
                ..Default::default()
            },
        );
        let texts = bank.render_descriptions(&rec, 3, 1).unwrap();
        for t in texts {
            assert!(["woman", "female speaker", "lady"].iter().any(|w| t.contains(w)), "{t}");
            assert!(!t.contains("gentleman") && !t.contains(" who "), "{t}");
        }
    }

    #[test]
    fn empty_record_is_an_error() {
        let bank = TemplateBank::default();
        let rec = SpeakerRecord::new("x", SpeakerAttributes::default());
        assert!(matches!(
            bank.render_descriptions(&rec, 3, 0),
            Err(PromptError::NoAttributes(_))
        ));
    }

    #[test]
    fn unknown_values_use_default_phrasing() {
        let bank = TemplateBank::default();
        let rec = SpeakerRecord::new(
            "x",
            SpeakerAttributes {
                conditions: Some(BTreeSet::from(["vocal_nodules".to_string()])),
                voice_ratings: BTreeMap::from([("roughness".to_string(), 2.0)]),
                ..Default::default()
            },
        );
        let d = bank.render(&rec, 0, 0, 0).unwrap();
        assert!(d.text.contains("vocal nodules"), "{}", d.text);
        assert!(d.text.contains("moderate roughness"), "{}", d.text);
    }

    #[test]
    fn article_choice() {
        assert_eq!(with_article("elderly man"), "an elderly man");
        assert_eq!(with_article("man"), "a man");
        assert_eq!(join_predicates(&["a".into(), "b".into(), "c".into()]), "a, b and c");
    }
}
