use serde::{Deserialize, Serialize};

use super::record::{Sex, SpeakerRecord};
use super::PromptError;

const DEFAULT_REGISTRY: &str = include_str!("../../data/tasks.json");

/// Task category used for report aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Demographics,
    Voice,
    Health,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Demographics, Dimension::Voice, Dimension::Health];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Demographics => "demographics",
            Dimension::Voice => "voice",
            Dimension::Health => "health",
        }
    }
}

/// How a speaker record maps to a binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    Sex { positive: Sex },
    AgeAtLeast { years: f64 },
    Condition { condition: String },
    VoiceRatingAtLeast { rating: String, threshold: f64 },
    Cognition { positive: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Excluded,
}

/// Whether the prompt wording is quoted from an earlier study or written here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Quoted,
    Constructed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub dimension: Dimension,
    pub positive_prompt: String,
    pub negative_prompt: String,
    pub rule: LabelRule,
    /// Corpus the task is evaluated on; `None` applies to every corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    /// Restricts the population to speakers of these languages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<String>>,
    pub source: PromptSource,
}

/// True if any whitespace-separated token is the word "not" (or a "n't" contraction).
pub fn contains_negation(prompt: &str) -> bool {
    prompt
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'').to_lowercase())
        .any(|w| w == "not" || w.ends_with("n't"))
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), PromptError> {
        for p in [&self.positive_prompt, &self.negative_prompt] {
            if p.trim().is_empty() {
                return Err(PromptError::Data(format!("{}: empty prompt", self.task_id)));
            }
            if contains_negation(p) {
                return Err(PromptError::Negation {
                    task_id: self.task_id.clone(),
                    prompt: p.clone(),
                });
            }
        }
        if self.positive_prompt == self.negative_prompt {
            return Err(PromptError::Data(format!("{}: identical prompts", self.task_id)));
        }
        Ok(())
    }

    pub fn applies_to_corpus(&self, corpus_id: &str) -> bool {
        self.corpus.as_deref().is_none_or(|c| c == corpus_id)
    }

    pub fn label(&self, r: &SpeakerRecord) -> Label {
        label(r, self)
    }
}

/// Binary label of a speaker for a task; `Excluded` when the attribute is
/// unknown or the speaker is outside the task population.
pub fn label(r: &SpeakerRecord, t: &TaskSpec) -> Label {
    let a = &r.attributes;
    if let Some(langs) = &t.languages {
        match &a.language {
            Some(l) if langs.iter().any(|x| x.eq_ignore_ascii_case(l)) => {}
            _ => return Label::Excluded,
        }
    }
    let decide = |b: bool| if b { Label::Positive } else { Label::Negative };
    match &t.rule {
        LabelRule::Sex { positive } => a.sex.map_or(Label::Excluded, |s| decide(s == *positive)),
        LabelRule::AgeAtLeast { years } => a.age_years.map_or(Label::Excluded, |v| decide(v >= *years)),
        LabelRule::Condition { condition } => a
            .conditions
            .as_ref()
            .map_or(Label::Excluded, |set| decide(set.contains(condition))),
        LabelRule::VoiceRatingAtLeast { rating, threshold } => a
            .voice_ratings
            .get(rating)
            .map_or(Label::Excluded, |v| decide(v >= threshold)),
        LabelRule::Cognition { positive } => a
            .cognition
            .as_ref()
            .map_or(Label::Excluded, |c| decide(c == positive)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    pub version: u32,
    pub tasks: Vec<TaskSpec>,
}

impl Default for TaskRegistry {
    fn default() -> Self {
        Self::from_json(DEFAULT_REGISTRY).expect("bundled task registry is valid")
    }
}

impl TaskRegistry {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let reg: Self = serde_json::from_str(text).map_err(|e| PromptError::Data(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &reg.tasks {
            t.validate()?;
            if !seen.insert(t.task_id.as_str()) {
                return Err(PromptError::Data(format!("duplicate task_id {}", t.task_id)));
            }
        }
        Ok(reg)
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskSpec, PromptError> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| PromptError::UnknownTask(task_id.to_string()))
    }

    /// Tasks whose ids are listed, in the listed order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<TaskSpec>, PromptError> {
        ids.iter().map(|id| self.get(id).cloned()).collect()
    }

    pub fn for_corpus(&self, corpus_id: &str) -> Vec<&TaskSpec> {
        self.tasks.iter().filter(|t| t.corpus.as_deref() == Some(corpus_id)).collect()
    }

    /// The `(positive, negative)` prompt pair, verbatim.
    pub fn build_prompt_pair(&self, task_id: &str) -> Result<(String, String), PromptError> {
        let t = self.get(task_id)?;
        Ok((t.positive_prompt.clone(), t.negative_prompt.clone()))
    }
}
