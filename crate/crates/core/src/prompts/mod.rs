//! Speaker descriptions for pretraining and antonym prompt pairs for
//! zero-shot tasks.

mod record;
mod tasks;
mod templates;

use thiserror::Error;

pub use record::{AttributeKey, Sex, SpeakerAttributes, SpeakerRecord};
pub use tasks::{contains_negation, label, Dimension, Label, LabelRule, PromptSource, TaskRegistry, TaskSpec};
pub use templates::{RenderedDescription, TemplateBank};

/// Descriptions rendered per speaker.
pub const DESCRIPTIONS_PER_SPEAKER: usize = 3;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("speaker {0} has no known attributes to describe")]
    NoAttributes(String),
    #[error("could not render {requested} distinct descriptions for speaker {speaker_id}")]
    NotEnoughVariants { speaker_id: String, requested: usize },
    #[error("unknown task_id {0}")]
    UnknownTask(String),
    #[error("task {task_id}: prompt {prompt:?} uses negation; use an antonym instead")]
    Negation { task_id: String, prompt: String },
    #[error("invalid prompt data: {0}")]
    Data(String),
}

/// `n` distinct descriptions of `record` from the bundled template bank.
pub fn render_descriptions(record: &SpeakerRecord, n: usize, seed: u64) -> Result<Vec<String>, PromptError> {
    TemplateBank::default().render_descriptions(record, n, seed)
}
