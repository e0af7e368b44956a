//! Speaker contrastive language-audio pretraining (SLAP) at desk scale.

pub mod dsp;
pub mod eval;
pub mod gradcheck;
pub mod data;
pub mod model;
pub mod prompts;
pub mod tensor;
pub mod train;
