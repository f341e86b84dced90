//! Query-only victim abstraction and the built-in toy vision-language model.

mod bank;
mod hashing;
mod ledger;
mod toy;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::ImageTensor;

pub use bank::{BankEntry, CaptionBank};
pub use hashing::{hash_token, tokenize};
pub use ledger::QueryLedger;
pub use toy::{ToyVictim, WhiteBoxGrad, OUTPUT_DIM, PROMPT_DIM};

/// Task family a prompt (or caption) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Classification,
    Captioning,
    VqaGeneral,
    VqaSpecific,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Classification,
        Task::Captioning,
        Task::VqaGeneral,
        Task::VqaSpecific,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Captioning => "captioning",
            Task::VqaGeneral => "vqa_general",
            Task::VqaSpecific => "vqa_specific",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown task {s:?}")))
    }
}

/// Prompt embedding as produced by a victim's text encoder, possibly shifted
/// by a prompt perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

impl PromptEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// The attacker's view of a vision-language model: prompts can be encoded,
/// and (image, prompt embedding) pairs can be scored or decoded, one ledger
/// charge per query.
pub trait VictimOracle: Send + Sync {
    /// Short name used in reports (for the toy model, `seed-<n>`).
    fn label(&self) -> String;

    /// `(height, width, channels)` of accepted images.
    fn input_shape(&self) -> (usize, usize, usize);

    fn prompt_dim(&self) -> usize;

    fn encode_prompt(&self, prompt: &str) -> Result<PromptEmbedding>;

    /// `-log P(target | image, prompt)`.
    fn query_loss(
        &self,
        image: &ImageTensor,
        prompt: &PromptEmbedding,
        target: &str,
        ledger: &QueryLedger,
    ) -> Result<f64>;

    /// The model's output text.
    fn query_text(
        &self,
        image: &ImageTensor,
        prompt: &PromptEmbedding,
        ledger: &QueryLedger,
    ) -> Result<String>;
}
