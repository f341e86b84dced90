use super::hashing::{hash_token, tokenize};
use super::Task;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Seed of the caption-embedding space shared by every toy victim.
const CAPTION_SPACE_SEED: u64 = 0x6361_7074_696f_6e73;
const BUCKETS: u64 = 1 << 20;

/// Sum of seeded Gaussian columns, one per hashed token bucket.
pub(crate) fn hashed_bag(seed: u64, space: &str, text: &str, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for token in tokenize(text) {
        let bucket = hash_token(seed, &token) % BUCKETS;
        let mut rng = RngStream::new(seed, format!("{space}/{bucket}"));
        acc.iter_mut().for_each(|a| *a += rng.normal());
    }
    acc
}

pub(crate) fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub caption: String,
    pub task: Task,
    /// Unit-norm embedding in the victim's output space.
    pub embedding: Vec<f64>,
}

/// The discrete output vocabulary of the toy victim.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionBank {
    entries: Vec<BankEntry>,
}

impl CaptionBank {
    pub const MIN_PER_TASK: usize = 8;

    /// Validates and unit-normalizes explicit entries.
    pub fn from_entries(mut entries: Vec<BankEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::InvalidBank("bank is empty".into()));
        };
        let dim = first.embedding.len();
        for task in Task::ALL {
            let n = entries.iter().filter(|e| e.task == task).count();
            if n < Self::MIN_PER_TASK {
                return Err(Error::InvalidBank(format!(
                    "task {task} has {n} entries, need {}",
                    Self::MIN_PER_TASK
                )));
            }
        }
        for e in &mut entries {
            if e.caption.trim().is_empty() {
                return Err(Error::InvalidBank("empty caption".into()));
            }
            if e.embedding.len() != dim {
                return Err(Error::InvalidBank(format!(
                    "embedding of {:?} has dimension {}, expected {dim}",
                    e.caption,
                    e.embedding.len()
                )));
            }
            if e.embedding.iter().any(|v| !v.is_finite()) || normalize(&mut e.embedding) == 0.0 {
                return Err(Error::InvalidBank(format!(
                    "embedding of {:?} is zero or non-finite",
                    e.caption
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Embeds captions in the shared caption space of dimension `dim`.
    pub fn from_captions<S: AsRef<str>>(captions: &[(S, Task)], dim: usize) -> Result<Self> {
        let entries = captions
            .iter()
            .map(|(caption, task)| BankEntry {
                caption: caption.as_ref().to_string(),
                task: *task,
                embedding: hashed_bag(CAPTION_SPACE_SEED, "caption", caption.as_ref(), dim),
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn default_captions() -> Vec<(&'static str, Task)> {
        use Task::*;
        let mut out = Vec::new();
        let groups: [(Task, &[&str]); 4] = [
            (
                Classification,
                &[
                    "a circle",
                    "a square",
                    "a triangle",
                    "a striped pattern",
                    "a color gradient",
                    "a dog",
                    "a cat",
                    "an airplane",
                    "a car",
                ],
            ),
            (
                Captioning,
                &[
                    "a red circle on a blue background",
                    "two shapes on a plain background",
                    "a colorful abstract pattern",
                    "a plane flying in the sky",
                    "a tiger eating meat",
                    "a person riding a bike",
                    "a bowl of fruit on a table",
                    "a street at night",
                ],
            ),
            (
                VqaGeneral,
                &[
                    "yes",
                    "no",
                    "maybe",
                    "I am not sure",
                    "I am sorry",
                    "there are two",
                    "it is outdoors",
                    "it is indoors",
                ],
            ),
            (
                VqaSpecific,
                &[
                    "red",
                    "blue",
                    "green",
                    "yellow",
                    "on the left",
                    "in the center",
                    "three",
                    "one",
                ],
            ),
        ];
        for (task, captions) in groups {
            out.extend(captions.iter().map(|c| (*c, task)));
        }
        out
    }

    pub fn default_bank(dim: usize) -> Self {
        Self::from_captions(&Self::default_captions(), dim).expect("default bank is valid")
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].embedding.len()
    }

    pub fn index_of(&self, caption: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.caption == caption)
    }

    pub fn contains(&self, caption: &str) -> bool {
        self.index_of(caption).is_some()
    }
}
