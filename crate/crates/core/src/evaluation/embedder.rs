//! Deterministic sentence embedder used to score output texts.

use crate::error::{Error, Result};
use crate::victim::hash_token;

pub const EVAL_DIM: usize = 256;
const EMBEDDER_SEED: u64 = 0x6576_616c_2d65_6d62;

/// Signed feature hashing of character trigrams and word unigrams into
/// `EVAL_DIM` buckets, normalised to unit length. Shares no parameters with
/// any victim encoder.
#[derive(Debug, Clone)]
pub struct EvalEmbedder {
    dim: usize,
    seed: u64,
}

impl Default for EvalEmbedder {
    fn default() -> Self {
        Self {
            dim: EVAL_DIM,
            seed: EMBEDDER_SEED,
        }
    }
}

impl EvalEmbedder {
    pub fn dim(&self) -> usize {
        self.dim
    }

    fn add_feature(&self, acc: &mut [f64], feature: &str) {
        let h = hash_token(self.seed, feature);
        let bucket = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        acc[bucket] += sign;
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let words: Vec<String> = text
            .split_whitespace()
            .map(|w| {
                w.chars()
                    .filter(|c| c.is_alphanumeric() || *c == '\'')
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut acc = vec![0.0; self.dim];
        for w in &words {
            self.add_feature(&mut acc, &format!("w:{w}"));
        }
        let padded: Vec<char> = format!(" {} ", words.join(" ")).chars().collect();
        for tri in padded.windows(3) {
            self.add_feature(&mut acc, &format!("c:{}", tri.iter().collect::<String>()));
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every feature cancelled out; fall back to a fixed direction
            acc[(hash_token(self.seed, text) % self.dim as u64) as usize] = 1.0;
        } else {
            acc.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(acc)
    }

    /// Cosine similarity of the two embeddings.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64> {
        if a == b {
            self.embed(a)?;
            return Ok(1.0);
        }
        Ok(cosine(&self.embed(a)?, &self.embed(b)?))
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Shorthand for [`EvalEmbedder::similarity`] with the default embedder.
pub fn similarity(a: &str, b: &str) -> Result<f64> {
    EvalEmbedder::default().similarity(a, b)
}
