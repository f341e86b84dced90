//! Deterministic toy vision-language model.
//!
//! Image path: 8x8 block means (centred at 0.5) -> random linear map -> tanh.
//! Text path: hashed token bag -> random linear map -> unit normalisation.
//! Fusion: a random linear map of `[hidden; prompt]` plus bias, normalised to
//! the unit sphere. The output text is the caption-bank entry with the highest
//! cosine similarity, and `P(caption)` is the softmax of those similarities at
//! temperature `tau`.
//!
//! Every parameter is a fixed mix of a component shared by all toy victims and
//! a component drawn from the victim's own seed, so victims with different
//! seeds behave differently but are related, like models trained on similar
//! data.

use super::bank::{hashed_bag, normalize};
use super::{CaptionBank, PromptEmbedding, QueryLedger, Task, VictimOracle};
use crate::error::{Error, Result};
use crate::numerics::{ImageTensor, RngStream};

pub const PROMPT_DIM: usize = 64;
pub const OUTPUT_DIM: usize = 64;
const HIDDEN_DIM: usize = 64;
const BLOCK: usize = 8;

const FAMILY_SEED: u64 = 0x746f_795f_766c_6d00;

/// Weight of the family-shared draw in every parameter; the rest is the
/// victim's own draw. Victims with different seeds therefore correlate.
const SHARED_WEIGHT: f64 = 0.8;
const OWN_WEIGHT: f64 = 0.6;
// Calibrated so the zeroth-order attack moves held-out similarity visibly
// within a 20k query budget while clean outputs stay off-target.
const IMAGE_GAIN: f64 = 16.0;
const IMAGE_BIAS_STD: f64 = 0.5;
const FUSE_IMAGE_WEIGHT: f64 = 0.7;
const FUSE_TEXT_WEIGHT: f64 = 1.0;
const OUT_BIAS_WEIGHT: f64 = 0.5;

pub const DEFAULT_INPUT_SHAPE: (usize, usize, usize) = (128, 128, 3);

#[derive(Debug, Clone)]
pub struct ToyVictim {
    seed: u64,
    tau: f64,
    bank: CaptionBank,
    height: usize,
    width: usize,
    channels: usize,
    /// `HIDDEN_DIM x n_features`
    image_proj: Vec<f64>,
    image_bias: Vec<f64>,
    /// `OUTPUT_DIM x HIDDEN_DIM`
    fuse_image: Vec<f64>,
    /// `OUTPUT_DIM x PROMPT_DIM`
    fuse_text: Vec<f64>,
    out_bias: Vec<f64>,
}

/// Loss and analytic gradients from the white-box hook.
#[derive(Debug, Clone)]
pub struct WhiteBoxGrad {
    pub loss: f64,
    pub grad_image: ImageTensor,
    pub grad_prompt: Vec<f64>,
}

struct Pass {
    hidden: Vec<f64>,
    raw_norm: f64,
    out: Vec<f64>,
    sims: Vec<f64>,
}

fn mixed_gaussian(seed: u64, name: &str, len: usize, scale: f64) -> Vec<f64> {
    let mut shared = RngStream::new(FAMILY_SEED, format!("victim/{name}"));
    let mut own = RngStream::new(seed, format!("victim/{name}"));
    (0..len)
        .map(|_| scale * (SHARED_WEIGHT * shared.normal() + OWN_WEIGHT * own.normal()))
        .collect()
}

fn matvec(m: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &[f64], cols: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                *o += a * yr;
            }
        }
    }
    out
}

impl ToyVictim {
    pub fn new(seed: u64, tau: f64, bank: CaptionBank) -> Result<Self> {
        Self::with_input_shape(seed, tau, bank, DEFAULT_INPUT_SHAPE)
    }

    pub fn with_input_shape(
        seed: u64,
        tau: f64,
        bank: CaptionBank,
        (height, width, channels): (usize, usize, usize),
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {tau}")));
        }
        if bank.is_empty() {
            return Err(Error::InvalidBank("bank is empty".into()));
        }
        if bank.dim() != OUTPUT_DIM {
            return Err(Error::InvalidBank(format!(
                "bank dimension {} does not match output dimension {OUTPUT_DIM}",
                bank.dim()
            )));
        }
        let probe = ImageTensor::zeros(height, width, channels);
        probe.require_power_of_two(BLOCK)?;
        let n_features = (height / BLOCK) * (width / BLOCK) * channels;
        Ok(Self {
            seed,
            tau,
            bank,
            height,
            width,
            channels,
            image_proj: mixed_gaussian(
                seed,
                "image-proj",
                HIDDEN_DIM * n_features,
                IMAGE_GAIN / (n_features as f64).sqrt(),
            ),
            image_bias: mixed_gaussian(seed, "image-bias", HIDDEN_DIM, IMAGE_BIAS_STD),
            fuse_image: mixed_gaussian(
                seed,
                "fuse-image",
                OUTPUT_DIM * HIDDEN_DIM,
                FUSE_IMAGE_WEIGHT / (HIDDEN_DIM as f64).sqrt(),
            ),
            fuse_text: mixed_gaussian(
                seed,
                "fuse-text",
                OUTPUT_DIM * PROMPT_DIM,
                FUSE_TEXT_WEIGHT / (OUTPUT_DIM as f64).sqrt(),
            ),
            out_bias: mixed_gaussian(
                seed,
                "out-bias",
                OUTPUT_DIM,
                OUT_BIAS_WEIGHT / (OUTPUT_DIM as f64).sqrt(),
            ),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn bank(&self) -> &CaptionBank {
        &self.bank
    }

    fn check_inputs(&self, image: &ImageTensor, prompt: &PromptEmbedding) -> Result<()> {
        if image.shape() != (self.height, self.width, self.channels) {
            return Err(Error::ShapeMismatch(format!(
                "victim expects {}x{}x{} images, got {:?}",
                self.height,
                self.width,
                self.channels,
                image.shape()
            )));
        }
        if prompt.dim() != PROMPT_DIM {
            return Err(Error::ShapeMismatch(format!(
                "prompt embedding has dimension {}, expected {PROMPT_DIM}",
                prompt.dim()
            )));
        }
        if let Some(i) = prompt.vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    fn target_index(&self, target: &str) -> Result<usize> {
        self.bank
            .index_of(target)
            .ok_or_else(|| Error::TargetNotInBank(target.to_string()))
    }

    fn block_features(&self, image: &ImageTensor) -> Vec<f64> {
        let (gh, gw, c) = (self.height / BLOCK, self.width / BLOCK, self.channels);
        let mut feats = vec![0.0f64; gh * gw * c];
        let data = image.data();
        for r in 0..self.height {
            let row = &data[r * self.width * c..(r + 1) * self.width * c];
            let frow = &mut feats[(r / BLOCK) * gw * c..(r / BLOCK + 1) * gw * c];
            for (col, px) in row.chunks_exact(c).enumerate() {
                let f = &mut frow[(col / BLOCK) * c..(col / BLOCK + 1) * c];
                for (acc, &v) in f.iter_mut().zip(px) {
                    *acc += v as f64;
                }
            }
        }
        let inv = 1.0 / (BLOCK * BLOCK) as f64;
        feats.iter_mut().for_each(|f| *f = *f * inv - 0.5);
        feats
    }

    fn pass(&self, image: &ImageTensor, prompt: &[f64]) -> Pass {
        let feats = self.block_features(image);
        let hidden: Vec<f64> = matvec(&self.image_proj, HIDDEN_DIM, &feats)
            .into_iter()
            .zip(&self.image_bias)
            .map(|(z, b)| (z + b).tanh())
            .collect();
        let from_image = matvec(&self.fuse_image, OUTPUT_DIM, &hidden);
        let from_text = matvec(&self.fuse_text, OUTPUT_DIM, prompt);
        let mut out: Vec<f64> = (0..OUTPUT_DIM)
            .map(|i| from_image[i] + from_text[i] + self.out_bias[i])
            .collect();
        let raw_norm = normalize(&mut out);
        let sims = self
            .bank
            .entries()
            .iter()
            .map(|e| e.embedding.iter().zip(&out).map(|(a, b)| a * b).sum())
            .collect();
        Pass {
            hidden,
            raw_norm,
            out,
            sims,
        }
    }

    fn log_softmax_at(&self, sims: &[f64], index: usize) -> (f64, Vec<f64>) {
        let logits: Vec<f64> = sims.iter().map(|s| s / self.tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let loss = (max + total.ln() - logits[index]).max(0.0);
        let probs = exps.into_iter().map(|e| e / total).collect();
        (loss, probs)
    }

    fn argmax(sims: &[f64]) -> usize {
        let mut best = 0;
        for (i, &s) in sims.iter().enumerate() {
            if s > sims[best] {
                best = i;
            }
        }
        best
    }

    /// Unit-norm fused output embedding (white-box; no ledger charge).
    pub fn output_embedding(&self, image: &ImageTensor, prompt: &PromptEmbedding) -> Result<Vec<f64>> {
        self.check_inputs(image, prompt)?;
        Ok(self.pass(image, &prompt.vector).out)
    }

    /// Softmax over the caption bank (white-box; no ledger charge).
    pub fn caption_probabilities(
        &self,
        image: &ImageTensor,
        prompt: &PromptEmbedding,
    ) -> Result<Vec<f64>> {
        self.check_inputs(image, prompt)?;
        let pass = self.pass(image, &prompt.vector);
        Ok(self.log_softmax_at(&pass.sims, 0).1)
    }

    /// Loss and its analytic gradients with respect to the image pixels and
    /// the prompt embedding. Test hook: never charges a ledger and is not part
    /// of [`VictimOracle`].
    pub fn forward_with_grad(
        &self,
        image: &ImageTensor,
        prompt: &PromptEmbedding,
        target: &str,
    ) -> Result<WhiteBoxGrad> {
        self.check_inputs(image, prompt)?;
        let t = self.target_index(target)?;
        let pass = self.pass(image, &prompt.vector);
        let (loss, probs) = self.log_softmax_at(&pass.sims, t);

        let mut g_out = vec![0.0; OUTPUT_DIM];
        for (j, (entry, p)) in self.bank.entries().iter().zip(&probs).enumerate() {
            let coeff = (p - if j == t { 1.0 } else { 0.0 }) / self.tau;
            for (g, b) in g_out.iter_mut().zip(&entry.embedding) {
                *g += coeff * b;
            }
        }
        let radial: f64 = g_out.iter().zip(&pass.out).map(|(g, o)| g * o).sum();
        let g_raw: Vec<f64> = g_out
            .iter()
            .zip(&pass.out)
            .map(|(g, o)| (g - radial * o) / pass.raw_norm)
            .collect();

        let grad_prompt = matvec_t(&self.fuse_text, PROMPT_DIM, &g_raw);
        let g_hidden = matvec_t(&self.fuse_image, HIDDEN_DIM, &g_raw);
        let g_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&pass.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let n_features = self.image_proj.len() / HIDDEN_DIM;
        let g_feats = matvec_t(&self.image_proj, n_features, &g_pre);

        let (gw, c) = (self.width / BLOCK, self.channels);
        let inv = 1.0 / (BLOCK * BLOCK) as f64;
        let mut grad = vec![0.0f64; self.height * self.width * c];
        for r in 0..self.height {
            for col in 0..self.width {
                for ch in 0..c {
                    grad[(r * self.width + col) * c + ch] =
                        g_feats[((r / BLOCK) * gw + col / BLOCK) * c + ch] * inv;
                }
            }
        }
        Ok(WhiteBoxGrad {
            loss,
            grad_image: ImageTensor::from_f64(self.height, self.width, c, &grad)?,
            grad_prompt,
        })
    }

    /// Plain-text manifest: seed, temperature, input shape and bank captions.
    /// Parameters are regenerated from the seed on load.
    pub fn to_manifest(&self) -> String {
        let mut s = format!(
            "# toy victim manifest\nseed={}\ntau={}\nheight={}\nwidth={}\nchannels={}\n",
            self.seed, self.tau, self.height, self.width, self.channels
        );
        for e in self.bank.entries() {
            s.push_str(&format!("caption={}|{}\n", e.task, e.caption));
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "victim manifest",
            detail,
        };
        let (mut seed, mut tau) = (None, None);
        let (mut h, mut w, mut c) = DEFAULT_INPUT_SHAPE;
        let mut captions: Vec<(String, Task)> = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(format!("seed: {e}")))?),
                "tau" => tau = Some(value.parse::<f64>().map_err(|e| bad(format!("tau: {e}")))?),
                "height" => h = num(value)?,
                "width" => w = num(value)?,
                "channels" => c = num(value)?,
                "caption" => {
                    let (task, caption) = value
                        .split_once('|')
                        .ok_or_else(|| bad(format!("caption without task: {value:?}")))?;
                    captions.push((caption.to_string(), task.parse()?));
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let seed = seed.ok_or_else(|| bad("missing seed".into()))?;
        let tau = tau.ok_or_else(|| bad("missing tau".into()))?;
        let bank = CaptionBank::from_captions(&captions, OUTPUT_DIM)?;
        Self::with_input_shape(seed, tau, bank, (h, w, c))
    }
}

impl VictimOracle for ToyVictim {
    fn label(&self) -> String {
        format!("seed-{}", self.seed)
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    fn prompt_dim(&self) -> usize {
        PROMPT_DIM
    }

    fn encode_prompt(&self, prompt: &str) -> Result<PromptEmbedding> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let shared = hashed_bag(FAMILY_SEED, "prompt", prompt, PROMPT_DIM);
        let own = hashed_bag(self.seed, "prompt", prompt, PROMPT_DIM);
        let mut v: Vec<f64> = shared
            .iter()
            .zip(&own)
            .map(|(s, o)| SHARED_WEIGHT * s + OWN_WEIGHT * o)
            .collect();
        if normalize(&mut v) == 0.0 {
            return Err(Error::EmptyPrompt);
        }
        // single-precision grid, so adding an f32 prompt delta is exact in f64
        v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        Ok(PromptEmbedding {
            vector: v,
            source_text: prompt.to_string(),
        })
    }

    fn query_loss(
        &self,
        image: &ImageTensor,
        prompt: &PromptEmbedding,
        target: &str,
        ledger: &QueryLedger,
    ) -> Result<f64> {
        self.check_inputs(image, prompt)?;
        let t = self.target_index(target)?;
        ledger.try_charge(1)?;
        let pass = self.pass(image, &prompt.vector);
        Ok(self.log_softmax_at(&pass.sims, t).0)
    }

    fn query_text(
        &self,
        image: &ImageTensor,
        prompt: &PromptEmbedding,
        ledger: &QueryLedger,
    ) -> Result<String> {
        self.check_inputs(image, prompt)?;
        ledger.try_charge(1)?;
        let pass = self.pass(image, &prompt.vector);
        Ok(self.bank.entries()[Self::argmax(&pass.sims)].caption.clone())
    }
}
