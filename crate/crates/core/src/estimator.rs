//! Zeroth-order gradient estimates built purely from loss queries.
//!
//! A single-probe estimate is `(L(x + eta) - L(x)) / |eta| * eta / |eta|`;
//! `K` of them are averaged against one shared baseline query, so every
//! estimate costs `K + 1` queries.

use crate::error::{Error, Result};
use crate::evaluation::EvalEmbedder;
use crate::exec::Executor;
use crate::numerics::{ImageTensor, RngStream};
use crate::perturbation::{compose, render_patch, PromptDelta, TextureUAP};
use crate::victim::{PromptEmbedding, QueryLedger, VictimOracle};

pub const DEFAULT_SAMPLES: usize = 10;
pub const DEFAULT_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// Flattened in the layout of the perturbed object.
    pub direction: Vec<f64>,
    pub samples: usize,
    pub queries_spent: u64,
    /// Loss at the unprobed point.
    pub baseline: f64,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.direction.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProbeDistribution {
    /// Elementwise `U(-a, a)`.
    Uniform(f64),
    /// Elementwise `N(0, s^2)`.
    Gaussian(f64),
}

impl ProbeDistribution {
    pub fn draw(self, rng: &mut RngStream, dim: usize) -> Vec<f32> {
        match self {
            Self::Uniform(a) => (0..dim).map(|_| rng.uniform(-a, a) as f32).collect(),
            Self::Gaussian(s) => (0..dim).map(|_| (s * rng.normal()) as f32).collect(),
        }
    }
}

/// Averages the single-probe estimator over `probes`.
///
/// `loss(None)` is the baseline query and is issued first; `loss(Some(eta))`
/// evaluates the probed point. Any error aborts the whole estimate.
pub fn estimate_gradient<F>(probes: &[Vec<f32>], mut loss: F) -> Result<GradientEstimate>
where
    F: FnMut(Option<&[f32]>) -> Result<f64>,
{
    let first = probes
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one probe is required".into()))?;
    let dim = first.len();
    let baseline = loss(None)?;
    let mut direction = vec![0.0f64; dim];
    for eta in probes {
        if eta.len() != dim {
            return Err(Error::ShapeMismatch("probes differ in dimension".into()));
        }
        let value = loss(Some(eta))?;
        let norm_sq: f64 = eta.iter().map(|&x| x as f64 * x as f64).sum();
        if norm_sq == 0.0 {
            continue;
        }
        let coeff = (value - baseline) / norm_sq;
        for (d, &e) in direction.iter_mut().zip(eta) {
            *d += coeff * e as f64;
        }
    }
    let k = probes.len() as f64;
    direction.iter_mut().for_each(|d| *d /= k);
    Ok(GradientEstimate {
        direction,
        samples: probes.len(),
        queries_spent: probes.len() as u64 + 1,
        baseline,
    })
}

/// How the loss values fed to the estimator are obtained from the victim.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    /// `-log P(target | input)` straight from the victim.
    Loss,
    /// Only the output text is observed; the loss is
    /// `1 - cos(E(output), E(target)) + sigma * N(0, 1)`.
    Text { sigma: f64 },
}

/// The attacked objective: victim, budget and target bundled together.
pub struct Objective<'a> {
    oracle: &'a dyn VictimOracle,
    ledger: &'a QueryLedger,
    target: String,
    mode: OracleMode,
    embedder: EvalEmbedder,
    target_embedding: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(
        oracle: &'a dyn VictimOracle,
        ledger: &'a QueryLedger,
        target: &str,
        mode: OracleMode,
    ) -> Result<Self> {
        let embedder = EvalEmbedder::default();
        let target_embedding = embedder.embed(target)?;
        Ok(Self {
            oracle,
            ledger,
            target: target.to_string(),
            mode,
            embedder,
            target_embedding,
        })
    }

    pub fn oracle(&self) -> &dyn VictimOracle {
        self.oracle
    }

    pub fn ledger(&self) -> &QueryLedger {
        self.ledger
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    /// One oracle query. `noise` feeds the smoothing term in text mode.
    pub fn loss(&self, image: &ImageTensor, prompt: &PromptEmbedding, noise: &mut RngStream) -> Result<f64> {
        match self.mode {
            OracleMode::Loss => self.oracle.query_loss(image, prompt, &self.target, self.ledger),
            OracleMode::Text { sigma } => {
                let out = self.oracle.query_text(image, prompt, self.ledger)?;
                let e = self.embedder.embed(&out)?;
                let cos = crate::evaluation::cosine(&e, &self.target_embedding);
                Ok(1.0 - cos + sigma * noise.normal())
            }
        }
    }
}

fn add_probe(base: &[f32], eta: &[f32]) -> Vec<f32> {
    base.iter().zip(eta).map(|(a, b)| a + b).collect()
}

/// Gradient of the loss with respect to the base patch, probing in patch
/// space and rendering each probed patch onto `image`.
pub fn estimate_grad_image(
    objective: &Objective,
    image: &ImageTensor,
    uap: &TextureUAP,
    prompt: &PromptEmbedding,
    k: usize,
    eps_v: f64,
    rng: &RngStream,
) -> Result<GradientEstimate> {
    check_samples(objective, k)?;
    let patch = &uap.base_patch;
    let (ph, pw, c) = patch.shape();
    let (h, w, _) = image.shape();
    let probes: Vec<Vec<f32>> = (0..k)
        .map(|i| ProbeDistribution::Uniform(eps_v).draw(&mut rng.derive(format!("probe{i}")), patch.len()))
        .collect();
    let mut noise = rng.derive("noise");
    estimate_gradient(&probes, |eta| {
        let rendered = match eta {
            None => render_patch(patch, uap.tile_scale, h, w)?,
            Some(eta) => render_patch(
                &ImageTensor::new(ph, pw, c, add_probe(patch.data(), eta))?,
                uap.tile_scale,
                h,
                w,
            )?,
        };
        objective.loss(&compose(image, &rendered)?, prompt, &mut noise)
    })
}

/// Gradient of the loss with respect to the prompt delta, with Gaussian
/// probes in the embedding space.
pub fn estimate_grad_text(
    objective: &Objective,
    adv_image: &ImageTensor,
    prompt: &PromptEmbedding,
    delta: &PromptDelta,
    k: usize,
    eps_t: f64,
    rng: &RngStream,
) -> Result<GradientEstimate> {
    check_samples(objective, k)?;
    if prompt.dim() != delta.vector.len() {
        return Err(Error::ShapeMismatch(format!(
            "prompt embedding has dimension {}, delta has {}",
            prompt.dim(),
            delta.vector.len()
        )));
    }
    let probes: Vec<Vec<f32>> = (0..k)
        .map(|i| ProbeDistribution::Gaussian(eps_t).draw(&mut rng.derive(format!("probe{i}")), delta.vector.len()))
        .collect();
    let mut noise = rng.derive("noise");
    estimate_gradient(&probes, |eta| {
        let shifted = PromptEmbedding {
            vector: prompt
                .vector
                .iter()
                .zip(&delta.vector)
                .enumerate()
                .map(|(i, (e, &d))| e + d as f64 + eta.map_or(0.0, |eta| eta[i] as f64))
                .collect(),
            source_text: prompt.source_text.clone(),
        };
        objective.loss(adv_image, &shifted, &mut noise)
    })
}

fn check_samples(objective: &Objective, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    let needed = k as u64 + 1;
    let ledger = objective.ledger();
    if ledger.remaining() < needed {
        return Err(Error::BudgetExhausted {
            used: ledger.used(),
            budget: ledger.budget(),
            requested: needed,
        });
    }
    Ok(())
}

/// One `(image, prompt)` pair of a mini-batch. The ids identify the pair in
/// the corpus; they key the probe streams and fix the reduction order.
#[derive(Debug, Clone, Copy)]
pub struct BatchPair<'c> {
    pub image_id: usize,
    pub prompt_id: usize,
    pub image: &'c ImageTensor,
    pub prompt: &'c PromptEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate {
    pub image: GradientEstimate,
    pub text: GradientEstimate,
    /// Mean baseline loss over the batch.
    pub mean_loss: f64,
}

/// Query cost of [`batch_estimate`].
pub fn batch_cost(batch: usize, k: usize) -> u64 {
    batch as u64 * 2 * (k as u64 + 1)
}

/// Averages per-pair image and text estimates over the batch.
///
/// Probe streams are derived from `rng` and the pair ids, and the average is
/// taken in ascending `(image_id, prompt_id)` order, so the result does not
/// depend on batch order or on how many workers evaluate the pairs.
#[allow(clippy::too_many_arguments)]
pub fn batch_estimate(
    objective: &Objective,
    batch: &[BatchPair],
    uap: &TextureUAP,
    delta: &PromptDelta,
    k: usize,
    eps_t: f64,
    rng: &RngStream,
    exec: &Executor,
) -> Result<BatchEstimate> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("batch must not be empty".into()));
    }
    let needed = batch_cost(batch.len(), k);
    let ledger = objective.ledger();
    if ledger.remaining() < needed {
        return Err(Error::BudgetExhausted {
            used: ledger.used(),
            budget: ledger.budget(),
            requested: needed,
        });
    }
    let mut ordered = batch.to_vec();
    ordered.sort_by_key(|p| (p.image_id, p.prompt_id));

    let per_pair = exec.map(&ordered, |pair| -> Result<(GradientEstimate, GradientEstimate)> {
        let stream = rng.derive(format!("{}/{}", pair.image_id, pair.prompt_id));
        let adv_prompt = crate::perturbation::apply_to_prompt(pair.prompt, delta)?;
        let g_v = estimate_grad_image(
            objective,
            pair.image,
            uap,
            &adv_prompt,
            k,
            uap.eps_v,
            &stream.derive("image"),
        )?;
        let adv_image = crate::perturbation::apply_to_image(pair.image, uap)?;
        let g_t = estimate_grad_text(
            objective,
            &adv_image,
            pair.prompt,
            delta,
            k,
            eps_t,
            &stream.derive("text"),
        )?;
        Ok((g_v, g_t))
    });

    let n = ordered.len() as f64;
    let mut image = vec![0.0; uap.base_patch.len()];
    let mut text = vec![0.0; delta.vector.len()];
    let (mut loss, mut q_image, mut q_text) = (0.0, 0u64, 0u64);
    for result in per_pair {
        let (g_v, g_t) = result?;
        image.iter_mut().zip(&g_v.direction).for_each(|(a, b)| *a += b);
        text.iter_mut().zip(&g_t.direction).for_each(|(a, b)| *a += b);
        loss += g_v.baseline;
        q_image += g_v.queries_spent;
        q_text += g_t.queries_spent;
    }
    image.iter_mut().for_each(|a| *a /= n);
    text.iter_mut().for_each(|a| *a /= n);
    let mean_loss = loss / n;
    Ok(BatchEstimate {
        image: GradientEstimate {
            direction: image,
            samples: k,
            queries_spent: q_image,
            baseline: mean_loss,
        },
        text: GradientEstimate {
            direction: text,
            samples: k,
            queries_spent: q_text,
            baseline: mean_loss,
        },
        mean_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_cosine(seed: u64, k: usize, dim: usize) -> f64 {
        let mut rng = RngStream::new(seed, "quad");
        let x: Vec<f32> = (0..dim).map(|_| rng.normal() as f32).collect();
        let star: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let loss = |p: &[f32]| -> f64 {
            p.iter().zip(&star).map(|(&a, b)| (a as f64 - b).powi(2)).sum()
        };
        let probes: Vec<Vec<f32>> = (0..k)
            .map(|i| ProbeDistribution::Gaussian(0.01).draw(&mut rng.derive(format!("p{i}")), dim))
            .collect();
        let est = estimate_gradient(&probes, |eta| {
            Ok(match eta {
                None => loss(&x),
                Some(eta) => loss(&add_probe(&x, eta)),
            })
        })
        .unwrap();
        let grad: Vec<f64> = x.iter().zip(&star).map(|(&a, b)| 2.0 * (a as f64 - b)).collect();
        crate::evaluation::cosine(&est.direction, &grad)
    }

    #[test]
    fn constant_loss_gives_zero_direction() {
        let probes: Vec<Vec<f32>> = (0..10)
            .map(|i| ProbeDistribution::Uniform(0.1).draw(&mut RngStream::new(i, "c"), 64))
            .collect();
        let est = estimate_gradient(&probes, |_| Ok(3.5)).unwrap();
        assert!(est.direction.iter().all(|&d| d == 0.0));
        assert_eq!(est.queries_spent, 11);
        assert_eq!(est.samples, 10);
    }

    #[test]
    fn linear_loss_single_probe_is_projection() {
        // L(x) = a.x: estimate = (a.eta) eta / |eta|^2
        let a = [1.0f64, -2.0, 0.5];
        let eta = vec![0.5f32, 0.25, -1.0];
        let est = estimate_gradient(std::slice::from_ref(&eta), |p| {
            Ok(p.map_or(0.0, |p| p.iter().zip(&a).map(|(&x, y)| x as f64 * y).sum()))
        })
        .unwrap();
        let dot: f64 = eta.iter().zip(&a).map(|(&x, y)| x as f64 * y).sum();
        let n2: f64 = eta.iter().map(|&x| (x as f64).powi(2)).sum();
        for (d, &e) in est.direction.iter().zip(&eta) {
            assert!((d - dot / n2 * e as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_cosine_grows_with_samples() {
        let mean = |k| (0..100).map(|s| quadratic_cosine(s, k, 64)).sum::<f64>() / 100.0;
        let (c10, c100) = (mean(10), mean(100));
        assert!(c10 > 0.0);
        assert!(c100 > c10, "{c10} vs {c100}");
    }

    #[test]
    fn errors_abort_the_estimate() {
        let probes = vec![vec![1.0f32; 4]; 3];
        let mut calls = 0;
        let r = estimate_gradient(&probes, |_| {
            calls += 1;
            if calls == 3 {
                Err(Error::BudgetExhausted { used: 2, budget: 2, requested: 1 })
            } else {
                Ok(1.0)
            }
        });
        assert!(matches!(r, Err(Error::BudgetExhausted { .. })));
        assert!(estimate_gradient(&[], |_| Ok(0.0)).is_err());
    }
}
