use std::fmt::Write as _;

use super::{Alignment, AttackConfig, CrossModalProjector};
use crate::corpus::AttackCorpus;
use crate::error::{Error, Result};
use crate::estimator::{batch_cost, batch_estimate, BatchPair, Objective};
use crate::exec::Executor;
use crate::numerics::{project_l2, project_linf, RngStream};
use crate::perturbation::{
    apply_texture_constraint, init_prompt_delta, init_uap, PromptDelta, TextureUAP, PATCH_SIZE,
};
use crate::victim::{PromptEmbedding, QueryLedger, VictimOracle};

#[derive(Debug, Clone, PartialEq)]
pub struct AttackState {
    pub uap: TextureUAP,
    pub delta: PromptDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: AttackState,
    pub text_skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Mean baseline loss of the batch, before this iteration's update.
    pub mean_loss: f64,
    pub r_hat: f64,
    /// Ledger total after this iteration.
    pub queries: u64,
    pub linf: f64,
    pub l2: f64,
    /// Largest coefficient left in a dropped subband.
    pub mask_residual: f64,
    pub text_skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackTrace {
    pub records: Vec<TraceRecord>,
}

impl AttackTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,r_hat,queries,linf,l2,mask_residual,text_skipped\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{},{:.9},{:.9},{:.3e},{}",
                r.iteration, r.mean_loss, r.r_hat, r.queries, r.linf, r.l2, r.mask_residual, r.text_skipped
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub uap: TextureUAP,
    pub delta: PromptDelta,
    /// Perturbations before the first update.
    pub initial: AttackState,
    pub trace: AttackTrace,
    pub queries_used: u64,
    /// The loop stopped because the budget could not pay for another
    /// iteration.
    pub exhausted: bool,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `g + lambda * |g| * normalize(coupled)`; exactly `g` when `lambda` is 0 or
/// the coupling vanishes.
fn descent_direction(g: &[f64], coupled: &[f64], lambda: f64) -> Vec<f64> {
    let cn = coupled.iter().map(|x| x * x).sum::<f64>().sqrt();
    if lambda == 0.0 || cn == 0.0 {
        return g.to_vec();
    }
    let scale = lambda * g.iter().map(|x| x * x).sum::<f64>().sqrt() / cn;
    g.iter().zip(coupled).map(|(a, c)| a + scale * c).collect()
}

/// One projected update of both perturbations: a sign step on the patch
/// followed by the l-infinity projection and the texture constraint, and a
/// normalised step on the prompt delta followed by the l2 projection.
pub fn joint_step(
    state: &AttackState,
    config: &AttackConfig,
    g_v: &[f64],
    g_t: &[f64],
    alignment: &Alignment,
) -> Result<StepOutcome> {
    let patch = &state.uap.base_patch;
    if g_v.len() != patch.len() || g_t.len() != state.delta.vector.len() {
        return Err(Error::ShapeMismatch("gradient shapes do not match the perturbations".into()));
    }
    let dir = if config.targeted { -1.0 } else { 1.0 };

    let uap = if config.update_image {
        let d_v = descent_direction(g_v, &alignment.coupled_v, config.lambda);
        let mut stepped = patch.clone();
        for (p, d) in stepped.data_mut().iter_mut().zip(&d_v) {
            *p = (*p as f64 + dir * config.alpha_v * sign(*d)) as f32;
        }
        let mut uap = state.uap.clone();
        uap.base_patch = project_linf(&stepped, state.uap.eps_v)?;
        apply_texture_constraint(&uap)?
    } else {
        state.uap.clone()
    };

    let d_t = descent_direction(g_t, &alignment.coupled_t, config.lambda);
    let norm = d_t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let text_skipped = !config.update_text || norm == 0.0 || !norm.is_finite();
    let delta = if text_skipped {
        state.delta.clone()
    } else {
        let stepped: Vec<f32> = state
            .delta
            .vector
            .iter()
            .zip(&d_t)
            .map(|(&x, d)| (x as f64 + dir * config.alpha_t * d / norm) as f32)
            .collect();
        PromptDelta {
            vector: project_l2(&stepped, state.delta.eps_t)?,
            eps_t: state.delta.eps_t,
        }
    };
    Ok(StepOutcome {
        state: AttackState { uap, delta },
        text_skipped: text_skipped && config.update_text,
    })
}

fn initial_state(config: &AttackConfig, channels: usize, dim: usize, root: &RngStream) -> Result<AttackState> {
    let uap = if config.update_image {
        init_uap(&mut root.derive("uap-init"), config.eps_v, config.tile_scale, config.mask.clone(), channels)?
    } else {
        TextureUAP::zeros(channels, config.tile_scale, config.eps_v, config.mask.clone())?
    };
    let delta = if config.update_text {
        init_prompt_delta(&mut root.derive("txt-init"), config.eps_t, dim)?
    } else {
        PromptDelta::zeros(dim, config.eps_t)
    };
    Ok(AttackState { uap, delta })
}

/// Encodes every corpus prompt with the victim's text encoder.
pub(crate) fn encode_prompts(oracle: &dyn VictimOracle, corpus: &AttackCorpus) -> Result<Vec<PromptEmbedding>> {
    corpus.prompts.iter().map(|p| oracle.encode_prompt(&p.text)).collect()
}

/// Runs the joint attack until the ledger cannot pay for another iteration.
///
/// Each iteration samples `min(batch, #train pairs)` distinct train pairs,
/// estimates both gradients, couples them and takes one joint step, costing
/// exactly `batch * 2 * (K + 1)` queries.
pub fn run_attack(
    oracle: &dyn VictimOracle,
    corpus: &AttackCorpus,
    config: &AttackConfig,
    ledger: &QueryLedger,
    exec: &Executor,
) -> Result<AttackOutcome> {
    config.validate()?;
    corpus.validate()?;
    let (h, w, c) = oracle.input_shape();
    if corpus.image_shape() != Some((h, w, c)) {
        return Err(Error::ShapeMismatch(format!(
            "victim expects {h}x{w}x{c} images, corpus has {:?}",
            corpus.image_shape()
        )));
    }
    let pairs = corpus.train_pairs();
    let batch = config.batch.min(pairs.len());
    let cost = batch_cost(batch, config.k);
    if ledger.remaining() < cost {
        return Err(Error::BudgetExhausted {
            used: ledger.used(),
            budget: ledger.budget(),
            requested: cost,
        });
    }
    let embeddings = encode_prompts(oracle, corpus)?;
    let objective = Objective::new(oracle, ledger, &config.target_text, config.oracle_mode())?;
    let root = RngStream::new(config.seed, "attack");
    let initial = initial_state(config, c, oracle.prompt_dim(), &root)?;
    let projector = CrossModalProjector::new(
        root.derive("projection").next_u64(),
        config.common_dim,
        PATCH_SIZE * PATCH_SIZE * c,
        oracle.prompt_dim(),
    );

    let mut state = initial.clone();
    let mut trace = AttackTrace::default();
    let mut iteration = 0;
    while ledger.remaining() >= cost {
        let picks = root.derive(format!("batch{iteration}")).sample_indices(pairs.len(), batch);
        let members: Vec<BatchPair> = picks
            .iter()
            .map(|&i| {
                let (image_id, prompt_id) = pairs[i];
                BatchPair {
                    image_id,
                    prompt_id,
                    image: &corpus.images[image_id],
                    prompt: &embeddings[prompt_id],
                }
            })
            .collect();
        let est = batch_estimate(
            &objective,
            &members,
            &state.uap,
            &state.delta,
            config.k,
            config.eps_t,
            &root.derive(format!("probes{iteration}")),
            exec,
        )?;
        let alignment = projector.align(&est.image.direction, &est.text.direction);
        let step = joint_step(&state, config, &est.image.direction, &est.text.direction, &alignment)?;
        state = step.state;
        trace.records.push(TraceRecord {
            iteration,
            mean_loss: est.mean_loss,
            r_hat: alignment.r_hat,
            queries: ledger.used(),
            linf: state.uap.linf_norm() as f64,
            l2: state.delta.l2_norm(),
            mask_residual: state.uap.mask_residual()?,
            text_skipped: step.text_skipped,
        });
        iteration += 1;
    }
    Ok(AttackOutcome {
        uap: state.uap,
        delta: state.delta,
        initial,
        trace,
        queries_used: ledger.used(),
        exhausted: true,
    })
}
