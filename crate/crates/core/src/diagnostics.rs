//! Agreement between the query-based gradient estimates and the toy
//! victim's analytic gradients.

use std::fmt::Write as _;

use crate::corpus::AttackCorpus;
use crate::error::{Error, Result};
use crate::estimator::{estimate_grad_image, estimate_grad_text, Objective, OracleMode};
use crate::evaluation::cosine;
use crate::exec::Executor;
use crate::numerics::RngStream;
use crate::optimizer::AttackConfig;
use crate::perturbation::{
    apply_to_image, apply_to_prompt, init_prompt_delta, init_uap, render_adjoint, render_uap, PATCH_SIZE,
};
use crate::victim::{QueryLedger, ToyVictim, VictimOracle};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub k: usize,
    pub image_cosine: f64,
    pub text_cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub seeds: usize,
    pub rows: Vec<CheckRow>,
    pub queries: u64,
}

impl OracleCheck {
    pub fn row(&self, k: usize) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,image_cosine,text_cosine\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.9},{:.9}", r.k, r.image_cosine, r.text_cosine);
        }
        s
    }
}

/// For each seed, draws a random train pair and random initial
/// perturbations, then compares estimates at every `K` in `samples` with the
/// white-box gradient at the same point. Cosines are averaged over seeds.
///
/// The analytic image gradient is pulled back to patch space through the
/// tiling adjoint, with pixels clamped by `[0, 1]` contributing nothing.
pub fn oracle_check(
    victim: &ToyVictim,
    corpus: &AttackCorpus,
    config: &AttackConfig,
    samples: &[usize],
    seeds: usize,
    exec: &Executor,
) -> Result<OracleCheck> {
    if samples.is_empty() || samples.contains(&0) || seeds == 0 {
        return Err(Error::InvalidParameter("oracle check needs K >= 1 and at least one seed".into()));
    }
    let pairs = corpus.train_pairs();
    if pairs.is_empty() {
        return Err(Error::InvalidParameter("corpus has no train pairs".into()));
    }
    let (h, w, c) = victim.input_shape();
    let ledger = QueryLedger::unlimited();
    let objective = Objective::new(victim, &ledger, &config.target_text, OracleMode::Loss)?;
    let root = RngStream::new(config.seed, "oracle-check");
    let seed_ids: Vec<usize> = (0..seeds).collect();

    let per_seed = exec.map(&seed_ids, |&s| -> Result<Vec<(f64, f64)>> {
        let stream = root.derive(format!("seed{s}"));
        let (im, p) = pairs[stream.derive("pair").below(pairs.len())];
        let uap = init_uap(&mut stream.derive("uap"), config.eps_v, config.tile_scale, config.mask.clone(), c)?;
        let delta = init_prompt_delta(&mut stream.derive("delta"), config.eps_t, victim.prompt_dim())?;
        let image = &corpus.images[im];
        let prompt = victim.encode_prompt(&corpus.prompts[p].text)?;
        let adv_image = apply_to_image(image, &uap)?;
        let adv_prompt = apply_to_prompt(&prompt, &delta)?;

        let truth = victim.forward_with_grad(&adv_image, &adv_prompt, &config.target_text)?;
        let rendered = render_uap(&uap, h, w)?;
        let mut g_img = truth.grad_image.clone();
        for ((g, &v), &r) in g_img.data_mut().iter_mut().zip(image.data()).zip(rendered.data()) {
            let x = v + r;
            if !(0.0..=1.0).contains(&x) {
                *g = 0.0;
            }
        }
        let true_v = render_adjoint(&g_img, uap.tile_scale, PATCH_SIZE, PATCH_SIZE)?;

        samples
            .iter()
            .map(|&k| {
                let rng = stream.derive(format!("k{k}"));
                let est_v = estimate_grad_image(&objective, image, &uap, &adv_prompt, k, config.eps_v, &rng.derive("image"))?;
                let est_t = estimate_grad_text(&objective, &adv_image, &prompt, &delta, k, config.eps_t, &rng.derive("text"))?;
                Ok((cosine(&est_v.direction, &true_v), cosine(&est_t.direction, &truth.grad_prompt)))
            })
            .collect()
    });

    let mut sums = vec![(0.0, 0.0); samples.len()];
    for r in per_seed {
        for (acc, (a, b)) in sums.iter_mut().zip(r?) {
            acc.0 += a;
            acc.1 += b;
        }
    }
    Ok(OracleCheck {
        seeds,
        rows: samples
            .iter()
            .zip(sums)
            .map(|(&k, (a, b))| CheckRow {
                k,
                image_cosine: a / seeds as f64,
                text_cosine: b / seeds as f64,
            })
            .collect(),
        queries: ledger.used(),
    })
}
