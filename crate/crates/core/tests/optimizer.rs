use mmattack_core::corpus::{gen_corpus, AttackCorpus, CorpusSpec};
use mmattack_core::estimator::batch_cost;
use mmattack_core::evaluation::train_mean_loss;
use mmattack_core::exec::Executor;
use mmattack_core::numerics::{project_l2, project_linf, RngStream};
use mmattack_core::optimizer::{joint_step, run_attack, AttackConfig, AttackState, CrossModalProjector};
use mmattack_core::perturbation::{apply_texture_constraint, init_prompt_delta, init_uap, PromptDelta};
use mmattack_core::victim::{CaptionBank, QueryLedger, ToyVictim, OUTPUT_DIM};
use mmattack_core::Error;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = dot(x, x).sqrt();
    x.iter().map(|v| v / n).collect()
}

/// Solves the 2x2 system `m x = y` (row-major `m`).
fn solve2(m: [[f64; 2]; 2], y: [f64; 2]) -> [f64; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [(y[0] * m[1][1] - m[0][1] * y[1]) / det, (m[0][0] * y[1] - m[1][0] * y[0]) / det]
}

#[test]
fn aligned_and_anti_aligned_projections() {
    let proj = CrossModalProjector::new(5, 2, 2, 2);
    let g_t = [0.3, -1.2];
    let target = proj.project_text(&g_t);
    // recover U column by column to solve U g_v = 2 V g_t
    let c0 = proj.project_image(&[1.0, 0.0]);
    let c1 = proj.project_image(&[0.0, 1.0]);
    let g_v = solve2([[c0[0], c1[0]], [c0[1], c1[1]]], [2.0 * target[0], 2.0 * target[1]]);

    let a = proj.align(&g_v, &g_t);
    assert!(a.r_hat.abs() < 1e-9, "{}", a.r_hat);
    // coupled_v = U^T normalize(V g_t), which here is U^T normalize(U g_v)
    let u_hat = unit(&proj.project_image(&g_v));
    let expected_v = [dot(&[c0[0], c0[1]], &u_hat), dot(&[c1[0], c1[1]], &u_hat)];
    for (x, y) in a.coupled_v.iter().zip(expected_v) {
        assert!((x - y).abs() < 1e-9);
    }
    let neg: Vec<f64> = g_v.iter().map(|x| -x).collect();
    let b = proj.align(&neg, &g_t);
    assert!((b.r_hat - 2.0).abs() < 1e-9, "{}", b.r_hat);
}

#[test]
fn independent_gradients_are_uncorrelated_on_average() {
    let d_c = 128;
    let mut total = 0.0;
    for seed in 0..1000u64 {
        let proj = CrossModalProjector::new(seed, d_c, 96, 64);
        let mut rng = RngStream::new(seed, "independent");
        let g_v: Vec<f64> = (0..96).map(|_| rng.normal()).collect();
        let g_t: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        total += 1.0 - proj.align(&g_v, &g_t).r_hat;
    }
    let mean = total / 1000.0;
    assert!(mean.abs() < 3.0 / (d_c as f64).sqrt(), "{mean}");
}

fn state(seed: u64) -> AttackState {
    let mut rng = RngStream::new(seed, "state");
    let config = AttackConfig::default();
    AttackState {
        uap: init_uap(&mut rng, config.eps_v, config.tile_scale, config.mask.clone(), 3).unwrap(),
        delta: init_prompt_delta(&mut rng, config.eps_t, 64).unwrap(),
    }
}

#[test]
fn lambda_zero_matches_independent_pgd_bitwise() {
    let config = AttackConfig {
        lambda: 0.0,
        ..AttackConfig::default()
    };
    for seed in 0..5 {
        let s = state(seed);
        let mut rng = RngStream::new(seed, "grads");
        let g_v: Vec<f64> = (0..s.uap.base_patch.len()).map(|_| rng.normal()).collect();
        let g_t: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        // a nonzero coupling that lambda = 0 must ignore
        let alignment = CrossModalProjector::new(seed, 128, g_v.len(), 64).align(&g_v, &g_t);
        assert!(alignment.coupled_t.iter().any(|&x| x != 0.0));
        let out = joint_step(&s, &config, &g_v, &g_t, &alignment).unwrap();

        // image: sign descent, box projection, texture constraint
        let mut patch = s.uap.base_patch.clone();
        for (p, g) in patch.data_mut().iter_mut().zip(&g_v) {
            let step = if *g > 0.0 { -config.alpha_v } else if *g < 0.0 { config.alpha_v } else { 0.0 };
            *p = (*p as f64 + step) as f32;
        }
        let mut uap = s.uap.clone();
        uap.base_patch = project_linf(&patch, config.eps_v).unwrap();
        let uap = apply_texture_constraint(&uap).unwrap();
        // text: normalized descent, ball projection
        let n = dot(&g_t, &g_t).sqrt();
        let stepped: Vec<f32> = s
            .delta
            .vector
            .iter()
            .zip(&g_t)
            .map(|(&x, g)| (x as f64 - config.alpha_t * g / n) as f32)
            .collect();
        let delta = PromptDelta {
            vector: project_l2(&stepped, config.eps_t).unwrap(),
            eps_t: config.eps_t,
        };
        assert_eq!(out.state.uap, uap);
        assert_eq!(out.state.delta, delta);
        assert!(!out.text_skipped);
    }
}

#[test]
fn zero_text_gradient_skips_the_text_update() {
    let s = state(1);
    let config = AttackConfig::default();
    let g_v = vec![1.0; s.uap.base_patch.len()];
    let g_t = vec![0.0; 64];
    let alignment = CrossModalProjector::new(0, 16, g_v.len(), 64).align(&g_v, &g_t);
    let out = joint_step(&s, &config, &g_v, &g_t, &alignment).unwrap();
    assert!(out.text_skipped);
    assert_eq!(out.state.delta, s.delta);
}

fn tiny(seed: u64) -> (ToyVictim, AttackCorpus) {
    let v = ToyVictim::with_input_shape(1, 0.1, CaptionBank::default_bank(OUTPUT_DIM), (64, 64, 3)).unwrap();
    let corpus = gen_corpus(&CorpusSpec {
        seed,
        n_images: 4,
        m_prompts: 2,
        height: 64,
        width: 64,
        heldout_fraction: 0.0,
        ..CorpusSpec::default()
    })
    .unwrap();
    (v, corpus)
}

#[test]
fn zero_budget_is_an_error() {
    let (v, corpus) = tiny(0);
    let ledger = QueryLedger::new(0);
    let r = run_attack(&v, &corpus, &AttackConfig::default(), &ledger, &Executor::sequential());
    assert!(matches!(r, Err(Error::BudgetExhausted { .. })));
}

#[test]
fn tiny_run_descends_and_stays_feasible() {
    let mut descended = 0;
    for seed in 0..5 {
        let (v, corpus) = tiny(seed);
        let config = AttackConfig {
            seed,
            query_budget: 2_000,
            ..AttackConfig::default()
        };
        let ledger = QueryLedger::new(config.query_budget);
        let out = run_attack(&v, &corpus, &config, &ledger, &Executor::sequential()).unwrap();
        let batch = config.batch.min(corpus.train_pairs().len());
        let cost = batch_cost(batch, config.k);
        assert_eq!(out.trace.records.len() as u64, config.query_budget / cost);
        assert!(out.queries_used <= config.query_budget);
        for (i, r) in out.trace.records.iter().enumerate() {
            assert_eq!(r.queries, (i as u64 + 1) * cost);
            assert!(r.linf <= config.eps_v + 1e-7);
            assert!(r.l2 <= config.eps_t + 1e-6);
            assert!(r.mask_residual < 1e-6);
            assert!((0.0..=2.0).contains(&r.r_hat));
        }
        let eval = QueryLedger::unlimited();
        let t = &config.target_text;
        let before = train_mean_loss(&v, &corpus, &out.initial.uap, &out.initial.delta, t, &eval).unwrap();
        let after = train_mean_loss(&v, &corpus, &out.uap, &out.delta, t, &eval).unwrap();
        if after <= before {
            descended += 1;
        }
    }
    assert!(descended >= 4, "descended on {descended} of 5 seeds");
}

#[test]
fn runs_are_bitwise_reproducible() {
    let (v, corpus) = tiny(3);
    let config = AttackConfig {
        seed: 3,
        query_budget: 1_000,
        ..AttackConfig::default()
    };
    let run = |workers| {
        let ledger = QueryLedger::new(config.query_budget);
        run_attack(&v, &corpus, &config, &ledger, &Executor::new(workers).unwrap()).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(3));
    assert_eq!(a.uap, b.uap);
    assert_eq!(a.delta, b.delta);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.uap, c.uap);
    assert_eq!(a.delta, c.delta);
    assert_eq!(a.trace.to_csv(), c.trace.to_csv());
    let other = run_attack(
        &v,
        &corpus,
        &AttackConfig { seed: 4, ..config.clone() },
        &QueryLedger::new(config.query_budget),
        &Executor::sequential(),
    )
    .unwrap();
    assert_ne!(other.uap, a.uap);
}

#[test]
fn coupling_changes_the_trajectory() {
    let (v, corpus) = tiny(1);
    let config = AttackConfig {
        query_budget: 1_000,
        ..AttackConfig::default()
    };
    let run = |lambda| {
        let c = AttackConfig { lambda, ..config.clone() };
        run_attack(&v, &corpus, &c, &QueryLedger::new(c.query_budget), &Executor::sequential()).unwrap()
    };
    let (with, without) = (run(0.1), run(0.0));
    assert_ne!(with.delta, without.delta);
    assert_eq!(with.queries_used, without.queries_used);
}
