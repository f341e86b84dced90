//! End-to-end acceptance suite. Runs without the libtest harness so the
//! per-criterion verdicts are printed even when output is captured.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mmattack_core::estimator::{batch_cost, estimate_gradient, ProbeDistribution};
use mmattack_core::evaluation::cosine;
use mmattack_core::numerics::{
    haar_dwt2, haar_idwt2, l2_norm, project_l2, project_linf, DetailBand, ImageTensor, RngStream,
};
use mmattack_core::optimizer::{joint_step, AttackConfig, AttackState, CrossModalProjector};
use mmattack_core::perturbation::{apply_texture_constraint, init_prompt_delta, init_uap, PromptDelta};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BUDGET: u64 = 20_000;

// Frozen from the reference run: attack seed 0, victim seed 1, corpus seed 0,
// 16 images x 8 prompts, 20k queries, default hyperparameters.
const FIXTURE_OVERALL: f64 = 0.276282221;
const FIXTURE_CLEAN: f64 = 0.061785987;
const FIXTURE_ASR: f64 = 0.28125;
const FIXTURE_CLEAN_ASR: f64 = 0.0625;
const FIXTURE_TOL: f64 = 0.02;

struct Verdict {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mmattack")
}

fn mmattack(args: &[&str], out: &Path, config: Option<&Path>) -> String {
    let mut cmd = Command::new(bin());
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let o = cmd.output().expect("spawn mmattack");
    assert!(
        o.status.success(),
        "mmattack {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// `header -> values` rows of a simple CSV (no quoted commas).
fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|e| panic!("{key}: {e}"))
}

fn kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.2}s", e.as_secs_f64()))
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut rng = RngStream::new(1, "acceptance/haar");
    let (mut worst_err, mut worst_energy) = (0.0f32, 0.0f64);
    for _ in 0..100 {
        let data = (0..64 * 64 * 3).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let x = ImageTensor::new(64, 64, 3, data).unwrap();
        let pyr = haar_dwt2(&x, 3).unwrap();
        let back = haar_idwt2(&pyr).unwrap();
        let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        let e = x.l2_norm().powi(2);
        worst_err = worst_err.max(err);
        worst_energy = worst_energy.max((pyr.energy() - e).abs() / e);
    }
    // [1 0; 0 0] has every orthonormal Haar coefficient equal to 1/2
    let block = haar_dwt2(&ImageTensor::new(2, 2, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap(), 1).unwrap();
    let coeffs = [
        block.approx().data[0],
        block.detail(1, DetailBand::Horizontal).data[0],
        block.detail(1, DetailBand::Vertical).data[0],
        block.detail(1, DetailBand::Diagonal).data[0],
    ];
    let hand = coeffs.iter().all(|&c| c.abs() == 0.5);
    let (fast, took) = within(t, Duration::from_secs(1));
    Verdict {
        id: 1,
        name: "wavelet correctness",
        pass: worst_err <= 1e-5 && worst_energy <= 1e-4 && hand && fast,
        detail: format!("max err {worst_err:.2e}, energy rel {worst_energy:.2e}, 2x2 block {coeffs:?}, {took}"),
    }
}

fn criterion_2() -> Verdict {
    let t = Instant::now();
    let mut rng = RngStream::new(2, "acceptance/proj");
    let mut failures = Vec::new();
    for case in 0..1000 {
        let eps = rng.uniform(0.01, 1.0);
        let scale = rng.uniform(0.1, 3.0);
        let n = 1 + rng.below(256);
        let v: Vec<f32> = (0..n).map(|_| (scale * rng.normal()) as f32).collect();

        let t_in = ImageTensor::new(1, n, 1, v.clone()).unwrap();
        let p = project_linf(&t_in, eps).unwrap();
        let linf_ok = p.linf_norm() as f64 <= eps + f32::EPSILON as f64
            && project_linf(&p, eps).unwrap() == p
            && t_in.data().iter().zip(p.data()).all(|(a, b)| (a.abs() as f64) > eps || a == b);

        let q = project_l2(&v, eps).unwrap();
        let (nv, nq) = (l2_norm(&v), l2_norm(&q));
        let l2_ok = nq <= eps
            && project_l2(&q, eps).unwrap() == q
            && if nv <= eps {
                q == v
            } else {
                let c: f64 = v.iter().zip(&q).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / (nv * nq);
                c > 1.0 - 1e-6
            };
        if !(linf_ok && l2_ok) {
            failures.push(case);
        }
    }
    let (fast, took) = within(t, Duration::from_secs(1));
    Verdict {
        id: 2,
        name: "projection suite",
        pass: failures.is_empty() && fast,
        detail: format!("1000 cases, {} failures, {took}", failures.len()),
    }
}

/// Mean cosine over `seeds` between estimates and the analytic gradient of
/// `|x - x*|^2` in 64 dimensions.
fn quadratic_cosine(k: usize, seeds: u64) -> f64 {
    let dim = 64;
    let mut total = 0.0;
    for s in 0..seeds {
        let mut rng = RngStream::new(s, "acceptance/quadratic");
        let x: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let star: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let loss = |eta: Option<&[f32]>| -> f64 {
            (0..dim)
                .map(|i| (x[i] + eta.map_or(0.0, |e| e[i] as f64) - star[i]).powi(2))
                .sum()
        };
        let probes: Vec<Vec<f32>> = (0..k)
            .map(|i| ProbeDistribution::Gaussian(0.01).draw(&mut rng.derive(format!("probe{i}")), dim))
            .collect();
        let est = estimate_gradient(&probes, |eta| Ok(loss(eta))).unwrap();
        let grad: Vec<f64> = x.iter().zip(&star).map(|(a, b)| 2.0 * (a - b)).collect();
        total += cosine(&est.direction, &grad);
    }
    total / seeds as f64
}

/// Positive at the first K, larger at the last, and non-decreasing across
/// the sweep with at most one inversion of at most `tol`.
fn monotone_enough(values: &[f64], tol: f64) -> bool {
    let inversions: Vec<f64> = values.windows(2).filter(|w| w[1] < w[0]).map(|w| w[0] - w[1]).collect();
    values[0] > 0.0 && values[values.len() - 1] > values[0] && inversions.len() <= 1 && inversions.iter().all(|&d| d <= tol)
}

fn criterion_3(work: &Path) -> Verdict {
    let t = Instant::now();
    let ks = [5usize, 10, 50, 100];
    let quad: Vec<f64> = ks.iter().map(|&k| quadratic_cosine(k, 200)).collect();
    let quad_ok = quad[1] > 0.0 && quad[3] > quad[1] && monotone_enough(&quad, 0.02);

    let out = work.join("oracle-check");
    mmattack(&["oracle-check"], &out, None);
    let rows = csv_rows(&read(out.join("oracle_check.csv")));
    let image: Vec<f64> = rows.iter().map(|r| num(r, "image_cosine")).collect();
    let text: Vec<f64> = rows.iter().map(|r| num(r, "text_cosine")).collect();
    let victim_ok = rows.len() == 4 && monotone_enough(&image, 0.02) && monotone_enough(&text, 0.02);
    let (fast, took) = within(t, Duration::from_secs(30));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    Verdict {
        id: 3,
        name: "estimator fidelity",
        pass: quad_ok && victim_ok && fast,
        detail: format!(
            "quadratic K=5/10/50/100 {}; toy victim image {} text {}; {took}",
            fmt(&quad),
            fmt(&image),
            fmt(&text)
        ),
    }
}

struct SeedRun {
    dir: PathBuf,
    loss_before: f64,
    loss_after: f64,
    report: BTreeMap<String, String>,
    trace: Vec<BTreeMap<String, String>>,
}

fn attack_runs(work: &Path) -> (Vec<SeedRun>, Duration) {
    let t = Instant::now();
    let runs = SEEDS
        .iter()
        .map(|&s| {
            let dir = work.join(format!("attack-{s}"));
            mmattack(&["attack", "--seed", &s.to_string(), "--budget", &BUDGET.to_string()], &dir, None);
            let losses = kv(&read(dir.join("train_loss.txt")));
            let overall = csv_rows(&read(dir.join("report.csv")))
                .into_iter()
                .find(|r| r["task"] == "overall")
                .expect("overall row");
            SeedRun {
                loss_before: losses["initial"].parse().unwrap(),
                loss_after: losses["final"].parse().unwrap(),
                report: overall,
                trace: csv_rows(&read(dir.join("trace.csv"))),
                dir,
            }
        })
        .collect();
    (runs, t.elapsed())
}

fn criterion_4(runs: &[SeedRun], took: Duration) -> Verdict {
    let config = AttackConfig::default();
    let descended = runs.iter().filter(|r| r.loss_after < r.loss_before).count();
    let feasible = runs.iter().all(|r| {
        !r.trace.is_empty()
            && r.trace.iter().all(|row| {
                num(row, "linf") <= config.eps_v + 1e-7
                    && num(row, "l2") <= config.eps_t + 1e-6
                    && num(row, "mask_residual") < 1e-5
            })
    });
    let losses: Vec<String> = runs.iter().map(|r| format!("{:.3}->{:.3}", r.loss_before, r.loss_after)).collect();
    Verdict {
        id: 4,
        name: "descent",
        pass: descended >= 4 && feasible && took < Duration::from_secs(600),
        detail: format!(
            "descended on {descended}/5 seeds [{}], feasible on every trace row: {feasible}, {:.1}s",
            losses.join(" "),
            took.as_secs_f64()
        ),
    }
}

fn criterion_5(runs: &[SeedRun]) -> Verdict {
    let r = &runs[0].report;
    let (overall, clean, asr, clean_asr) = (num(r, "attacked"), num(r, "clean"), num(r, "asr"), num(r, "clean_asr"));
    let gain = overall - clean;
    let fixtures = (overall - FIXTURE_OVERALL).abs() <= FIXTURE_TOL
        && (clean - FIXTURE_CLEAN).abs() <= FIXTURE_TOL
        && (asr - FIXTURE_ASR).abs() <= FIXTURE_TOL
        && (clean_asr - FIXTURE_CLEAN_ASR).abs() <= FIXTURE_TOL;
    let others: Vec<String> = runs[1..]
        .iter()
        .map(|r| format!("{:.3}", num(&r.report, "attacked") - num(&r.report, "clean")))
        .collect();
    Verdict {
        id: 5,
        name: "attack efficacy",
        pass: gain >= 0.15 && asr > clean_asr && fixtures,
        detail: format!(
            "overall {overall:.4} vs clean {clean:.4} (gain {gain:+.4}), asr {asr:.4} vs {clean_asr:.4}, fixtures within {FIXTURE_TOL}: {fixtures}; gains on seeds 1-4: {}",
            others.join(" ")
        ),
    }
}

fn criterion_6(work: &Path) -> Verdict {
    let t = Instant::now();
    let mut wins = 0;
    let mut all_four = true;
    let mut cells = Vec::new();
    for s in SEEDS {
        let dir = work.join(format!("ablate-{s}"));
        mmattack(&["ablate", "--seed", &s.to_string(), "--budget", &BUDGET.to_string()], &dir, None);
        let rows = csv_rows(&read(dir.join("ablation.csv")));
        let get = |m: &str| rows.iter().find(|r| r["mode"] == m).map(|r| num(r, "overall"));
        let modes = ["full", "no_text", "no_image", "no_joint"].map(get);
        all_four &= modes.iter().all(Option::is_some) && read(dir.join("ablation.txt")).matches("== mode").count() == 4;
        let budgets: Vec<&String> = rows.iter().map(|r| &r["attack_queries"]).collect();
        all_four &= budgets.iter().all(|b| *b == budgets[0]);
        let [full, a, b, c] = modes.map(|m| m.unwrap_or(f64::NAN));
        if full >= a && full >= b && full >= c {
            wins += 1;
        }
        cells.push(format!("{full:.3}/{a:.3}/{b:.3}/{c:.3}"));
    }
    Verdict {
        id: 6,
        name: "ablation pattern",
        pass: wins >= 3 && all_four,
        detail: format!(
            "full >= every ablation on {wins}/5 seeds (full/no_text/no_image/no_joint: {}), {:.1}s",
            cells.join(" "),
            t.elapsed().as_secs_f64()
        ),
    }
}

fn criterion_7(runs: &[SeedRun], work: &Path) -> Verdict {
    let dir = work.join("transfer");
    let cfg = work.join("transfer.cfg");
    std::fs::write(&cfg, format!("query_budget = {BUDGET}\ntransfer_victims = 2\ntransfer_corpora = 5\n")).unwrap();
    let artifact = runs[0].dir.join("artifact");
    mmattack(&["transfer", "--artifact", artifact.to_str().unwrap()], &dir, Some(&cfg));
    let overall = csv_rows(&read(dir.join("transfer_overall.csv")));
    let clean = csv_rows(&read(dir.join("transfer_clean.csv")));
    let cell = |rows: &[BTreeMap<String, String>], v: &str, c: &str| {
        rows.iter().find(|r| r["victim"] == v).map(|r| num(r, c)).unwrap_or(f64::NAN)
    };
    let shape_ok = overall.len() == 2 && overall[0].len() == 3;
    let (att, cln) = (cell(&overall, "seed-2", "corpus-0"), cell(&clean, "seed-2", "corpus-0"));
    let (att5, cln5) = (cell(&overall, "seed-2", "corpus-5"), cell(&clean, "seed-2", "corpus-5"));
    Verdict {
        id: 7,
        name: "transfer",
        pass: shape_ok && att > cln,
        detail: format!(
            "seed 1 -> seed 2 on the training corpus: {att:.4} vs clean {cln:.4}; on corpus 5: {att5:.4} vs {cln5:.4}; 2x2 matrix emitted: {shape_ok}"
        ),
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn criterion_8(runs: &[SeedRun], work: &Path) -> Verdict {
    // lambda = 0: joint step against a hand-rolled PGD step on the same estimates
    let config = AttackConfig {
        lambda: 0.0,
        ..AttackConfig::default()
    };
    let mut bit_match = true;
    for seed in 0..10 {
        let mut rng = RngStream::new(seed, "acceptance/pgd");
        let state = AttackState {
            uap: init_uap(&mut rng, config.eps_v, config.tile_scale, config.mask.clone(), 3).unwrap(),
            delta: init_prompt_delta(&mut rng, config.eps_t, 64).unwrap(),
        };
        let g_v: Vec<f64> = (0..state.uap.base_patch.len()).map(|_| rng.normal()).collect();
        let g_t: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let alignment = CrossModalProjector::new(seed, 128, g_v.len(), 64).align(&g_v, &g_t);
        let out = joint_step(&state, &config, &g_v, &g_t, &alignment).unwrap().state;

        let mut patch = state.uap.base_patch.clone();
        for (p, g) in patch.data_mut().iter_mut().zip(&g_v) {
            *p = (*p as f64 - config.alpha_v * g.signum()) as f32;
        }
        let mut uap = state.uap.clone();
        uap.base_patch = project_linf(&patch, config.eps_v).unwrap();
        let uap = apply_texture_constraint(&uap).unwrap();
        let n = g_t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let stepped: Vec<f32> = state
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
        bit_match &= out.uap == uap && out.delta == delta;
    }

    // snapshot replay of the reference attack run
    let original = &runs[0].dir;
    let replay = work.join("replay");
    mmattack(&["attack"], &replay, Some(&original.join("config.snapshot")));
    let a = files_under(original);
    let b = files_under(&replay);
    let rel = |v: &[PathBuf], root: &Path| v.iter().map(|p| p.strip_prefix(root).unwrap().to_path_buf()).collect::<Vec<_>>();
    let same_set = rel(&a, original) == rel(&b, &replay);
    let identical = same_set && a.iter().zip(&b).all(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap());
    Verdict {
        id: 8,
        name: "lambda=0 reduction and determinism",
        pass: bit_match && identical,
        detail: format!("joint step bit-matches PGD on 10 seeds: {bit_match}; snapshot replay identical across {} files: {identical}", a.len()),
    }
}

fn criterion_9(runs: &[SeedRun], work: &Path) -> Verdict {
    let config = AttackConfig::default();
    let cost = batch_cost(config.batch, config.k);
    let mut exact = true;
    for r in runs {
        for (i, row) in r.trace.iter().enumerate() {
            exact &= num(row, "queries") as u64 == (i as u64 + 1) * cost;
        }
        let meta = kv(&read(r.dir.join("artifact").join("artifact.txt")));
        let used: u64 = meta["queries_used"].parse().unwrap();
        exact &= used == r.trace.len() as u64 * cost && used <= BUDGET && used + cost > BUDGET;
    }
    // an odd budget that is not a multiple of the iteration cost
    let dir = work.join("budget");
    mmattack(&["attack", "--budget", "1000"], &dir, None);
    let trace = csv_rows(&read(dir.join("trace.csv")));
    let used: u64 = kv(&read(dir.join("artifact").join("artifact.txt")))["queries_used"].parse().unwrap();
    let small_ok = used <= 1000 && used == (1000 / cost) * cost && trace.len() as u64 == 1000 / cost;
    Verdict {
        id: 9,
        name: "query accounting",
        pass: exact && small_ok,
        detail: format!(
            "per-iteration cost {cost} = 16 x 2 x (10 + 1); 20k runs use {} queries; --budget 1000 used {used}",
            runs[0].trace.len() as u64 * cost
        ),
    }
}

fn main() {
    // `cargo test -- --list` and filtered runs should not trigger the suite.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3(w)];
    let (runs, took) = attack_runs(w);
    verdicts.push(criterion_4(&runs, took));
    verdicts.push(criterion_5(&runs));
    verdicts.push(criterion_6(w));
    verdicts.push(criterion_7(&runs, w));
    verdicts.push(criterion_8(&runs, w));
    verdicts.push(criterion_9(&runs, w));

    println!();
    for v in &verdicts {
        println!(
            "criterion {} {:<36} {}  {}",
            v.id,
            v.name,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
