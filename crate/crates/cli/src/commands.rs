use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmattack_core::artifact::{load_artifact, save_artifact, Artifact, ArtifactMeta};
use mmattack_core::config::RunConfig;
use mmattack_core::corpus::{gen_corpus as build_corpus, AttackCorpus, CorpusSpec};
use mmattack_core::diagnostics;
use mmattack_core::evaluation::{
    self, evaluate, evaluate_defended, summary_csv, train_mean_loss, transfer_eval, AttackReport, DefenseKind,
    DefenseSpec, EvalSetup,
};
use mmattack_core::exec::Executor;
use mmattack_core::numerics::write_mmt;
use mmattack_core::optimizer::run_attack;
use mmattack_core::perturbation::{PromptDelta, TextureUAP};
use mmattack_core::victim::{CaptionBank, QueryLedger, ToyVictim, VictimOracle, OUTPUT_DIM};
use mmattack_core::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const ARTIFACT_DIR: &str = "artifact";

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub exec: Executor,
    pub victim: ToyVictim,
    pub corpus: AttackCorpus,
}

fn toy_victim(seed: u64, cfg: &RunConfig) -> Result<ToyVictim> {
    let c = &cfg.corpus;
    let v = ToyVictim::with_input_shape(seed, cfg.tau, CaptionBank::default_bank(OUTPUT_DIM), (c.height, c.width, c.channels))?;
    if !v.bank().contains(&cfg.attack.target_text) {
        return Err(Error::TargetNotInBank(cfg.attack.target_text.clone()));
    }
    Ok(v)
}

/// Hash of the options that shape the artifact: attack settings, victim and
/// corpus. Evaluation-only options are left out.
fn result_hash(cfg: &RunConfig) -> String {
    RunConfig {
        attack: cfg.attack.clone(),
        victim_seed: cfg.victim_seed,
        tau: cfg.tau,
        corpus: cfg.corpus.clone(),
        ..RunConfig::default()
    }
    .hash()
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self> {
        let exec = Executor::new(cfg.workers)?;
        let victim = toy_victim(cfg.victim_seed, &cfg)?;
        let corpus = build_corpus(&cfg.corpus)?;
        Ok(Self {
            cfg,
            out,
            exec,
            victim,
            corpus,
        })
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.out.join(name), contents)?;
        Ok(())
    }

    fn eval_ledger(&self) -> QueryLedger {
        QueryLedger::new(self.cfg.eval_budget)
    }

    fn evaluate_on(&self, victim: &dyn VictimOracle, corpus: &AttackCorpus, uap: &TextureUAP, delta: &PromptDelta) -> Result<AttackReport> {
        let ledger = self.eval_ledger();
        evaluate(
            victim,
            corpus,
            &EvalSetup {
                uap,
                delta,
                target: &self.cfg.attack.target_text,
                theta: self.cfg.attack.theta,
                ledger: &ledger,
                exec: &self.exec,
                transform: None,
            },
        )
    }

    fn write_report(&self, stem: &str, report: &AttackReport) -> Result<()> {
        self.write(&format!("{stem}.txt"), report.to_text())?;
        self.write(&format!("{stem}.csv"), report.to_csv())?;
        self.write(&format!("{stem}_pairs.csv"), report.pairs_csv())
    }

    /// Runs the attack, saving the artifact, trace and train losses.
    fn train(&self) -> Result<Artifact> {
        let cfg = &self.cfg;
        let ledger = QueryLedger::new(cfg.attack.query_budget);
        let outcome = run_attack(&self.victim, &self.corpus, &cfg.attack, &ledger, &self.exec)?;
        self.write("trace.csv", outcome.trace.to_csv())?;
        // diagnostic queries go to their own ledger, outside the attack budget
        let diag = QueryLedger::unlimited();
        let t = &cfg.attack.target_text;
        let before = train_mean_loss(&self.victim, &self.corpus, &outcome.initial.uap, &outcome.initial.delta, t, &diag)?;
        let after = train_mean_loss(&self.victim, &self.corpus, &outcome.uap, &outcome.delta, t, &diag)?;
        self.write("train_loss.txt", format!("initial = {before:.9}\nfinal = {after:.9}\n"))?;
        self.write("victim.manifest", self.victim.to_manifest())?;
        let artifact = Artifact {
            uap: outcome.uap,
            delta: outcome.delta,
            meta: ArtifactMeta {
                seed: cfg.attack.seed,
                victim_seed: cfg.victim_seed,
                queries_used: outcome.queries_used,
                config_hash: result_hash(cfg),
            },
        };
        save_artifact(&self.out.join(ARTIFACT_DIR), &artifact)?;
        println!(
            "attack: {} iterations, {} of {} queries, train loss {before:.4} -> {after:.4}",
            outcome.trace.records.len(),
            outcome.queries_used,
            cfg.attack.query_budget
        );
        Ok(artifact)
    }

    /// The configured artifact if any, otherwise a fresh attack.
    fn perturbations(&self) -> Result<Artifact> {
        match &self.cfg.artifact {
            Some(dir) => {
                let a = load_artifact(dir)?;
                if a.meta.config_hash != result_hash(&self.cfg) {
                    eprintln!(
                        "warning: artifact {} was produced under a different configuration",
                        dir.display()
                    );
                }
                Ok(a)
            }
            None => self.train(),
        }
    }
}

fn summary(label: &str, r: &AttackReport) {
    println!(
        "{label}: overall {:.4} (clean {:.4}, gain {:+.4})  asr {:.4} (clean {:.4})",
        r.overall,
        r.clean_overall,
        r.gain(),
        r.asr,
        r.clean_asr
    );
}

pub fn attack(ctx: &Context) -> Result<()> {
    let a = ctx.train()?;
    let mut report = ctx.evaluate_on(&ctx.victim, &ctx.corpus, &a.uap, &a.delta)?;
    report.attack_queries = Some(a.meta.queries_used);
    ctx.write_report("report", &report)?;
    summary("held-out", &report);
    Ok(())
}

pub fn eval(ctx: &Context) -> Result<()> {
    let dir = ctx
        .cfg
        .artifact
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs an artifact (--artifact DIR or artifact = DIR)".into()))?;
    let a = ctx.perturbations()?;
    if a.meta.victim_seed != ctx.cfg.victim_seed {
        eprintln!(
            "note: artifact {} was trained on victim seed {}, evaluating seed {}",
            dir.display(),
            a.meta.victim_seed,
            ctx.cfg.victim_seed
        );
    }
    let mut report = ctx.evaluate_on(&ctx.victim, &ctx.corpus, &a.uap, &a.delta)?;
    report.attack_queries = Some(a.meta.queries_used);
    ctx.write_report("report", &report)?;
    summary("held-out", &report);
    Ok(())
}

pub fn transfer(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let a = ctx.perturbations()?;
    let mut victims = vec![ctx.victim.clone()];
    for &s in &cfg.transfer_victims {
        victims.push(toy_victim(s, cfg)?);
    }
    let mut corpora = vec![(format!("corpus-{}", cfg.corpus.seed), ctx.corpus.clone())];
    for &s in &cfg.transfer_corpora {
        let spec = CorpusSpec { seed: s, ..cfg.corpus.clone() };
        corpora.push((format!("corpus-{s}"), build_corpus(&spec)?));
    }
    let vrefs: Vec<&dyn VictimOracle> = victims.iter().map(|v| v as &dyn VictimOracle).collect();
    let crefs: Vec<(String, &AttackCorpus)> = corpora.iter().map(|(n, c)| (n.clone(), c)).collect();
    let m = transfer_eval(
        &a.uap,
        &a.delta,
        &vrefs,
        &crefs,
        &cfg.attack.target_text,
        cfg.attack.theta,
        cfg.eval_budget,
        &ctx.exec,
    )?;
    ctx.write("transfer_overall.csv", m.overall_csv())?;
    ctx.write("transfer_clean.csv", m.clean_csv())?;
    ctx.write("transfer_gain.csv", m.gain_csv())?;
    let mut text = String::new();
    for (v, row) in m.victims.iter().zip(&m.reports) {
        for (c, r) in m.corpora.iter().zip(row) {
            let _ = writeln!(text, "== {v} on {c}\n{}", r.to_text());
            summary(&format!("{v} on {c}"), r);
        }
    }
    ctx.write("transfer.txt", text)
}

pub fn defend(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let a = ctx.perturbations()?;
    let mut specs = vec![DefenseSpec {
        kind: DefenseKind::None,
        seed: cfg.defense.seed,
    }];
    if cfg.defense.kind != DefenseKind::None {
        specs.push(cfg.defense);
    }
    let mut rows = Vec::new();
    let mut text = String::new();
    for spec in specs {
        let ledger = ctx.eval_ledger();
        let mut r = evaluate_defended(
            &ctx.victim,
            &ctx.corpus,
            &a.uap,
            &a.delta,
            &cfg.attack.target_text,
            cfg.attack.theta,
            &spec,
            &ledger,
            &ctx.exec,
        )?;
        r.attack_queries = Some(a.meta.queries_used);
        summary(spec.kind.name(), &r);
        let _ = writeln!(text, "== defense {}\n{}", spec.kind, r.to_text());
        rows.push((spec.kind.name(), r));
    }
    ctx.write("defense.csv", summary_csv("defense", &rows))?;
    ctx.write("defense.txt", text)
}

fn write_rows<K: std::fmt::Display>(ctx: &Context, stem: &str, key: &str, rows: &[(K, AttackReport)]) -> Result<()> {
    let mut text = String::new();
    for (k, r) in rows {
        let _ = writeln!(text, "== {key} {k}\n{}", r.to_text());
        summary(&format!("{key} {k}"), r);
    }
    ctx.write(&format!("{stem}.csv"), summary_csv(key, rows))?;
    ctx.write(&format!("{stem}.txt"), text)
}

pub fn ablate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let rows = evaluation::ablate(&ctx.victim, &ctx.corpus, &cfg.attack, &cfg.ablation_modes, cfg.eval_budget, &ctx.exec)?;
    write_rows(ctx, "ablation", "mode", &rows)
}

pub fn sweep_sk(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let rows = evaluation::sweep_sk(&ctx.victim, &ctx.corpus, &cfg.attack, &cfg.sweep_scales, cfg.eval_budget, &ctx.exec)?;
    write_rows(ctx, "sweep_sk", "s_k", &rows)?;
    if let Some((best, r)) = rows.iter().max_by(|a, b| a.1.overall.total_cmp(&b.1.overall)) {
        println!("best s_k = {best} (overall {:.4})", r.overall);
    }
    Ok(())
}

pub fn oracle_check(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let check = diagnostics::oracle_check(&ctx.victim, &ctx.corpus, &cfg.attack, &cfg.check_samples, cfg.check_seeds, &ctx.exec)?;
    for r in &check.rows {
        println!("K = {:>4}: image cosine {:.4}  text cosine {:.4}", r.k, r.image_cosine, r.text_cosine);
    }
    ctx.write("oracle_check.csv", check.to_csv())
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn gen_corpus(ctx: &Context) -> Result<()> {
    let dir = ctx.out.join("corpus");
    write_corpus(&dir, &ctx.corpus)?;
    println!(
        "wrote {} images and {} prompts to {}",
        ctx.corpus.images.len(),
        ctx.corpus.prompts.len(),
        dir.display()
    );
    Ok(())
}

/// `images/NNNN.mmt`, `prompts.tsv` (`task<TAB>text`) and `split.txt`.
fn write_corpus(dir: &Path, corpus: &AttackCorpus) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    for (i, im) in corpus.images.iter().enumerate() {
        write_mmt(dir.join("images").join(format!("{i:04}.mmt")), im)?;
    }
    let mut prompts = String::new();
    for p in &corpus.prompts {
        let _ = writeln!(prompts, "{}\t{}", p.task, p.text);
    }
    std::fs::write(dir.join("prompts.tsv"), prompts)?;
    let split = format!(
        "train_images = {}\nheldout_images = {}\ntrain_prompts = {}\nheldout_prompts = {}\n",
        join(&corpus.train_images),
        join(&corpus.heldout_images),
        join(&corpus.train_prompts),
        join(&corpus.heldout_prompts)
    );
    std::fs::write(dir.join("split.txt"), split)?;
    Ok(())
}
