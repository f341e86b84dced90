use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use super::{defend_with, evaluate, AttackReport, DefenseSpec, EvalSetup};
use crate::corpus::AttackCorpus;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::numerics::{ImageTensor, RngStream};
use crate::optimizer::{run_attack, AttackConfig, AttackOutcome};
use crate::perturbation::{PromptDelta, TextureUAP, TILE_SCALES};
use crate::victim::{QueryLedger, VictimOracle};

/// Evaluation ledger budget used by the harness helpers.
pub const EVAL_BUDGET: u64 = 1_000_000;

/// Evaluates under an input-transform defense. The transform is seeded per
/// pair, so the clean and attacked image of a pair see the same draw.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_defended(
    oracle: &dyn VictimOracle,
    corpus: &AttackCorpus,
    uap: &TextureUAP,
    delta: &PromptDelta,
    target: &str,
    theta: f64,
    defense: &DefenseSpec,
    ledger: &QueryLedger,
    exec: &Executor,
) -> Result<AttackReport> {
    defense.validate()?;
    let root = RngStream::new(defense.seed, "defense");
    let transform = |im: &ImageTensor, i: usize, p: usize| defend_with(im, defense, &mut root.derive(format!("{i}/{p}")));
    evaluate(
        oracle,
        corpus,
        &EvalSetup {
            uap,
            delta,
            target,
            theta,
            ledger,
            exec,
            transform: Some(&transform),
        },
    )
}

/// Reports of one perturbation pair evaluated on every (victim, corpus)
/// combination.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    pub victims: Vec<String>,
    pub corpora: Vec<String>,
    /// `reports[row][col]`: victim `row` on corpus `col`.
    pub reports: Vec<Vec<AttackReport>>,
}

impl TransferMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.victims.len(), self.corpora.len())
    }

    fn csv(&self, cell: impl Fn(&AttackReport) -> f64) -> String {
        let mut s = String::from("victim");
        for c in &self.corpora {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (v, row) in self.victims.iter().zip(&self.reports) {
            s.push_str(v);
            for r in row {
                let _ = write!(s, ",{:.9}", cell(r));
            }
            s.push('\n');
        }
        s
    }

    /// Attacked overall similarity per cell.
    pub fn overall_csv(&self) -> String {
        self.csv(|r| r.overall)
    }

    pub fn clean_csv(&self) -> String {
        self.csv(|r| r.clean_overall)
    }

    pub fn gain_csv(&self) -> String {
        self.csv(AttackReport::gain)
    }
}

/// Evaluates `(uap, delta)` on every victim/corpus combination. Each cell
/// uses its own evaluation ledger.
#[allow(clippy::too_many_arguments)]
pub fn transfer_eval(
    uap: &TextureUAP,
    delta: &PromptDelta,
    victims: &[&dyn VictimOracle],
    corpora: &[(String, &AttackCorpus)],
    target: &str,
    theta: f64,
    eval_budget: u64,
    exec: &Executor,
) -> Result<TransferMatrix> {
    if victims.is_empty() || corpora.is_empty() {
        return Err(Error::InvalidParameter("transfer needs at least one victim and one corpus".into()));
    }
    let mut reports = Vec::with_capacity(victims.len());
    for v in victims {
        let mut row = Vec::with_capacity(corpora.len());
        for (_, corpus) in corpora {
            let ledger = QueryLedger::new(eval_budget);
            row.push(evaluate(
                *v,
                corpus,
                &EvalSetup {
                    uap,
                    delta,
                    target,
                    theta,
                    ledger: &ledger,
                    exec,
                    transform: None,
                },
            )?);
        }
        reports.push(row);
    }
    Ok(TransferMatrix {
        victims: victims.iter().map(|v| v.label()).collect(),
        corpora: corpora.iter().map(|(n, _)| n.clone()).collect(),
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationMode {
    Full,
    /// Prompt delta frozen at zero.
    NoText,
    /// Image perturbation frozen at zero.
    NoImage,
    /// Cross-modal coupling disabled (`lambda = 0`).
    NoJoint,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [Self::Full, Self::NoText, Self::NoImage, Self::NoJoint];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoText => "no_text",
            Self::NoImage => "no_image",
            Self::NoJoint => "no_joint",
        }
    }

    /// `config` with this mode's component removed.
    pub fn apply(self, config: &AttackConfig) -> AttackConfig {
        let mut c = config.clone();
        match self {
            Self::Full => {}
            Self::NoText => c.update_text = false,
            Self::NoImage => c.update_image = false,
            Self::NoJoint => c.lambda = 0.0,
        }
        c
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ablation mode {s:?}")))
    }
}

/// Attack plus held-out evaluation on fresh ledgers.
pub fn attack_and_evaluate(
    oracle: &dyn VictimOracle,
    corpus: &AttackCorpus,
    config: &AttackConfig,
    eval_budget: u64,
    exec: &Executor,
) -> Result<(AttackOutcome, AttackReport)> {
    let ledger = QueryLedger::new(config.query_budget);
    let outcome = run_attack(oracle, corpus, config, &ledger, exec)?;
    let eval_ledger = QueryLedger::new(eval_budget);
    let mut report = evaluate(
        oracle,
        corpus,
        &EvalSetup {
            uap: &outcome.uap,
            delta: &outcome.delta,
            target: &config.target_text,
            theta: config.theta,
            ledger: &eval_ledger,
            exec,
            transform: None,
        },
    )?;
    report.attack_queries = Some(outcome.queries_used);
    Ok((outcome, report))
}

/// Runs the attack once per mode with identical seeds and budgets.
pub fn ablate(
    oracle: &dyn VictimOracle,
    corpus: &AttackCorpus,
    config: &AttackConfig,
    modes: &[AblationMode],
    eval_budget: u64,
    exec: &Executor,
) -> Result<Vec<(AblationMode, AttackReport)>> {
    modes
        .iter()
        .map(|&m| Ok((m, attack_and_evaluate(oracle, corpus, &m.apply(config), eval_budget, exec)?.1)))
        .collect()
}

/// Runs the attack once per tile scale.
pub fn sweep_sk(
    oracle: &dyn VictimOracle,
    corpus: &AttackCorpus,
    config: &AttackConfig,
    scales: &[usize],
    eval_budget: u64,
    exec: &Executor,
) -> Result<Vec<(usize, AttackReport)>> {
    scales
        .iter()
        .map(|&s| {
            if !TILE_SCALES.contains(&s) {
                return Err(Error::InvalidParameter(format!("tile scale must be one of {TILE_SCALES:?}, got {s}")));
            }
            let cfg = AttackConfig { tile_scale: s, ..config.clone() };
            Ok((s, attack_and_evaluate(oracle, corpus, &cfg, eval_budget, exec)?.1))
        })
        .collect()
}

/// One summary row per labelled report.
pub fn summary_csv<K: fmt::Display>(key: &str, rows: &[(K, AttackReport)]) -> String {
    let mut s = format!(
        "{key},classification,captioning,vqa_general,vqa_specific,overall,clean_overall,asr,clean_asr,attack_queries\n"
    );
    for (k, r) in rows {
        let _ = write!(s, "{k}");
        for t in &r.tasks {
            let _ = write!(s, ",{:.9}", t.attacked);
        }
        let _ = writeln!(
            s,
            ",{:.9},{:.9},{:.9},{:.9},{}",
            r.overall,
            r.clean_overall,
            r.asr,
            r.clean_asr,
            r.attack_queries.map_or(String::new(), |q| q.to_string())
        );
    }
    s
}
