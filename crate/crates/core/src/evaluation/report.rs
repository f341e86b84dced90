use std::fmt::Write as _;

use super::EvalEmbedder;
use crate::corpus::AttackCorpus;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::numerics::ImageTensor;
use crate::perturbation::{apply_to_image, apply_to_prompt, PromptDelta, TextureUAP};
use crate::victim::{PromptEmbedding, QueryLedger, Task, VictimOracle};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSummary {
    pub task: Task,
    pub pairs: usize,
    pub attacked: f64,
    pub clean: f64,
    pub attacked_asr: f64,
    pub clean_asr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub image_id: usize,
    pub prompt_id: usize,
    pub task: Task,
    pub clean_text: String,
    pub attacked_text: String,
    pub clean_similarity: f64,
    pub attacked_similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub victim: String,
    pub target: String,
    pub theta: f64,
    /// In [`Task::ALL`] order.
    pub tasks: Vec<TaskSummary>,
    /// Mean of the four task means.
    pub overall: f64,
    pub clean_overall: f64,
    /// Fraction of evaluated pairs whose attacked similarity reaches `theta`.
    pub asr: f64,
    pub clean_asr: f64,
    pub eval_queries: u64,
    /// Queries spent producing the perturbations, if known.
    pub attack_queries: Option<u64>,
    pub pairs: Vec<PairOutcome>,
}

impl AttackReport {
    pub fn task(&self, task: Task) -> &TaskSummary {
        &self.tasks[task.index()]
    }

    pub fn gain(&self) -> f64 {
        self.overall - self.clean_overall
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "victim {}  target {:?}  theta {}", self.victim, self.target, self.theta);
        let _ = writeln!(
            s,
            "{:<16}{:>10}{:>10}{:>10}{:>10}{:>8}",
            "task", "attacked", "clean", "asr", "clean_asr", "pairs"
        );
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{:<16}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>8}",
                t.task.name(),
                t.attacked,
                t.clean,
                t.attacked_asr,
                t.clean_asr,
                t.pairs
            );
        }
        let _ = writeln!(
            s,
            "{:<16}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>8}",
            "overall",
            self.overall,
            self.clean_overall,
            self.asr,
            self.clean_asr,
            self.pairs.len()
        );
        let _ = write!(s, "eval queries {}", self.eval_queries);
        if let Some(q) = self.attack_queries {
            let _ = write!(s, "  attack queries {q}");
        }
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,attacked,clean,asr,clean_asr,pairs\n");
        for t in &self.tasks {
            let _ = writeln!(
                s,
                "{},{:.9},{:.9},{:.9},{:.9},{}",
                t.task.name(),
                t.attacked,
                t.clean,
                t.attacked_asr,
                t.clean_asr,
                t.pairs
            );
        }
        let _ = writeln!(
            s,
            "overall,{:.9},{:.9},{:.9},{:.9},{}",
            self.overall,
            self.clean_overall,
            self.asr,
            self.clean_asr,
            self.pairs.len()
        );
        s
    }

    pub fn pairs_csv(&self) -> String {
        let mut s = String::from(
            "image,prompt,task,clean_similarity,attacked_similarity,clean_text,attacked_text\n",
        );
        for p in &self.pairs {
            let _ = writeln!(
                s,
                "{},{},{},{:.9},{:.9},\"{}\",\"{}\"",
                p.image_id,
                p.prompt_id,
                p.task.name(),
                p.clean_similarity,
                p.attacked_similarity,
                p.clean_text.replace('"', "\"\""),
                p.attacked_text.replace('"', "\"\"")
            );
        }
        s
    }
}

/// Optional transform applied to every (clean and attacked) image before it
/// reaches the victim.
pub type ImageTransform<'f> = &'f (dyn Fn(&ImageTensor, usize, usize) -> Result<ImageTensor> + Sync);

/// Everything [`evaluate`] needs besides the victim and corpus.
pub struct EvalSetup<'a> {
    pub uap: &'a TextureUAP,
    pub delta: &'a PromptDelta,
    pub target: &'a str,
    pub theta: f64,
    pub ledger: &'a QueryLedger,
    pub exec: &'a Executor,
    pub transform: Option<ImageTransform<'a>>,
}

/// Queries the victim's output text on every held-out pair, clean and
/// attacked (two queries per pair), and scores both against the target.
pub fn evaluate(oracle: &dyn VictimOracle, corpus: &AttackCorpus, setup: &EvalSetup) -> Result<AttackReport> {
    corpus.validate()?;
    let pairs = corpus.heldout_pairs();
    for task in Task::ALL {
        if !pairs.iter().any(|&(_, p)| corpus.prompts[p].task == task) {
            return Err(Error::MissingTask(task.name().to_string()));
        }
    }
    let needed = 2 * pairs.len() as u64;
    if setup.ledger.remaining() < needed {
        return Err(Error::BudgetExhausted {
            used: setup.ledger.used(),
            budget: setup.ledger.budget(),
            requested: needed,
        });
    }
    let embedder = EvalEmbedder::default();
    let target_emb = embedder.embed(setup.target)?;
    let embeddings: Vec<PromptEmbedding> = corpus
        .prompts
        .iter()
        .map(|p| oracle.encode_prompt(&p.text))
        .collect::<Result<_>>()?;
    let score = |text: &str| -> Result<f64> {
        if text == setup.target {
            return Ok(1.0);
        }
        Ok(super::cosine(&embedder.embed(text)?, &target_emb))
    };

    let used_before = setup.ledger.used();
    let outcomes = setup.exec.map(&pairs, |&(i, p)| -> Result<PairOutcome> {
        let image = &corpus.images[i];
        let adv = apply_to_image(image, setup.uap)?;
        let (clean_in, adv_in) = match setup.transform {
            Some(f) => (f(image, i, p)?, f(&adv, i, p)?),
            None => (image.clone(), adv),
        };
        let clean_text = oracle.query_text(&clean_in, &embeddings[p], setup.ledger)?;
        let adv_prompt = apply_to_prompt(&embeddings[p], setup.delta)?;
        let attacked_text = oracle.query_text(&adv_in, &adv_prompt, setup.ledger)?;
        Ok(PairOutcome {
            image_id: i,
            prompt_id: p,
            task: corpus.prompts[p].task,
            clean_similarity: score(&clean_text)?,
            attacked_similarity: score(&attacked_text)?,
            clean_text,
            attacked_text,
        })
    });
    let outcomes: Vec<PairOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

    let frac = |xs: &[f64]| xs.iter().filter(|&&s| s >= setup.theta).count() as f64 / xs.len() as f64;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let tasks: Vec<TaskSummary> = Task::ALL
        .iter()
        .map(|&task| {
            let rows: Vec<&PairOutcome> = outcomes.iter().filter(|o| o.task == task).collect();
            let att: Vec<f64> = rows.iter().map(|o| o.attacked_similarity).collect();
            let cln: Vec<f64> = rows.iter().map(|o| o.clean_similarity).collect();
            TaskSummary {
                task,
                pairs: rows.len(),
                attacked: mean(&att),
                clean: mean(&cln),
                attacked_asr: frac(&att),
                clean_asr: frac(&cln),
            }
        })
        .collect();
    let all_att: Vec<f64> = outcomes.iter().map(|o| o.attacked_similarity).collect();
    let all_cln: Vec<f64> = outcomes.iter().map(|o| o.clean_similarity).collect();
    Ok(AttackReport {
        victim: oracle.label(),
        target: setup.target.to_string(),
        theta: setup.theta,
        overall: tasks.iter().map(|t| t.attacked).sum::<f64>() / tasks.len() as f64,
        clean_overall: tasks.iter().map(|t| t.clean).sum::<f64>() / tasks.len() as f64,
        asr: frac(&all_att),
        clean_asr: frac(&all_cln),
        tasks,
        eval_queries: setup.ledger.used() - used_before,
        attack_queries: None,
        pairs: outcomes,
    })
}

/// Mean target loss over all train pairs (one query per pair).
pub fn train_mean_loss(
    oracle: &dyn VictimOracle,
    corpus: &AttackCorpus,
    uap: &TextureUAP,
    delta: &PromptDelta,
    target: &str,
    ledger: &QueryLedger,
) -> Result<f64> {
    let pairs = corpus.train_pairs();
    let mut total = 0.0;
    for &(i, p) in &pairs {
        let e = apply_to_prompt(&oracle.encode_prompt(&corpus.prompts[p].text)?, delta)?;
        total += oracle.query_loss(&apply_to_image(&corpus.images[i], uap)?, &e, target, ledger)?;
    }
    Ok(total / pairs.len() as f64)
}
