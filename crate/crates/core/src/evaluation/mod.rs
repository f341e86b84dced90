//! Scoring of victim outputs against the target text, attack reports,
//! transfer matrices, input-transform defenses and ablations.

mod defense;
mod embedder;
mod harness;
mod report;

pub use defense::{defend, defend_with, DefenseKind, DefenseSpec};
pub use embedder::{cosine, similarity, EvalEmbedder, EVAL_DIM};
pub use harness::{
    ablate, attack_and_evaluate, evaluate_defended, summary_csv, sweep_sk, transfer_eval, AblationMode,
    TransferMatrix, EVAL_BUDGET,
};
pub use report::{evaluate, train_mean_loss, AttackReport, EvalSetup, ImageTransform, PairOutcome, TaskSummary};
