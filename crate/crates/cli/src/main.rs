//! `mmattack`: seeded experiment runner for the joint image/prompt attack on
//! the toy vision-language victim.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmattack_core::config::RunConfig;
use mmattack_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mmattack", version, about = "Universal black-box image+prompt attack experiments")]
struct Cli {
    /// Flat key = value run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "mmattack-out")]
    out: PathBuf,
    /// Overrides the attack seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps parallel workers (results do not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the attack query budget.
    #[arg(long, global = true)]
    budget: Option<u64>,
    /// Perturbation artifact directory to evaluate instead of attacking.
    #[arg(long, global = true)]
    artifact: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Run the attack and evaluate the result on the held-out split.
    Attack,
    /// Evaluate a saved artifact on the held-out split.
    Eval,
    /// Evaluate one perturbation pair across victims and corpora.
    Transfer,
    /// Evaluate under an input-transform defense.
    Defend,
    /// Re-run the attack with each component removed.
    Ablate,
    /// Re-run the attack for every configured tile scale.
    SweepSk,
    /// Compare query-based gradient estimates with the victim's analytic ones.
    OracleCheck,
    /// Write the synthetic corpus to disk.
    GenCorpus,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.attack.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(b) = cli.budget {
        cfg.attack.query_budget = b;
    }
    if let Some(a) = &cli.artifact {
        cfg.artifact = Some(a.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join(commands::SNAPSHOT_FILE), cfg.to_text())?;
    let ctx = commands::Context::new(cfg, cli.out.clone())?;
    match cli.command {
        Command::Attack => commands::attack(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Transfer => commands::transfer(&ctx),
        Command::Defend => commands::defend(&ctx),
        Command::Ablate => commands::ablate(&ctx),
        Command::SweepSk => commands::sweep_sk(&ctx),
        Command::OracleCheck => commands::oracle_check(&ctx),
        Command::GenCorpus => commands::gen_corpus(&ctx),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
