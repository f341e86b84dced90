//! Flat `key = value` run configuration.
//!
//! One option per line, `#` starts a comment, unknown keys are errors. Real
//! values also accept fractions such as `8/255`. [`RunConfig::to_text`]
//! writes every option back out, so a snapshot fully determines a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::evaluation::{AblationMode, DefenseKind, DefenseSpec, EVAL_BUDGET};
use crate::numerics::ScaleMask;
use crate::optimizer::AttackConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub attack: AttackConfig,
    pub victim_seed: u64,
    pub tau: f64,
    pub corpus: CorpusSpec,
    /// Extra victim seeds evaluated by `transfer` (the attacked victim is
    /// always the first row).
    pub transfer_victims: Vec<u64>,
    /// Extra corpus seeds evaluated by `transfer`.
    pub transfer_corpora: Vec<u64>,
    pub defense: DefenseSpec,
    pub ablation_modes: Vec<AblationMode>,
    pub sweep_scales: Vec<usize>,
    pub eval_budget: u64,
    pub workers: usize,
    /// Perturbation artifact directory read by `eval`, `defend` and
    /// `transfer`.
    pub artifact: Option<PathBuf>,
    /// Probe counts and seed count for `oracle-check`.
    pub check_samples: Vec<usize>,
    pub check_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            victim_seed: 1,
            tau: 0.1,
            corpus: CorpusSpec::default(),
            transfer_victims: vec![2],
            transfer_corpora: vec![],
            defense: DefenseSpec::default(),
            ablation_modes: AblationMode::ALL.to_vec(),
            sweep_scales: vec![1, 2, 4, 8],
            eval_budget: EVAL_BUDGET,
            workers: 1,
            artifact: None,
            check_samples: vec![5, 10, 50, 100],
            check_seeds: 100,
        }
    }
}

fn cfg_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

/// Parses a real number or a fraction `a/b`.
pub fn parse_real(s: &str) -> std::result::Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
            if b == 0.0 {
                return Err(format!("{s:?}: division by zero"));
            }
            a / b
        }
        None => s.parse().map_err(|e| format!("{s:?}: {e}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s:?}: not finite"))
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{s:?} is not a boolean")),
    }
}

fn parse_list<T, F>(s: &str, f: F) -> std::result::Result<Vec<T>, String>
where
    F: Fn(&str) -> std::result::Result<T, String>,
{
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| f(x.trim())).collect()
}

fn int<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("{s:?}: {e}"))
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let (mut keep_approx, mut keep_detail, mut weights) = (
            c.attack.mask.keep_approx,
            c.attack.mask.keep_detail.clone(),
            None::<Vec<f64>>,
        );
        let (mut d_kind, mut d_min, mut d_max, mut d_bits, mut d_quality) =
            ("none".to_string(), 0.9, 1.0, 4u32, 75u32);
        for (n, raw) in text.lines().enumerate() {
            let n = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(n, format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let e = |m: String| cfg_err(n, format!("{key}: {m}"));
            let a = &mut c.attack;
            match key {
                "seed" => a.seed = int(value).map_err(e)?,
                "eps_v" => a.eps_v = parse_real(value).map_err(e)?,
                "eps_t" => a.eps_t = parse_real(value).map_err(e)?,
                "alpha_v" => a.alpha_v = parse_real(value).map_err(e)?,
                "alpha_t" => a.alpha_t = parse_real(value).map_err(e)?,
                "lambda" => a.lambda = parse_real(value).map_err(e)?,
                "k" => a.k = int(value).map_err(e)?,
                "batch" => a.batch = int(value).map_err(e)?,
                "s_k" => a.tile_scale = int(value).map_err(e)?,
                "query_budget" => a.query_budget = int(value).map_err(e)?,
                "theta" => a.theta = parse_real(value).map_err(e)?,
                "sigma" => a.sigma = parse_real(value).map_err(e)?,
                "target" => a.target_text = value.to_string(),
                "common_dim" => a.common_dim = int(value).map_err(e)?,
                "oracle" => {
                    a.text_oracle = match value {
                        "loss" => false,
                        "text" => true,
                        _ => return Err(e(format!("expected loss or text, got {value:?}"))),
                    }
                }
                "targeted" => a.targeted = parse_bool(value).map_err(e)?,
                "update_image" => a.update_image = parse_bool(value).map_err(e)?,
                "update_text" => a.update_text = parse_bool(value).map_err(e)?,
                "mask_keep_approx" => keep_approx = parse_bool(value).map_err(e)?,
                "mask_keep_detail" => keep_detail = parse_list(value, parse_bool).map_err(e)?,
                "mask_weights" => weights = Some(parse_list(value, parse_real).map_err(e)?),
                "victim_seed" => c.victim_seed = int(value).map_err(e)?,
                "tau" => c.tau = parse_real(value).map_err(e)?,
                "corpus_seed" => c.corpus.seed = int(value).map_err(e)?,
                "n_images" => c.corpus.n_images = int(value).map_err(e)?,
                "m_prompts" => c.corpus.m_prompts = int(value).map_err(e)?,
                "height" => c.corpus.height = int(value).map_err(e)?,
                "width" => c.corpus.width = int(value).map_err(e)?,
                "channels" => c.corpus.channels = int(value).map_err(e)?,
                "heldout_fraction" => c.corpus.heldout_fraction = parse_real(value).map_err(e)?,
                "transfer_victims" => c.transfer_victims = parse_list(value, int).map_err(e)?,
                "transfer_corpora" => c.transfer_corpora = parse_list(value, int).map_err(e)?,
                "defense" => d_kind = value.to_string(),
                "defense_seed" => c.defense.seed = int(value).map_err(e)?,
                "defense_scale_min" => d_min = parse_real(value).map_err(e)?,
                "defense_scale_max" => d_max = parse_real(value).map_err(e)?,
                "defense_bits" => d_bits = int(value).map_err(e)?,
                "defense_quality" => d_quality = int(value).map_err(e)?,
                "ablation_modes" => {
                    c.ablation_modes = parse_list(value, |m| m.parse().map_err(|x: Error| x.to_string())).map_err(e)?
                }
                "sweep_scales" => c.sweep_scales = parse_list(value, int).map_err(e)?,
                "eval_budget" => c.eval_budget = int(value).map_err(e)?,
                "workers" => c.workers = int(value).map_err(e)?,
                "artifact" => c.artifact = (!value.is_empty()).then(|| PathBuf::from(value)),
                "check_samples" => c.check_samples = parse_list(value, int).map_err(e)?,
                "check_seeds" => c.check_seeds = int(value).map_err(e)?,
                other => return Err(cfg_err(n, format!("unknown key {other:?}"))),
            }
        }
        let weights = weights.unwrap_or_else(|| vec![1.0; keep_detail.len()]);
        c.attack.mask = ScaleMask::new(keep_approx, keep_detail, weights)?;
        c.defense.kind = match d_kind.as_str() {
            "none" => DefenseKind::None,
            "randomization" => DefenseKind::Randomization {
                min_scale: d_min,
                max_scale: d_max,
            },
            "quantize" => DefenseKind::Quantize { bits: d_bits },
            "dct_quantize" => DefenseKind::DctQuantize { quality: d_quality },
            other => return Err(Error::Config(format!("defense: unknown kind {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.defense.validate()?;
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.check_seeds == 0 || self.check_samples.is_empty() || self.check_samples.contains(&0) {
            return Err(Error::Config("check_samples must be nonempty and positive, check_seeds >= 1".into()));
        }
        if let Some(p) = &self.artifact {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let a = &self.attack;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", a.seed.to_string());
        kv("eps_v", a.eps_v.to_string());
        kv("eps_t", a.eps_t.to_string());
        kv("alpha_v", a.alpha_v.to_string());
        kv("alpha_t", a.alpha_t.to_string());
        kv("lambda", a.lambda.to_string());
        kv("k", a.k.to_string());
        kv("batch", a.batch.to_string());
        kv("s_k", a.tile_scale.to_string());
        kv("query_budget", a.query_budget.to_string());
        kv("theta", a.theta.to_string());
        kv("sigma", a.sigma.to_string());
        kv("target", a.target_text.clone());
        kv("common_dim", a.common_dim.to_string());
        kv("oracle", if a.text_oracle { "text" } else { "loss" }.into());
        kv("targeted", a.targeted.to_string());
        kv("update_image", a.update_image.to_string());
        kv("update_text", a.update_text.to_string());
        kv("mask_keep_approx", a.mask.keep_approx.to_string());
        kv("mask_keep_detail", join(&a.mask.keep_detail));
        kv("mask_weights", join(&a.mask.level_weights));
        kv("victim_seed", self.victim_seed.to_string());
        kv("tau", self.tau.to_string());
        kv("corpus_seed", self.corpus.seed.to_string());
        kv("n_images", self.corpus.n_images.to_string());
        kv("m_prompts", self.corpus.m_prompts.to_string());
        kv("height", self.corpus.height.to_string());
        kv("width", self.corpus.width.to_string());
        kv("channels", self.corpus.channels.to_string());
        kv("heldout_fraction", self.corpus.heldout_fraction.to_string());
        kv("transfer_victims", join(&self.transfer_victims));
        kv("transfer_corpora", join(&self.transfer_corpora));
        kv("defense", self.defense.kind.name().into());
        kv("defense_seed", self.defense.seed.to_string());
        match self.defense.kind {
            DefenseKind::Randomization { min_scale, max_scale } => {
                kv("defense_scale_min", min_scale.to_string());
                kv("defense_scale_max", max_scale.to_string());
            }
            DefenseKind::Quantize { bits } => kv("defense_bits", bits.to_string()),
            DefenseKind::DctQuantize { quality } => kv("defense_quality", quality.to_string()),
            DefenseKind::None => {}
        }
        kv("ablation_modes", join(&self.ablation_modes));
        kv("sweep_scales", join(&self.sweep_scales));
        kv("eval_budget", self.eval_budget.to_string());
        kv("workers", self.workers.to_string());
        kv(
            "artifact",
            self.artifact.as_ref().map_or(String::new(), |p| p.display().to_string()),
        );
        kv("check_samples", join(&self.check_samples));
        kv("check_seeds", self.check_seeds.to_string());
        s
    }

    /// SHA-256 of [`RunConfig::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
