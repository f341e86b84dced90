//! The joint black-box attack loop.

mod alignment;
mod attack;

pub use alignment::{Alignment, CrossModalProjector};
pub use attack::{
    joint_step, run_attack, AttackOutcome, AttackState, StepOutcome, TraceRecord, AttackTrace,
};

use crate::error::{Error, Result};
use crate::estimator::{OracleMode, DEFAULT_SAMPLES, DEFAULT_SIGMA};
use crate::numerics::ScaleMask;
use crate::perturbation::check_tile_scale;
use crate::victim::QueryLedger;

pub const DEFAULT_TARGET: &str = "I am sorry";

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub eps_v: f64,
    pub eps_t: f64,
    pub alpha_v: f64,
    pub alpha_t: f64,
    pub lambda: f64,
    /// Probes per gradient estimate.
    pub k: usize,
    pub batch: usize,
    pub tile_scale: usize,
    pub query_budget: u64,
    /// Per-instance success threshold on similarity to the target.
    pub theta: f64,
    /// Smoothing noise of the text-oracle surrogate loss.
    pub sigma: f64,
    pub seed: u64,
    pub target_text: String,
    pub mask: ScaleMask,
    /// Dimension of the shared space used to compare gradient directions.
    pub common_dim: usize,
    pub text_oracle: bool,
    /// `false` ascends the loss of `target_text` instead of descending it.
    pub targeted: bool,
    /// When `false` the image perturbation stays at zero (gradients are still
    /// estimated so the query pattern is unchanged).
    pub update_image: bool,
    pub update_text: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            eps_v: 8.0 / 255.0,
            eps_t: 0.5,
            alpha_v: 0.01,
            alpha_t: 0.005,
            lambda: 0.1,
            k: DEFAULT_SAMPLES,
            batch: 16,
            tile_scale: 4,
            query_budget: QueryLedger::DEFAULT_BUDGET,
            theta: 0.55,
            sigma: DEFAULT_SIGMA,
            seed: 0,
            target_text: DEFAULT_TARGET.to_string(),
            mask: ScaleMask::default(),
            common_dim: 128,
            text_oracle: false,
            targeted: true,
            update_image: true,
            update_text: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps_v", self.eps_v),
            ("eps_t", self.eps_t),
            ("alpha_v", self.alpha_v),
            ("alpha_t", self.alpha_t),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidParameter(format!("theta must be in (0, 1), got {}", self.theta)));
        }
        if self.k == 0 || self.batch == 0 || self.common_dim == 0 {
            return Err(Error::InvalidParameter("k, batch and common_dim must be >= 1".into()));
        }
        if self.query_budget == 0 {
            return Err(Error::InvalidParameter("query budget must be >= 1".into()));
        }
        if self.target_text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        check_tile_scale(self.tile_scale)?;
        self.mask.validate()
    }

    pub fn oracle_mode(&self) -> OracleMode {
        if self.text_oracle {
            OracleMode::Text { sigma: self.sigma }
        } else {
            OracleMode::Loss
        }
    }
}
