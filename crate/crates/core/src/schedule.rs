//! Stage gating and the time-varying loss weights.
//!
//! Epochs are 1-based. `λ` ramps from 0 at the end of stage I with a logistic
//! curve over the remaining budget; `β` ramps linearly once the cross-domain
//! contrastive term switches on.

use std::fmt;

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    /// Total epochs `E`.
    pub epochs: usize,
    /// Epoch `E'` at which stage I ends and the adversarial term starts.
    pub stage1_end: usize,
    /// Epoch `E''` at which the cross-domain contrastive term starts.
    pub crosscl_start: usize,
    /// Sharpness `γ` of the λ ramp.
    pub gamma: f64,
    /// Slope `α` of the β ramp.
    pub alpha: f64,
}

impl ScheduleConfig {
    pub fn new(epochs: usize, stage1_end: usize, crosscl_start: usize) -> Self {
        ScheduleConfig {
            epochs,
            stage1_end,
            crosscl_start,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
        }
    }

    /// Every violated invariant, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.stage1_end == 0 {
            v.push(format!("stage1_end (E') must be > 0, got {}", self.stage1_end));
        }
        if self.crosscl_start < self.stage1_end {
            v.push(format!(
                "crosscl_start (E'') must satisfy E'' >= E', got E''={} < E'={}",
                self.crosscl_start, self.stage1_end
            ));
        }
        if self.epochs < self.crosscl_start {
            v.push(format!(
                "epochs (E) must satisfy E >= E'', got E={} < E''={}",
                self.epochs, self.crosscl_start
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            v.push(format!("gamma must be > 0, got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            v.push(format!("alpha must be > 0, got {}", self.alpha));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    fn check_epoch(&self, e: usize) -> Result<()> {
        if e > self.epochs {
            Err(Error::EpochOutOfRange {
                epoch: e,
                total: self.epochs,
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    SourceOnly,
    Adversarial,
    CrossDomain,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::SourceOnly => "source_only",
            Stage::Adversarial => "adversarial",
            Stage::CrossDomain => "cross_domain",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "source_only" => Some(Stage::SourceOnly),
            "adversarial" => Some(Stage::Adversarial),
            "cross_domain" => Some(Stage::CrossDomain),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepWeights {
    pub lambda: f64,
    pub beta: f64,
    pub stage: Stage,
}

/// Adversarial weight `λ(e)`.
pub fn lambda_at(e: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.check_epoch(e)?;
    if e < cfg.stage1_end {
        return Ok(0.0);
    }
    let span = cfg.epochs - cfg.stage1_end;
    let p = if span == 0 {
        0.0
    } else {
        ((e - cfg.stage1_end) as f64 / span as f64).clamp(0.0, 1.0)
    };
    Ok(lambda_of_progress(p, cfg.gamma))
}

/// `2 / (1 + exp(-γp)) - 1`.
pub fn lambda_of_progress(p: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * p).exp()) - 1.0
}

/// Cross-domain contrastive weight `β(e)`.
pub fn beta_at(e: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.check_epoch(e)?;
    if e <= cfg.crosscl_start {
        return Ok(0.0);
    }
    if cfg.crosscl_start == 0 {
        return Ok(1.0);
    }
    let ramp = cfg.alpha * (e - cfg.crosscl_start) as f64 / cfg.crosscl_start as f64;
    Ok(ramp.min(1.0))
}

pub fn stage_of(e: usize, cfg: &ScheduleConfig) -> Stage {
    if e < cfg.stage1_end {
        Stage::SourceOnly
    } else if e < cfg.crosscl_start {
        Stage::Adversarial
    } else {
        Stage::CrossDomain
    }
}

/// λ, β and stage for epoch `e`; β is forced to 0 outside the cross-domain stage.
pub fn weights_at(e: usize, cfg: &ScheduleConfig) -> Result<StepWeights> {
    let stage = stage_of(e, cfg);
    let lambda = lambda_at(e, cfg)?;
    let beta = if stage == Stage::CrossDomain { beta_at(e, cfg)? } else { 0.0 };
    Ok(StepWeights { lambda, beta, stage })
}

/// Per-loss scalar values of one step. `None` means not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ce: Option<f64>,
    pub supcl: Option<f64>,
    pub adv: Option<f64>,
    pub crosscl: Option<f64>,
}

/// Stage-dependent total objective:
///
/// - source-only: `L_SupCL + L_CE`
/// - adversarial: `L_SupCL + L_CE + λ·L_Adv`
/// - cross-domain: `L_CE + λ·L_Adv + β·L_CrossCL`
///
/// A part whose weight is exactly zero may be omitted.
pub fn total_loss(parts: &LossParts, w: &StepWeights) -> Result<f64> {
    let need = |v: Option<f64>, name: &'static str| v.ok_or(Error::MissingLoss(name));
    let weighted = |v: Option<f64>, weight: f64, name: &'static str| -> Result<f64> {
        if weight == 0.0 {
            Ok(0.0)
        } else {
            Ok(weight * need(v, name)?)
        }
    };
    let ce = need(parts.ce, "L_CE")?;
    Ok(match w.stage {
        Stage::SourceOnly => need(parts.supcl, "L_SupCL")? + ce,
        Stage::Adversarial => need(parts.supcl, "L_SupCL")? + ce + weighted(parts.adv, w.lambda, "L_Adv")?,
        Stage::CrossDomain => {
            ce + weighted(parts.adv, w.lambda, "L_Adv")? + weighted(parts.crosscl, w.beta, "L_CrossCL")?
        }
    })
}
