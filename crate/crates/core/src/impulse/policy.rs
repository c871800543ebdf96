use std::fmt;

use serde::Serialize;

use super::ImpulseError;
use crate::dividend::{optimal_policy, DividendSolution};
use crate::model::ModelParams;

/// Pay out everything in excess of the fixed cost once the conditional mean
/// reaches `u_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdPolicy {
    pub u_bar: f64,
    pub c: f64,
    pub lambda: f64,
}

impl ThresholdPolicy {
    /// `u_bar` must exceed `c` (or be `+∞`, which never triggers).
    pub fn new(u_bar: f64, c: f64, lambda: f64) -> Result<Self, ImpulseError> {
        if !(u_bar > c) || u_bar.is_nan() {
            return Err(ImpulseError::BadPolicy(format!("threshold {u_bar} must exceed c = {c}")));
        }
        if !(lambda >= 0.0) {
            return Err(ImpulseError::BadPolicy(format!("lambda = {lambda} must be >= 0")));
        }
        Ok(ThresholdPolicy { u_bar, c, lambda })
    }

    /// `ζ̂(u) = (u − c)/(1 + λ)`.
    pub fn payout(&self, u: f64) -> f64 {
        (u - self.c) / (1.0 + self.lambda)
    }

    /// Impulse to apply at conditional mean `u`, if any.
    pub fn decide(&self, u: f64) -> Option<f64> {
        (u >= self.u_bar && u > self.c).then(|| self.payout(u))
    }
}

/// Stationary and forced intervention rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Policy {
    Never,
    Threshold(ThresholdPolicy),
    /// Liquidate `(m − c)/(1 + λ)` at the first grid time `≥ time` where `m > c`.
    LiquidateAt { time: f64 },
    /// Like `Threshold`, but the payout is made `delay_steps` grid steps after the
    /// threshold is first reached, at the mean observed then.
    DelayedThreshold { policy: ThresholdPolicy, delay_steps: usize },
}

impl Policy {
    /// Parses `optimal | never | threshold:<u> | liquidate-at:<t>`. `optimal` solves
    /// the dividend problem for `p` and fails in the infinite-value case.
    pub fn parse(spec: &str, p: &ModelParams) -> Result<Policy, ImpulseError> {
        let spec = spec.trim();
        let bad = || ImpulseError::BadPolicy(format!("unknown policy {spec:?}"));
        match spec {
            "optimal" => return Ok(Policy::Threshold(optimal_policy(&DividendSolution::solve(p)?))),
            "never" => return Ok(Policy::Never),
            _ => {}
        }
        let (kind, arg) = spec.split_once(':').ok_or_else(bad)?;
        let value: f64 = arg.trim().parse().map_err(|_| bad())?;
        match kind {
            "threshold" => Ok(Policy::Threshold(ThresholdPolicy::new(value, p.c, p.lambda)?)),
            "liquidate-at" if value >= 0.0 => Ok(Policy::LiquidateAt { time: value }),
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        self.to_string()
    }

    pub(super) fn controller(&self) -> Controller {
        Controller { policy: *self, armed_at: None }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Never => write!(f, "never"),
            Policy::Threshold(t) => write!(f, "threshold:{}", t.u_bar),
            Policy::LiquidateAt { time } => write!(f, "liquidate-at:{time}"),
            Policy::DelayedThreshold { policy, delay_steps } => {
                write!(f, "threshold:{}+{delay_steps}steps", policy.u_bar)
            }
        }
    }
}

/// Per-path decision state.
pub(super) struct Controller {
    policy: Policy,
    armed_at: Option<usize>,
}

impl Controller {
    /// Impulse to apply at grid step `k` (time `t`) with conditional mean `m`.
    pub(super) fn decide(&mut self, k: usize, t: f64, m: f64, p: &ModelParams) -> Option<f64> {
        match self.policy {
            Policy::Never => None,
            Policy::Threshold(th) => th.decide(m),
            Policy::LiquidateAt { time } => {
                // Grid times equal to `time` up to roundoff count as due.
                let due = t >= time - 1e-9 * time.max(1.0);
                (due && m > p.c).then(|| (m - p.c) / (1.0 + p.lambda))
            }
            Policy::DelayedThreshold { policy, delay_steps } => {
                if self.armed_at.is_none() && m >= policy.u_bar {
                    self.armed_at = Some(k);
                }
                match self.armed_at {
                    Some(k0) if k >= k0 + delay_steps && m > policy.c => Some(policy.payout(m)),
                    _ => None,
                }
            }
        }
    }

    pub(super) fn fired(&mut self) {
        self.armed_at = None;
    }
}
