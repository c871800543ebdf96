//! Closed-form optimal dividend policy under fixed and proportional transaction costs.
//!
//! With `u = E[X(t) | F¹_t]` the value is `e^{−ρs} C₁ u^{γ₁}` below the free
//! boundary `ū` and `e^{−ρs} (u − c)/(1 + λ)` above it, where `γ₁ > 1` is the
//! positive root of `F(γ) = −ρ + α₀γ + ½σ₁²γ(γ − 1)`,
//! `ū = γ₁c/(γ₁ − 1)` and `C₁ = (ū − c)/(1 + λ) · ū^{−γ₁}`.
//! The optimal control waits until `u ≥ ū` and then pays out everything,
//! which brings the conditional mean to zero and stops the system.

use serde::Serialize;
use thiserror::Error;

use crate::impulse::ThresholdPolicy;
use crate::model::{levy_mass, ModelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DividendError {
    #[error("value is +infinity (alpha0 > rho)")]
    Infinite,
    #[error("boundary case alpha0 = rho = {0} is not covered")]
    BoundaryCase(f64),
    #[error("no root with gamma1 > 1: {0}")]
    NoRoot(String),
    #[error("barrier {barrier} is below the starting level {x}")]
    BadBarrier { x: f64, barrier: f64 },
}

/// Which regime the drift falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CaseSplit {
    /// `α₀ < ρ`: finite value, threshold policy is optimal.
    Finite,
    /// `α₀ > ρ`: waiting longer always pays, the value is `+∞`.
    Infinite,
}

pub fn check_case_split(p: &ModelParams) -> Result<CaseSplit, DividendError> {
    if p.alpha0 < p.rho {
        Ok(CaseSplit::Finite)
    } else if p.alpha0 > p.rho {
        Ok(CaseSplit::Infinite)
    } else {
        Err(DividendError::BoundaryCase(p.alpha0))
    }
}

/// `F(γ) = −ρ + α₀γ + ½σ₁²γ(γ − 1)`.
pub fn characteristic(p: &ModelParams, gamma: f64) -> f64 {
    -p.rho + p.alpha0 * gamma + 0.5 * p.sigma1 * p.sigma1 * gamma * (gamma - 1.0)
}

/// Both roots `(γ₁, γ₂)` of `½σ₁²γ² + (α₀ − ½σ₁²)γ − ρ = 0`, computed without
/// cancellation. Requires `σ₁ ≠ 0` and `ρ > 0`, which make the roots real with
/// opposite signs.
pub fn characteristic_roots(p: &ModelParams) -> Result<(f64, f64), DividendError> {
    if p.sigma1 == 0.0 || !p.sigma1.is_finite() {
        return Err(DividendError::NoRoot("sigma1 must be nonzero".into()));
    }
    if !(p.rho > 0.0) {
        return Err(DividendError::NoRoot("rho must be positive".into()));
    }
    let a = 0.5 * p.sigma1 * p.sigma1;
    let b = p.alpha0 - a;
    let c = -p.rho;
    let disc = (b * b - 4.0 * a * c).sqrt();
    let q = -0.5 * (b + b.signum() * disc);
    // b == 0 gives signum 1 (f64::signum(0.0) = 1), q = −disc/2 < 0.
    let (r1, r2) = (q / a, c / q);
    Ok(if r1 > r2 { (r1, r2) } else { (r2, r1) })
}

/// The positive characteristic root `γ₁`. Requires `α₀ < ρ`, which puts it above 1.
pub fn solve_gamma1(p: &ModelParams) -> Result<f64, DividendError> {
    if !(p.alpha0 < p.rho) {
        return Err(DividendError::NoRoot(format!(
            "alpha0 = {} must be below rho = {}",
            p.alpha0, p.rho
        )));
    }
    let (g1, _) = characteristic_roots(p)?;
    if g1 > 1.0 {
        Ok(g1)
    } else {
        Err(DividendError::NoRoot(format!("positive root {g1} is not above 1")))
    }
}

/// Free boundary `ū` and coefficient `C₁` from the smooth-fit system.
pub fn thresholds(p: &ModelParams, gamma1: f64) -> (f64, f64) {
    debug_assert!(gamma1 > 1.0);
    let u_bar = gamma1 * p.c / (gamma1 - 1.0);
    let c1 = (u_bar - p.c) / (1.0 + p.lambda) * u_bar.powf(-gamma1);
    (u_bar, c1)
}

/// Residuals of the two smooth-fit equations
/// `C₁ū^{γ₁} = (ū − c)/(1 + λ)` and `C₁γ₁ū^{γ₁−1} = 1/(1 + λ)`.
pub fn smooth_fit_residuals(p: &ModelParams, gamma1: f64, u_bar: f64, c1: f64) -> (f64, f64) {
    let value = c1 * u_bar.powf(gamma1) - (u_bar - p.c) / (1.0 + p.lambda);
    let slope = c1 * gamma1 * u_bar.powf(gamma1 - 1.0) - 1.0 / (1.0 + p.lambda);
    (value, slope)
}

/// Solved optimal dividend problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DividendSolution {
    pub gamma1: f64,
    /// Negative root, kept for diagnostics. Its coefficient `C₂` is zero because the
    /// value stays bounded near `u = 0`.
    pub gamma2: f64,
    pub u_bar: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    pub params: ModelParams,
}

impl DividendSolution {
    /// Case split, characteristic root and thresholds in one go.
    pub fn solve(p: &ModelParams) -> Result<Self, DividendError> {
        match check_case_split(p)? {
            CaseSplit::Infinite => return Err(DividendError::Infinite),
            CaseSplit::Finite => {}
        }
        let (_, gamma2) = characteristic_roots(p)?;
        let gamma1 = solve_gamma1(p)?;
        let (u_bar, c1) = thresholds(p, gamma1);
        Ok(DividendSolution { gamma1, gamma2, u_bar, c1, c2: 0.0, params: *p })
    }

    /// Same solution with `C₁` multiplied by `factor` (for perturbation checks).
    pub fn with_scaled_c1(&self, factor: f64) -> Self {
        DividendSolution { c1: self.c1 * factor, ..*self }
    }

    /// `ψ(u)`: the value at clock `s = 0`. Zero for `u ≤ 0` (bankrupt).
    pub fn psi(&self, u: f64) -> f64 {
        if u <= 0.0 {
            0.0
        } else if u < self.u_bar {
            self.c1 * u.powf(self.gamma1)
        } else {
            (u - self.params.c) / (1.0 + self.params.lambda)
        }
    }

    pub fn psi_d1(&self, u: f64) -> f64 {
        if u <= 0.0 {
            0.0
        } else if u < self.u_bar {
            self.c1 * self.gamma1 * u.powf(self.gamma1 - 1.0)
        } else {
            1.0 / (1.0 + self.params.lambda)
        }
    }

    pub fn psi_d2(&self, u: f64) -> f64 {
        if u > 0.0 && u < self.u_bar {
            self.c1 * self.gamma1 * (self.gamma1 - 1.0) * u.powf(self.gamma1 - 2.0)
        } else {
            0.0
        }
    }

    /// Jump-mass bound `(ρ + ‖ν‖)/(α₀ + ‖ν‖)`; `+∞` when the denominator is not positive.
    pub fn condition_vi_bound(&self) -> f64 {
        let nu = levy_mass(&self.params.levy);
        let den = self.params.alpha0 + nu;
        if den > 0.0 {
            (self.params.rho + nu) / den
        } else {
            f64::INFINITY
        }
    }
}

/// `Φ(s, u) = e^{−ρs} ψ(u)`.
pub fn value_phi(s: f64, u: f64, sol: &DividendSolution) -> f64 {
    (-sol.params.rho * s).exp() * sol.psi(u)
}

/// Which branch of `Φ` applies at `u`.
pub fn branch(u: f64, sol: &DividendSolution) -> &'static str {
    if u < sol.u_bar {
        "continuation"
    } else {
        "intervention"
    }
}

/// Wait while `u < ū`, then pay out `(u − c)/(1 + λ)`.
pub fn optimal_policy(sol: &DividendSolution) -> ThresholdPolicy {
    ThresholdPolicy::new(sol.u_bar, sol.params.c, sol.params.lambda)
        .expect("solved threshold lies above the fixed cost")
}

/// `E[e^{−ρτ_b}] = (x/b)^{γ₁}` for the first time `τ_b` the conditional mean
/// `dm = m(α₀dt + σ₁dB₁)`, `m(0) = x`, reaches `b ≥ x`.
pub fn hitting_laplace_oracle(x: f64, b: f64, sol: &DividendSolution) -> Result<f64, DividendError> {
    if x > b {
        return Err(DividendError::BadBarrier { x, barrier: b });
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    Ok((x / b).powf(sol.gamma1))
}

/// Tabulates `Φ(0, u)` on `n` equally spaced points of `(0, u_max]`.
pub fn phi_table(sol: &DividendSolution, u_max: f64, n: usize) -> Vec<(f64, f64, &'static str)> {
    (1..=n)
        .map(|i| {
            let u = u_max * i as f64 / n as f64;
            (u, value_phi(0.0, u, sol), branch(u, sol))
        })
        .collect()
}
