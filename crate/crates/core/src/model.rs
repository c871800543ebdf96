//! Model coefficients, the finite-activity jump measure and parameter validation.

use std::fmt;
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::particles::ParticleEnsemble;

/// Number of Gauss–Legendre nodes used for jump-mark expectations without a closed form.
pub const QUADRATURE_NODES: usize = 64;

/// Distribution of the relative jump size `γ₀(ζ)`.
///
/// The presets draw the mark and use it directly as the relative jump size, so
/// `γ₀` is the identity on the sampled mark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum MarkLaw {
    None,
    Constant { gamma0: f64 },
    Uniform { low: f64, high: f64 },
}

/// How jump-mark expectations are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JumpIntegration {
    /// Closed form where the mark law admits one, quadrature otherwise.
    #[default]
    Auto,
    /// Always use Gauss–Legendre quadrature.
    Quadrature,
}

impl MarkLaw {
    /// Parses the configuration preset `none | constant:<g> | uniform:<a>,<b>`.
    pub fn parse(preset: &str) -> Option<Self> {
        let preset = preset.trim();
        if preset == "none" {
            return Some(MarkLaw::None);
        }
        let (kind, args) = preset.split_once(':')?;
        match kind.trim() {
            "constant" => Some(MarkLaw::Constant { gamma0: args.trim().parse().ok()? }),
            "uniform" => {
                let (a, b) = args.split_once(',')?;
                Some(MarkLaw::Uniform { low: a.trim().parse().ok()?, high: b.trim().parse().ok()? })
            }
            _ => None,
        }
    }

    pub fn preset(&self) -> String {
        match *self {
            MarkLaw::None => "none".to_string(),
            MarkLaw::Constant { gamma0 } => format!("constant:{gamma0}"),
            MarkLaw::Uniform { low, high } => format!("uniform:{low},{high}"),
        }
    }

    /// Draws one relative jump size.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MarkLaw::None => 0.0,
            MarkLaw::Constant { gamma0 } => gamma0,
            MarkLaw::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }

    /// `E[γ₀]`.
    pub fn mean(&self) -> f64 {
        match *self {
            MarkLaw::None => 0.0,
            MarkLaw::Constant { gamma0 } => gamma0,
            MarkLaw::Uniform { low, high } => 0.5 * (low + high),
        }
    }

    /// `E[γ₀²]`.
    pub fn second_moment(&self) -> f64 {
        match *self {
            MarkLaw::None => 0.0,
            MarkLaw::Constant { gamma0 } => gamma0 * gamma0,
            MarkLaw::Uniform { low, high } => (low * low + low * high + high * high) / 3.0,
        }
    }

    /// Smallest relative jump the law can produce.
    fn infimum(&self) -> f64 {
        match *self {
            MarkLaw::None => 0.0,
            MarkLaw::Constant { gamma0 } => gamma0,
            MarkLaw::Uniform { low, .. } => low,
        }
    }

    /// `E[f(γ₀)]` under the mark law.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F, mode: JumpIntegration) -> f64 {
        match (*self, mode) {
            (MarkLaw::None, _) => 0.0,
            (MarkLaw::Constant { gamma0 }, JumpIntegration::Auto) => f(gamma0),
            (MarkLaw::Constant { gamma0 }, JumpIntegration::Quadrature) => {
                // Degenerate law: integrate the constant integrand over a unit mark interval.
                gauss_legendre().integrate(0.0, 1.0, |_| f(gamma0))
            }
            (MarkLaw::Uniform { low, high }, _) => {
                if high == low {
                    f(low)
                } else {
                    gauss_legendre().integrate(low, high, f) / (high - low)
                }
            }
        }
    }
}

fn gauss_legendre() -> GaussLegendre {
    GaussLegendre::new(NonZeroUsize::new(QUADRATURE_NODES).expect("nonzero"))
}

/// Finite-activity (compound Poisson) jump measure `ν`: total mass `rate` and
/// normalised mark law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevyMeasureSpec {
    pub rate: f64,
    pub marks: MarkLaw,
}

impl LevyMeasureSpec {
    pub fn none() -> Self {
        LevyMeasureSpec { rate: 0.0, marks: MarkLaw::None }
    }

    pub fn new(rate: f64, marks: MarkLaw) -> Self {
        LevyMeasureSpec { rate, marks }
    }

    /// True when the measure produces no jumps at all.
    pub fn is_empty(&self) -> bool {
        self.rate == 0.0 || self.marks == MarkLaw::None
    }
}

/// Total mass `‖ν‖` of the jump measure.
pub fn levy_mass(levy: &LevyMeasureSpec) -> f64 {
    levy.rate
}

/// Coefficients of the mean-field dividend model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub alpha0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    /// Proportional transaction cost λ.
    pub lambda: f64,
    /// Fixed transaction cost c.
    pub c: f64,
    pub levy: LevyMeasureSpec,
}

impl ModelParams {
    /// Baseline coefficients `α₀=0.02, σ₁=0.2, σ₂=0.1, ρ=0.05, λ=0, c=1`, no jumps.
    pub fn baseline() -> Self {
        ModelParams {
            alpha0: 0.02,
            sigma1: 0.2,
            sigma2: 0.1,
            rho: 0.05,
            lambda: 0.0,
            c: 1.0,
            levy: LevyMeasureSpec::none(),
        }
    }

    pub fn validate(self) -> Result<ValidatedModel, ModelError> {
        validate_params(self)
    }
}

/// A violated parameter constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct InvalidParam {
    pub field: &'static str,
    pub constraint: &'static str,
    pub value: f64,
}

impl fmt::Display for InvalidParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {} violates {}", self.field, self.value, self.constraint)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameters: {}", .0.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidParam(Vec<InvalidParam>),
}

impl ModelError {
    pub fn fields(&self) -> Vec<&'static str> {
        match self {
            ModelError::InvalidParam(v) => v.iter().map(|p| p.field).collect(),
        }
    }
}

/// Parameters that have passed [`validate_params`]. Immutable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidatedModel(ModelParams);

impl ValidatedModel {
    pub fn params(&self) -> &ModelParams {
        &self.0
    }

    pub fn into_inner(self) -> ModelParams {
        self.0
    }
}

impl std::ops::Deref for ValidatedModel {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

/// Checks every parameter invariant and reports all violations at once.
///
/// `σ₂ = 0` is accepted: the idiosyncratic volatility never enters the closed
/// form and the degenerate case is useful for exact reductions.
pub fn validate_params(p: ModelParams) -> Result<ValidatedModel, ModelError> {
    let mut bad = Vec::new();
    let mut check = |ok: bool, field, constraint, value| {
        if !ok {
            bad.push(InvalidParam { field, constraint, value });
        }
    };
    check(p.alpha0.is_finite(), "alpha0", "finite", p.alpha0);
    check(p.sigma1.is_finite() && p.sigma1 != 0.0, "sigma1", "sigma1 != 0", p.sigma1);
    check(p.sigma2.is_finite(), "sigma2", "finite", p.sigma2);
    check(p.rho.is_finite() && p.rho > 0.0, "rho", "rho > 0", p.rho);
    check(p.lambda.is_finite() && p.lambda >= 0.0, "lambda", "lambda >= 0", p.lambda);
    check(p.c.is_finite() && p.c > 0.0, "c_fixed", "c > 0", p.c);
    let levy = p.levy;
    check(levy.rate.is_finite() && levy.rate >= 0.0, "jump_rate", "rate >= 0", levy.rate);
    match levy.marks {
        MarkLaw::None => {
            check(levy.rate == 0.0, "jump_rate", "rate = 0 when no mark law is given", levy.rate)
        }
        MarkLaw::Constant { gamma0 } => {
            check(gamma0.is_finite(), "jump_gamma0", "finite", gamma0);
        }
        MarkLaw::Uniform { low, high } => {
            check(low.is_finite() && high.is_finite(), "jump_gamma0", "finite", low);
            check(low <= high, "jump_gamma0", "low <= high", high);
        }
    }
    let inf = levy.marks.infimum();
    check(inf >= -1.0, "jump_gamma0", "gamma0 >= -1", inf);
    if bad.is_empty() {
        Ok(ValidatedModel(p))
    } else {
        Err(ModelError::InvalidParam(bad))
    }
}

/// Representation of the conditional law inside an [`ExtendedState`].
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    PointMass(f64),
    Ensemble(ParticleEnsemble),
}

impl Measure {
    /// First moment `⟨μ, q⟩`.
    pub fn mean(&self) -> f64 {
        match self {
            Measure::PointMass(x) => *x,
            Measure::Ensemble(e) => e.mean(),
        }
    }
}

/// The Markov state `(s, x, μ)`: clock, representative state and conditional law.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub s: f64,
    pub x: f64,
    pub mu: Measure,
}

impl ExtendedState {
    pub fn new(s: f64, x: f64, mu: Measure) -> Self {
        debug_assert!(s >= 0.0);
        ExtendedState { s, x, mu }
    }

    pub fn point_mass(s: f64, x: f64) -> Self {
        ExtendedState { s, x, mu: Measure::PointMass(x) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_without_jumps_is_valid() {
        let p = ModelParams { sigma2: 0.1, ..ModelParams::baseline() };
        assert!(validate_params(p).is_ok());
    }

    #[test]
    fn zero_common_volatility_rejected() {
        let err = validate_params(ModelParams { sigma1: 0.0, ..ModelParams::baseline() }).unwrap_err();
        assert_eq!(err.fields(), vec!["sigma1"]);
    }

    #[test]
    fn zero_fixed_cost_rejected() {
        let err = validate_params(ModelParams { c: 0.0, ..ModelParams::baseline() }).unwrap_err();
        assert_eq!(err.fields(), vec!["c_fixed"]);
    }

    #[test]
    fn every_violation_is_listed() {
        let p = ModelParams {
            sigma1: 0.0,
            rho: -1.0,
            lambda: -0.5,
            c: 0.0,
            levy: LevyMeasureSpec::new(1.0, MarkLaw::Constant { gamma0: -2.0 }),
            ..ModelParams::baseline()
        };
        let err = validate_params(p).unwrap_err();
        assert_eq!(err.fields(), vec!["sigma1", "rho", "lambda", "c_fixed", "jump_gamma0"]);
        assert!(err.to_string().contains("gamma0 >= -1"));
    }

    #[test]
    fn zero_idiosyncratic_volatility_allowed() {
        assert!(validate_params(ModelParams { sigma2: 0.0, ..ModelParams::baseline() }).is_ok());
    }

    #[test]
    fn levy_mass_is_rate() {
        assert_eq!(levy_mass(&LevyMeasureSpec::none()), 0.0);
        assert_eq!(levy_mass(&LevyMeasureSpec::new(0.3, MarkLaw::Constant { gamma0: 0.1 })), 0.3);
        let a = LevyMeasureSpec::new(2.5, MarkLaw::Constant { gamma0: -0.5 });
        let b = LevyMeasureSpec::new(2.5, MarkLaw::Uniform { low: -1.0, high: 3.0 });
        assert_eq!(levy_mass(&a), 2.5);
        assert_eq!(levy_mass(&a), levy_mass(&b));
    }

    #[test]
    fn presets_parse() {
        assert_eq!(MarkLaw::parse("none"), Some(MarkLaw::None));
        assert_eq!(MarkLaw::parse("constant:-0.25"), Some(MarkLaw::Constant { gamma0: -0.25 }));
        assert_eq!(
            MarkLaw::parse("uniform:-0.5, 0.5"),
            Some(MarkLaw::Uniform { low: -0.5, high: 0.5 })
        );
        assert_eq!(MarkLaw::parse("gaussian:1"), None);
        assert_eq!(MarkLaw::parse("uniform:1"), None);
    }

    #[test]
    fn quadrature_matches_uniform_moments() {
        let law = MarkLaw::Uniform { low: -0.4, high: 0.7 };
        let m1 = law.expect(|g| g, JumpIntegration::Auto);
        let m2 = law.expect(|g| g * g, JumpIntegration::Auto);
        assert!((m1 - law.mean()).abs() < 1e-14);
        assert!((m2 - law.second_moment()).abs() < 1e-14);
        let c = MarkLaw::Constant { gamma0: 0.3 };
        let q = c.expect(|g| (g * 2.0).exp(), JumpIntegration::Quadrature);
        assert!((q - 0.6f64.exp()).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn validation_is_idempotent(
            alpha0 in -0.5f64..0.5,
            sigma1 in 0.01f64..1.0,
            sigma2 in 0.0f64..1.0,
            rho in 0.001f64..1.0,
            lambda in 0.0f64..2.0,
            c in 0.01f64..5.0,
            rate in 0.0f64..3.0,
            g in -1.0f64..2.0,
        ) {
            let p = ModelParams {
                alpha0, sigma1, sigma2, rho, lambda, c,
                levy: LevyMeasureSpec::new(rate, MarkLaw::Constant { gamma0: g }),
            };
            let v = validate_params(p).unwrap();
            let again = validate_params(*v.params()).unwrap();
            proptest::prop_assert_eq!(v, again);
        }
    }
}
