//! Simulation and verification toolkit for impulse control of conditional
//! McKean–Vlasov jump diffusions.
//!
//! The crate is organised around the one-dimensional mean-field cash-flow model
//!
//! ```text
//! dX(t) = m(t) (α₀ dt + σ₁ dB₁ + σ₂ dB₂ + ∫ γ₀(ζ) Ñ(dt, dζ)),   m(t) = E[X(t) | F¹_t]
//! ```
//!
//! where `B₁` is common noise and the conditional law is approximated by an
//! interacting particle system:
//!
//! * [`model`]: parameters, the finite-activity jump measure and validation.
//! * [`particles`]: the particle ensemble, seeded noise substreams and the
//!   exact conditional-mean oracle.
//! * [`fokker_planck`]: the function-side generator operators and the weak-form
//!   residual of the conditional stochastic Fokker–Planck equation.
//! * [`impulse`]: impulse controls, controlled trajectories and Monte-Carlo
//!   estimation of the discounted dividend functional.
//! * [`qvi`]: intervention operator, reduced generator and the
//!   quasi-variational-inequality verification report.
//! * [`dividend`]: the closed-form optimal dividend solution.
//! * [`config`]: key-value configuration files and simulation settings.

pub mod config;
pub mod dividend;
pub mod fokker_planck;
pub mod impulse;
pub mod model;
pub mod numfmt;
pub mod particles;
pub mod qvi;

pub use config::{ConfigError, KeyValueConfig, SimConfig};
pub use dividend::{CaseSplit, DividendError, DividendSolution};
pub use fokker_planck::{ResidualStats, TestFunction};
pub use impulse::{
    ControlledTrajectory, ImpulseControl, ImpulseError, PerformanceEstimate, Policy,
    ThresholdPolicy,
};
pub use model::{ExtendedState, LevyMeasureSpec, MarkLaw, Measure, ModelParams, ValidatedModel};
pub use particles::{InitialLaw, NoiseStream, ParticleEnsemble, ParticleError};
pub use qvi::{GridSpec, QviReport, ReducedFunction};
