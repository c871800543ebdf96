//! Impulse controls, controlled trajectories and Monte-Carlo estimation of
//!
//! ```text
//! J(s, x, μ) = E[ Σ_{τ_k < τ_S} e^{−ρ(s+τ_k)} ζ_k ]
//! ```
//!
//! An intervention of size `ζ` moves every particle by `x ↦ x − c − (1+λ)ζ`, so the
//! conditional law jumps together with the state. Interventions happen only at grid
//! times, starting with `t = 0`. Bankruptcy `τ_S` is the first grid time at which
//! the conditional mean is `≤ 0`.

mod policy;

use std::io::{self, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use policy::{Policy, ThresholdPolicy};

use crate::config::SimConfig;
use crate::dividend::DividendError;
use crate::model::{ExtendedState, Measure, ModelParams, ValidatedModel};
use crate::numfmt::fmt_num;
use crate::particles::{init_ensemble, InitialLaw, NoiseStream, ParticleError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImpulseError {
    #[error("impulse zeta = {zeta} is not admissible at conditional mean {mean}")]
    Inadmissible { zeta: f64, mean: f64 },
    #[error("need at least 2 paths for a standard error, got {0}")]
    BadCount(usize),
    #[error("impulse times must be nondecreasing and sizes nonnegative")]
    BadControl,
    #[error("bad policy: {0}")]
    BadPolicy(String),
    #[error(transparent)]
    Dividend(#[from] DividendError),
    #[error(transparent)]
    Particle(#[from] ParticleError),
}

/// Realised impulse control: intervention times and sizes.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImpulseControl {
    interventions: Vec<(f64, f64)>,
}

impl ImpulseControl {
    pub fn new(interventions: Vec<(f64, f64)>) -> Result<Self, ImpulseError> {
        let ordered = interventions.windows(2).all(|w| w[0].0 <= w[1].0);
        let sizes = interventions.iter().all(|&(t, z)| t >= 0.0 && z >= 0.0);
        if ordered && sizes {
            Ok(ImpulseControl { interventions })
        } else {
            Err(ImpulseError::BadControl)
        }
    }

    pub fn interventions(&self) -> &[(f64, f64)] {
        &self.interventions
    }

    pub fn len(&self) -> usize {
        self.interventions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interventions.is_empty()
    }
}

/// State jump `Γ`, intervention profit `K` and the admissibility predicate.
pub trait InterventionSpec {
    fn gamma(&self, x: f64, zeta: f64) -> f64;
    fn reward(&self, y: &ExtendedState, zeta: f64) -> f64;
    fn admissible(&self, y: &ExtendedState, zeta: f64) -> bool;
}

/// Dividend payout: `Γ(x, ζ) = x − c − (1+λ)ζ`, `K = e^{−ρs}ζ`,
/// admissible iff `0 ≤ ζ ≤ (⟨μ,q⟩ − c)/(1+λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DividendIntervention {
    pub rho: f64,
    pub c: f64,
    pub lambda: f64,
}

impl DividendIntervention {
    pub fn new(p: &ModelParams) -> Self {
        DividendIntervention { rho: p.rho, c: p.c, lambda: p.lambda }
    }

    pub fn max_payout(&self, mean: f64) -> f64 {
        (mean - self.c) / (1.0 + self.lambda)
    }
}

impl InterventionSpec for DividendIntervention {
    fn gamma(&self, x: f64, zeta: f64) -> f64 {
        x - self.c - (1.0 + self.lambda) * zeta
    }

    fn reward(&self, y: &ExtendedState, zeta: f64) -> f64 {
        (-self.rho * y.s).exp() * zeta
    }

    fn admissible(&self, y: &ExtendedState, zeta: f64) -> bool {
        zeta >= 0.0 && zeta <= self.max_payout(y.mu.mean())
    }
}

/// Applies `Γ` to the state and, particlewise, to the conditional law.
pub fn apply_intervention(
    y: &ExtendedState,
    zeta: f64,
    spec: &impl InterventionSpec,
) -> Result<(ExtendedState, f64), ImpulseError> {
    if !spec.admissible(y, zeta) {
        return Err(ImpulseError::Inadmissible { zeta, mean: y.mu.mean() });
    }
    let mu = match &y.mu {
        Measure::PointMass(m) => Measure::PointMass(spec.gamma(*m, zeta)),
        Measure::Ensemble(e) => Measure::Ensemble(e.shifted(|x| spec.gamma(x, zeta))),
    };
    let next = ExtendedState { s: y.s, x: spec.gamma(y.x, zeta), mu };
    Ok((next, spec.reward(y, zeta)))
}

/// One realised intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub tau: f64,
    pub zeta: f64,
    pub m_before: f64,
    pub m_after: f64,
    pub discounted_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlledTrajectory {
    pub grid: Vec<f64>,
    /// Conditional mean on the grid; after an intervention, the post-intervention value.
    pub m_path: Vec<f64>,
    pub events: Vec<Event>,
    /// Bankruptcy time, `+∞` if the mean stayed positive up to the horizon.
    pub tau_s: f64,
    pub payoff: f64,
}

impl ControlledTrajectory {
    pub fn control(&self) -> ImpulseControl {
        ImpulseControl { interventions: self.events.iter().map(|e| (e.tau, e.zeta)).collect() }
    }
}

/// First grid time with `m ≤ 0`, or `+∞`.
pub fn tau_s(trajectory: &ControlledTrajectory) -> f64 {
    first_nonpositive(&trajectory.grid, &trajectory.m_path)
}

fn first_nonpositive(grid: &[f64], m_path: &[f64]) -> f64 {
    grid.iter().zip(m_path).find(|(_, m)| **m <= 0.0).map_or(f64::INFINITY, |(t, _)| *t)
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Optional running profit `f(m)` and bequest `g(m(τ_S))` added to the dividend
/// payoff. Both default to zero.
#[derive(Clone, Default)]
pub struct PerformanceFunctional {
    pub running: Option<ScalarFn>,
    pub bequest: Option<ScalarFn>,
}

impl std::fmt::Debug for PerformanceFunctional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerformanceFunctional")
            .field("running", &self.running.is_some())
            .field("bequest", &self.bequest.is_some())
            .finish()
    }
}

struct PathResult {
    m_path: Vec<f64>,
    events: Vec<Event>,
    tau_s: f64,
    payoff: f64,
}

/// Relative size below which a post-intervention mean counts as exactly zero.
const ZERO_SNAP: f64 = 1e-12;

fn simulate(
    model: &ValidatedModel,
    policy: &Policy,
    sim: &SimConfig,
    stream: &NoiseStream,
    functional: &PerformanceFunctional,
    record: bool,
) -> Result<PathResult, ImpulseError> {
    let p = model.params();
    let spec = DividendIntervention::new(p);
    let dt = sim.dt;
    let n_steps = sim.n_steps();
    let discount = |t: f64| (-p.rho * (sim.start_time + t)).exp();

    let mut e = init_ensemble(sim.n_particles, InitialLaw::PointMass(sim.x0), stream)?;
    let mut ctl = policy.controller();
    let mut m_path = Vec::new();
    let mut events = Vec::new();
    let mut payoff = 0.0;
    let mut tau_s = f64::INFINITY;
    let mut m_stop = f64::NAN;
    let mut common = stream.common_increments(dt);

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let mut m = e.mean();
        if m <= 0.0 {
            tau_s = t;
            m_stop = m;
            if record {
                m_path.push(m);
            }
            break;
        }
        if let Some(zeta) = ctl.decide(k, t, m, p) {
            let y = ExtendedState::new(sim.start_time + t, m, Measure::PointMass(m));
            if spec.admissible(&y, zeta) {
                e = e.shifted(|x| spec.gamma(x, zeta));
                let mut m_after = e.mean();
                if m_after.abs() <= ZERO_SNAP * m.abs().max(1.0) {
                    m_after = 0.0;
                }
                let reward = spec.reward(&y, zeta);
                payoff += reward;
                events.push(Event { tau: t, zeta, m_before: m, m_after, discounted_reward: reward });
                m = m_after;
                ctl.fired();
                if m <= 0.0 {
                    tau_s = t;
                    m_stop = m;
                    if record {
                        m_path.push(m);
                    }
                    break;
                }
            }
        }
        if record {
            m_path.push(m);
        }
        if k == n_steps {
            break;
        }
        if let Some(f) = &functional.running {
            payoff += discount(t) * f(m) * dt;
        }
        let db1 = common.next().expect("endless");
        e.step(model, dt, db1, stream, k as u64)?;
    }
    if let (Some(g), true) = (&functional.bequest, tau_s.is_finite()) {
        payoff += discount(tau_s) * g(m_stop);
    }
    Ok(PathResult { m_path, events, tau_s, payoff })
}

/// Simulates one controlled path and keeps the full mean path.
pub fn run_controlled_path(
    model: &ValidatedModel,
    policy: &Policy,
    sim: &SimConfig,
    stream: &NoiseStream,
) -> Result<ControlledTrajectory, ImpulseError> {
    let r = simulate(model, policy, sim, stream, &PerformanceFunctional::default(), true)?;
    let grid = (0..r.m_path.len()).map(|k| k as f64 * sim.dt).collect();
    Ok(ControlledTrajectory { grid, m_path: r.m_path, events: r.events, tau_s: r.tau_s, payoff: r.payoff })
}

/// Monte-Carlo estimate of the performance functional.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub policy: String,
    #[serde(skip)]
    pub payoffs: Vec<f64>,
    #[serde(skip)]
    pub events: Vec<Vec<Event>>,
    #[serde(skip)]
    pub tau_s: Vec<f64>,
}

pub const EVENTS_CSV_HEADER: &str = "path_index,tau_k,zeta_k,m_before,m_after,discounted_reward";

impl PerformanceEstimate {
    /// Summary fields `{mean, stderr, n_paths, dt, policy}`.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain struct serialises")
    }

    pub fn write_events_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(w, "{EVENTS_CSV_HEADER}")?;
        for (i, evs) in self.events.iter().enumerate() {
            for ev in evs {
                writeln!(
                    w,
                    "{i},{},{},{},{},{}",
                    fmt_num(ev.tau),
                    fmt_num(ev.zeta),
                    fmt_num(ev.m_before),
                    fmt_num(ev.m_after),
                    fmt_num(ev.discounted_reward)
                )?;
            }
        }
        Ok(())
    }
}

/// Sample mean and standard error, summed in order.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `n_paths` independent paths (substream `path_index = 0..n_paths` of
/// `sim.seed`) in parallel and aggregates them in path order.
pub fn estimate_performance(
    model: &ValidatedModel,
    policy: &Policy,
    sim: &SimConfig,
    n_paths: usize,
) -> Result<PerformanceEstimate, ImpulseError> {
    estimate_performance_with(model, policy, sim, n_paths, &PerformanceFunctional::default())
}

pub fn estimate_performance_with(
    model: &ValidatedModel,
    policy: &Policy,
    sim: &SimConfig,
    n_paths: usize,
    functional: &PerformanceFunctional,
) -> Result<PerformanceEstimate, ImpulseError> {
    if n_paths < 2 {
        return Err(ImpulseError::BadCount(n_paths));
    }
    let results: Vec<PathResult> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| simulate(model, policy, sim, &NoiseStream::new(sim.seed, i), functional, false))
        .collect::<Result<_, _>>()?;
    let payoffs: Vec<f64> = results.iter().map(|r| r.payoff).collect();
    let (mean, stderr) = mean_stderr(&payoffs);
    Ok(PerformanceEstimate {
        mean,
        stderr,
        n_paths,
        dt: sim.dt,
        policy: policy.label(),
        payoffs,
        tau_s: results.iter().map(|r| r.tau_s).collect(),
        events: results.into_iter().map(|r| r.events).collect(),
    })
}
