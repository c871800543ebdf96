//! Interacting-particle approximation of the conditional law `μ_t = L(X(t) | F¹_t)`.
//!
//! All particles of one path share the common increment `ΔB₁`; each particle has its
//! own idiosyncratic Brownian increment and compound-Poisson jumps. The mean-field
//! coupling enters only through the empirical first moment, frozen at the start of
//! each Euler–Maruyama step.

mod noise;

use std::io::{self, Write};

use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use noise::{CommonIncrements, NoiseStream};

use crate::model::{ModelParams, ValidatedModel};
use crate::numfmt::fmt_num;

/// Ensembles at least this large are stepped in parallel.
const PAR_MIN_PARTICLES: usize = 2048;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParticleError {
    #[error("particle count must be >= 1, got {0}")]
    BadCount(usize),
    #[error("time step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("particle {index} became non-finite at t = {t}")]
    NonFinite { index: usize, t: f64 },
    #[error("initial law is invalid: {0}")]
    BadInitialLaw(String),
}

/// Law of the initial state `X(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitialLaw {
    PointMass(f64),
    Normal { mean: f64, sd: f64 },
}

/// `N` equally weighted particles at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    positions: Vec<f64>,
    t: f64,
}

impl ParticleEnsemble {
    pub fn new(positions: Vec<f64>, t: f64) -> Result<Self, ParticleError> {
        if positions.is_empty() {
            return Err(ParticleError::BadCount(0));
        }
        if let Some(index) = positions.iter().position(|x| !x.is_finite()) {
            return Err(ParticleError::NonFinite { index, t });
        }
        Ok(ParticleEnsemble { positions, t })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Empirical moment `⟨μ̂, g⟩ = (1/N) Σ g(Xᵢ)`, summed in index order.
    pub fn moment<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        self.positions.iter().map(|&x| g(x)).sum::<f64>() / self.positions.len() as f64
    }

    /// Empirical conditional mean `⟨μ̂, q⟩`.
    pub fn mean(&self) -> f64 {
        self.moment(|x| x)
    }

    /// Pushforward of the empirical measure under `shift`.
    pub fn shifted<F: Fn(f64) -> f64>(&self, shift: F) -> ParticleEnsemble {
        ParticleEnsemble { positions: self.positions.iter().map(|&x| shift(x)).collect(), t: self.t }
    }

    /// One explicit Euler–Maruyama step of length `dt`:
    ///
    /// `Xᵢ ← Xᵢ + m (α₀ dt + σ₁ ΔB₁ + σ₂ ΔB₂ᵢ + Jᵢ)`, with `m` the pre-step mean and
    /// `Jᵢ` the compensated compound-Poisson increment of particle `i`.
    /// `step_index` selects the noise substream.
    pub fn step(
        &mut self,
        model: &ValidatedModel,
        dt: f64,
        db1: f64,
        stream: &NoiseStream,
        step_index: u64,
    ) -> Result<(), ParticleError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ParticleError::BadStep(dt));
        }
        let p: &ModelParams = model.params();
        let m = self.mean();
        let common = p.alpha0 * dt + p.sigma1 * db1;
        let jumps = !p.levy.is_empty();
        if p.sigma2 == 0.0 && !jumps {
            // No idiosyncratic randomness: every particle receives the same increment.
            let inc = m * common;
            self.positions.iter_mut().for_each(|x| *x += inc);
        } else {
            let sqrt_dt = dt.sqrt();
            let poisson = if jumps { Some(poisson(p.levy.rate * dt)?) } else { None };
            let compensator = p.levy.rate * dt * p.levy.marks.mean();
            let marks = p.levy.marks;
            let sigma2 = p.sigma2;
            let update = |(i, x): (usize, &mut f64)| {
                let mut rng = stream.particle_rng(i as u64, step_index);
                let z: f64 = StandardNormal.sample(&mut rng);
                let mut jump = 0.0;
                if let Some(pois) = &poisson {
                    let count = pois.sample(&mut rng) as u64;
                    for _ in 0..count {
                        jump += marks.sample(&mut rng);
                    }
                    jump -= compensator;
                }
                *x += m * (common + sigma2 * sqrt_dt * z + jump);
            };
            if self.positions.len() >= PAR_MIN_PARTICLES {
                self.positions.par_iter_mut().enumerate().for_each(update);
            } else {
                self.positions.iter_mut().enumerate().for_each(update);
            }
        }
        self.t += dt;
        match self.positions.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(ParticleError::NonFinite { index, t: self.t }),
            None => Ok(()),
        }
    }
}

fn poisson(mean: f64) -> Result<Poisson<f64>, ParticleError> {
    Poisson::new(mean).map_err(|_| ParticleError::BadStep(mean))
}

/// Draws `n` i.i.d. particles from `initial_law` at `t = 0`.
pub fn init_ensemble(
    n: usize,
    initial_law: InitialLaw,
    stream: &NoiseStream,
) -> Result<ParticleEnsemble, ParticleError> {
    if n == 0 {
        return Err(ParticleError::BadCount(0));
    }
    let positions = match initial_law {
        InitialLaw::PointMass(x0) => vec![x0; n],
        InitialLaw::Normal { mean, sd } => {
            let normal = Normal::new(mean, sd)
                .map_err(|e| ParticleError::BadInitialLaw(e.to_string()))?;
            (0..n).map(|i| normal.sample(&mut stream.init_rng(i as u64))).collect()
        }
    };
    ParticleEnsemble::new(positions, 0.0)
}

/// `⟨μ̂, g⟩`.
pub fn conditional_moment<G: Fn(f64) -> f64>(e: &ParticleEnsemble, g: G) -> f64 {
    e.moment(g)
}

/// Pushforward `μ^Γ`: the intervention law jump and the γ-shift both use this.
pub fn shift_measure<F: Fn(f64) -> f64>(e: &ParticleEnsemble, shift: F) -> ParticleEnsemble {
    e.shifted(shift)
}

/// Exact conditional mean `m(t) = x₀ exp((α₀ − σ₁²/2) t + σ₁ B₁(t))` on the grid
/// `t_k = k dt`, driven by the same increments `ΔB₁` given to [`ParticleEnsemble::step`].
/// Returns `b1_increments.len() + 1` values.
pub fn conditional_mean_oracle(x0: f64, params: &ModelParams, b1_increments: &[f64], dt: f64) -> Vec<f64> {
    let drift = params.alpha0 - 0.5 * params.sigma1 * params.sigma1;
    let mut out = Vec::with_capacity(b1_increments.len() + 1);
    out.push(x0);
    let mut b1 = 0.0;
    for (k, db) in b1_increments.iter().enumerate() {
        b1 += db;
        let t = (k + 1) as f64 * dt;
        out.push(x0 * (drift * t + params.sigma1 * b1).exp());
    }
    out
}

/// Ensemble-mean path together with the exact oracle on the same common noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPath {
    pub path_index: u64,
    pub n_particles: usize,
    pub t: Vec<f64>,
    pub m_hat: Vec<f64>,
    pub m_oracle: Vec<f64>,
}

impl MeanPath {
    /// Root-mean-square gap between ensemble mean and oracle over the grid.
    pub fn rms_error(&self) -> f64 {
        let ss: f64 = self.m_hat.iter().zip(&self.m_oracle).map(|(a, b)| (a - b) * (a - b)).sum();
        (ss / self.m_hat.len() as f64).sqrt()
    }
}

/// Simulates the uncontrolled ensemble for `n_steps` steps and records its mean
/// next to [`conditional_mean_oracle`]. Requires a point-mass initial law.
pub fn simulate_mean_path(
    model: &ValidatedModel,
    n_particles: usize,
    x0: f64,
    dt: f64,
    n_steps: usize,
    stream: &NoiseStream,
) -> Result<MeanPath, ParticleError> {
    let mut e = init_ensemble(n_particles, InitialLaw::PointMass(x0), stream)?;
    let mut t = Vec::with_capacity(n_steps + 1);
    let mut m_hat = Vec::with_capacity(n_steps + 1);
    let mut incs = Vec::with_capacity(n_steps);
    t.push(0.0);
    m_hat.push(e.mean());
    let mut common = stream.common_increments(dt);
    for k in 0..n_steps {
        let db1 = common.next().expect("endless");
        e.step(model, dt, db1, stream, k as u64)?;
        incs.push(db1);
        t.push((k + 1) as f64 * dt);
        m_hat.push(e.mean());
    }
    let m_oracle = conditional_mean_oracle(x0, model.params(), &incs, dt);
    Ok(MeanPath { path_index: stream.path_index, n_particles, t, m_hat, m_oracle })
}

pub const PATH_CSV_HEADER: &str = "t,m_hat,m_oracle,n_particles,path_index";

/// Writes path rows with columns `t, m_hat, m_oracle, n_particles, path_index`.
pub fn write_path_csv<W: Write>(w: &mut W, paths: &[MeanPath]) -> io::Result<()> {
    writeln!(w, "{PATH_CSV_HEADER}")?;
    for p in paths {
        for k in 0..p.t.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_num(p.t[k]),
                fmt_num(p.m_hat[k]),
                fmt_num(p.m_oracle[k]),
                p.n_particles,
                p.path_index
            )?;
        }
    }
    Ok(())
}
