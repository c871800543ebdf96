//! Function-side generator operators of the conditional stochastic Fokker–Planck
//! equation and its weak-form residual on particle trajectories.
//!
//! For a test function `g` and the empirical measure `μ̂` with mean `m`:
//!
//! ```text
//! A₀g(x) = α₀ m g'(x) + ½(σ₁² + σ₂²) m² g''(x) + rate · E_ζ[g(x + γ₀ m) − g(x) − γ₀ m g'(x)]
//! A₁g(x) = σ₁ m g'(x)
//! ```
//!
//! The conditional law solves the equation in the sense of distributions, so a
//! trajectory is certified by checking the per-step residual
//! `⟨μ̂_{t+Δ}, g⟩ − ⟨μ̂_t, g⟩ − ⟨μ̂_t, A₀g⟩Δ − ⟨μ̂_t, A₁g⟩ΔB₁` against zero.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JumpIntegration, ModelParams, ValidatedModel};
use crate::particles::{init_ensemble, InitialLaw, MeanPath, NoiseStream, ParticleEnsemble, ParticleError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FpError {
    #[error("trajectory has {ensembles} ensembles for {increments} increments; expected one more ensemble than increments")]
    GridMismatch { ensembles: usize, increments: usize },
    #[error("unknown test function {0:?} (expected q, q2 or bump:<scale>)")]
    UnknownTestFunction(String),
    #[error("bad experiment setup: {0}")]
    BadSetup(String),
    #[error(transparent)]
    Particle(#[from] ParticleError),
}

/// Smooth test function with analytic first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    /// `q(x) = x`.
    Linear,
    /// `q²(x) = x²`.
    Square,
    /// Bounded bump `exp(−x²/(2 s²))`.
    Bump { scale: f64 },
}

impl TestFunction {
    pub fn parse(name: &str) -> Result<Self, FpError> {
        match name.trim() {
            "q" => Ok(TestFunction::Linear),
            "q2" => Ok(TestFunction::Square),
            other => other
                .strip_prefix("bump:")
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|s| *s > 0.0)
                .map(|scale| TestFunction::Bump { scale })
                .ok_or_else(|| FpError::UnknownTestFunction(other.to_string())),
        }
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Linear => x,
            TestFunction::Square => x * x,
            TestFunction::Bump { scale } => (-0.5 * (x / scale).powi(2)).exp(),
        }
    }

    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Linear => 1.0,
            TestFunction::Square => 2.0 * x,
            TestFunction::Bump { scale } => -x / (scale * scale) * self.value(x),
        }
    }

    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        match *self {
            TestFunction::Linear => 0.0,
            TestFunction::Square => 2.0,
            TestFunction::Bump { scale } => {
                let s2 = scale * scale;
                (x * x / (s2 * s2) - 1.0 / s2) * self.value(x)
            }
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Linear => write!(f, "q"),
            TestFunction::Square => write!(f, "q2"),
            TestFunction::Bump { scale } => write!(f, "bump:{scale}"),
        }
    }
}

/// `A₀g(x)` for the mean-field coefficients frozen at conditional mean `m`.
pub fn a0_pointwise(g: TestFunction, x: f64, m: f64, p: &ModelParams, mode: JumpIntegration) -> f64 {
    let diffusion = 0.5 * (p.sigma1 * p.sigma1 + p.sigma2 * p.sigma2) * m * m;
    let mut out = p.alpha0 * m * g.d1(x) + diffusion * g.d2(x);
    if !p.levy.is_empty() {
        let gx = g.value(x);
        let dgx = g.d1(x);
        out += p.levy.rate * p.levy.marks.expect(|y| g.value(x + y * m) - gx - y * m * dgx, mode);
    }
    out
}

/// `A₁g(x) = σ₁ m g'(x)`.
pub fn a1_pointwise(g: TestFunction, x: f64, m: f64, p: &ModelParams) -> f64 {
    p.sigma1 * m * g.d1(x)
}

/// `⟨μ̂, A₀g⟩`.
pub fn apply_a0(g: TestFunction, e: &ParticleEnsemble, p: &ModelParams, mode: JumpIntegration) -> f64 {
    let m = e.mean();
    e.moment(|x| a0_pointwise(g, x, m, p, mode))
}

/// `⟨μ̂, A₁g⟩`.
pub fn apply_a1(g: TestFunction, e: &ParticleEnsemble, p: &ModelParams) -> f64 {
    let m = e.mean();
    e.moment(|x| a1_pointwise(g, x, m, p))
}

/// Weak-form residual of one observation interval.
pub fn step_residual(
    g: TestFunction,
    before: &ParticleEnsemble,
    after: &ParticleEnsemble,
    dt: f64,
    db1: f64,
    p: &ModelParams,
) -> f64 {
    let jump_mode = JumpIntegration::Auto;
    after.moment(|x| g.value(x)) - before.moment(|x| g.value(x))
        - apply_a0(g, before, p, jump_mode) * dt
        - apply_a1(g, before, p) * db1
}

/// Residuals `r_k` along a stored trajectory. `trajectory[k+1]` must follow
/// `trajectory[k]` after time `dt` with common increment `b1_increments[k]`.
pub fn step_residuals(
    trajectory: &[ParticleEnsemble],
    b1_increments: &[f64],
    dt: f64,
    g: TestFunction,
    p: &ModelParams,
) -> Result<Vec<f64>, FpError> {
    if trajectory.len() != b1_increments.len() + 1 {
        return Err(FpError::GridMismatch { ensembles: trajectory.len(), increments: b1_increments.len() });
    }
    Ok(trajectory
        .windows(2)
        .zip(b1_increments)
        .map(|(w, &db)| step_residual(g, &w[0], &w[1], dt, db, p))
        .collect())
}

/// Summary of weak-form residuals over steps and paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualStats {
    pub test_function: String,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Largest `|r_k|` over all steps and paths.
    pub max_abs: f64,
    /// Root mean square of `r_k` over all steps and paths.
    pub rms: f64,
}

/// Running mean/variance/maximum of residuals, fed in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ResidualAccumulator {
    count: usize,
    mean: f64,
    m2: f64,
    sum_sq: f64,
    max_abs: f64,
}

impl ResidualAccumulator {
    pub fn push(&mut self, r: f64) {
        self.count += 1;
        let delta = r - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (r - self.mean);
        self.sum_sq += r * r;
        self.max_abs = self.max_abs.max(r.abs());
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self, g: TestFunction, n_paths: usize, n_steps: usize, dt: f64) -> ResidualStats {
        let n = self.count.max(1) as f64;
        let var = if self.count > 1 { self.m2 / (n - 1.0) } else { 0.0 };
        ResidualStats {
            test_function: g.to_string(),
            n_paths,
            n_steps,
            dt,
            mean: self.mean,
            stderr: (var / n).sqrt(),
            max_abs: self.max_abs,
            rms: (self.sum_sq / n).sqrt(),
        }
    }
}

/// Residual statistics for a stored trajectory.
pub fn weak_form_residual(
    trajectory: &[ParticleEnsemble],
    b1_increments: &[f64],
    dt: f64,
    g: TestFunction,
    p: &ModelParams,
) -> Result<ResidualStats, FpError> {
    let rs = step_residuals(trajectory, b1_increments, dt, g, p)?;
    let mut acc = ResidualAccumulator::default();
    rs.iter().for_each(|&r| acc.push(r));
    Ok(acc.finish(g, 1, rs.len(), dt))
}

/// Simulation setup for a weak-form check.
///
/// Particles are advanced with the internal step `fine_dt`; the residual is
/// evaluated on every observation grid `stride · fine_dt` listed in `strides`,
/// all on the same simulated trajectories. With `strides = [1]` the residual
/// tests the Euler scheme itself.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakFormExperiment {
    pub n_particles: usize,
    pub n_paths: usize,
    pub x0: f64,
    pub fine_dt: f64,
    pub n_fine_steps: usize,
    pub strides: Vec<usize>,
    pub seed: u64,
}

/// Residual statistics of one `(stride, test function)` pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrideStats {
    pub stride: usize,
    pub stats: ResidualStats,
}

/// Output of [`run_weak_form`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeakFormOutcome {
    pub stats: Vec<StrideStats>,
    /// Ensemble mean and oracle per path on the finest grid.
    pub mean_paths: Vec<MeanPath>,
}

struct Observer {
    stride: usize,
    snapshot: ParticleEnsemble,
    db1: f64,
    residuals: Vec<Vec<f64>>,
}

/// Simulates fresh trajectories and accumulates weak-form residuals for every
/// test function and observation stride. Paths run in parallel; aggregation
/// follows path order, so results do not depend on the thread count.
pub fn run_weak_form(
    model: &ValidatedModel,
    exp: &WeakFormExperiment,
    tests: &[TestFunction],
) -> Result<WeakFormOutcome, FpError> {
    if exp.strides.is_empty() || exp.strides.contains(&0) {
        return Err(FpError::BadSetup("strides must be non-empty and positive".into()));
    }
    if exp.n_paths == 0 || exp.n_fine_steps == 0 {
        return Err(FpError::BadSetup("need at least one path and one step".into()));
    }
    if !(exp.fine_dt > 0.0) {
        return Err(FpError::BadSetup("fine_dt must be positive".into()));
    }
    let p = model.params();
    let per_path: Vec<(Vec<Observer>, MeanPath)> = (0..exp.n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let stream = NoiseStream::new(exp.seed, path);
            let mut e = init_ensemble(exp.n_particles, InitialLaw::PointMass(exp.x0), &stream)?;
            let mut observers: Vec<Observer> = exp
                .strides
                .iter()
                .map(|&stride| Observer {
                    stride,
                    snapshot: e.clone(),
                    db1: 0.0,
                    residuals: vec![Vec::new(); tests.len()],
                })
                .collect();
            let mut t = vec![0.0];
            let mut m_hat = vec![e.mean()];
            let mut incs = Vec::with_capacity(exp.n_fine_steps);
            let mut common = stream.common_increments(exp.fine_dt);
            for k in 0..exp.n_fine_steps {
                let db1 = common.next().expect("endless");
                e.step(model, exp.fine_dt, db1, &stream, k as u64)?;
                incs.push(db1);
                t.push((k + 1) as f64 * exp.fine_dt);
                m_hat.push(e.mean());
                for obs in observers.iter_mut() {
                    obs.db1 += db1;
                    if (k + 1) % obs.stride == 0 {
                        let dt = obs.stride as f64 * exp.fine_dt;
                        for (g, out) in tests.iter().zip(obs.residuals.iter_mut()) {
                            out.push(step_residual(*g, &obs.snapshot, &e, dt, obs.db1, p));
                        }
                        obs.snapshot = e.clone();
                        obs.db1 = 0.0;
                    }
                }
            }
            let m_oracle = crate::particles::conditional_mean_oracle(exp.x0, p, &incs, exp.fine_dt);
            let mean_path = MeanPath { path_index: path, n_particles: exp.n_particles, t, m_hat, m_oracle };
            Ok((observers, mean_path))
        })
        .collect::<Result<_, FpError>>()?;

    let mut stats = Vec::new();
    for (si, &stride) in exp.strides.iter().enumerate() {
        for (gi, g) in tests.iter().enumerate() {
            let mut acc = ResidualAccumulator::default();
            for (observers, _) in &per_path {
                observers[si].residuals[gi].iter().for_each(|&r| acc.push(r));
            }
            let n_steps = exp.n_fine_steps / stride;
            stats.push(StrideStats {
                stride,
                stats: acc.finish(*g, exp.n_paths, n_steps, stride as f64 * exp.fine_dt),
            });
        }
    }
    Ok(WeakFormOutcome { stats, mean_paths: per_path.into_iter().map(|(_, m)| m).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LevyMeasureSpec, MarkLaw};

    fn params(alpha0: f64, sigma1: f64, sigma2: f64, levy: LevyMeasureSpec) -> ModelParams {
        ModelParams { alpha0, sigma1, sigma2, levy, ..ModelParams::baseline() }
    }

    fn point(x: f64) -> ParticleEnsemble {
        ParticleEnsemble::new(vec![x], 0.0).unwrap()
    }

    #[test]
    fn linear_test_function_sees_only_drift() {
        let p = params(0.02, 0.2, 0.1, LevyMeasureSpec::new(0.7, MarkLaw::Uniform { low: -0.5, high: 0.5 }));
        let e = ParticleEnsemble::new(vec![0.3, 1.1, 2.5], 0.0).unwrap();
        let m = e.mean();
        assert!((apply_a0(TestFunction::Linear, &e, &p, JumpIntegration::Auto) - 0.02 * m).abs() < 1e-15);
        assert!((apply_a1(TestFunction::Linear, &e, &p) - 0.2 * m).abs() < 1e-15);
    }

    #[test]
    fn square_at_point_mass() {
        // A₀q²(1) at m = 1: 2α₀ + σ₁² + σ₂² (+ rate·g₀² with constant jumps).
        let p = params(0.02, 0.2, 0.1, LevyMeasureSpec::none());
        let got = apply_a0(TestFunction::Square, &point(1.0), &p, JumpIntegration::Auto);
        assert!((got - (0.04 + 0.04 + 0.01)).abs() < 1e-15);
        let p = params(0.02, 0.2, 0.1, LevyMeasureSpec::new(0.5, MarkLaw::Constant { gamma0: -0.3 }));
        let got = apply_a0(TestFunction::Square, &point(1.0), &p, JumpIntegration::Auto);
        assert!((got - (0.09 + 0.5 * 0.09)).abs() < 1e-15);
    }

    #[test]
    fn a1_cases() {
        let p = params(0.02, 0.2, 0.1, LevyMeasureSpec::none());
        assert!((apply_a1(TestFunction::Square, &point(1.5), &p) - 2.0 * 0.2 * 1.5 * 1.5).abs() < 1e-15);
        let p0 = params(0.02, 1e-300, 0.1, LevyMeasureSpec::none());
        let e = ParticleEnsemble::new(vec![0.4, 2.0], 0.0).unwrap();
        for g in [TestFunction::Linear, TestFunction::Square, TestFunction::Bump { scale: 1.0 }] {
            assert!(apply_a1(g, &e, &p0).abs() < 1e-250);
        }
    }

    #[test]
    fn duality_is_an_exact_identity() {
        let p = params(0.03, 0.25, 0.15, LevyMeasureSpec::new(0.4, MarkLaw::Uniform { low: -0.6, high: 0.4 }));
        let e = ParticleEnsemble::new(vec![0.2, 0.9, 1.4, 3.0, -0.5], 0.0).unwrap();
        let m = e.mean();
        for g in [TestFunction::Linear, TestFunction::Square, TestFunction::Bump { scale: 0.8 }] {
            let direct: f64 = e.positions().iter().map(|&x| a0_pointwise(g, x, m, &p, JumpIntegration::Auto)).sum::<f64>()
                / e.len() as f64;
            assert!((apply_a0(g, &e, &p, JumpIntegration::Auto) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_jump_quadrature_matches_closed_form() {
        let p = params(0.02, 0.2, 0.1, LevyMeasureSpec::new(1.3, MarkLaw::Constant { gamma0: -0.4 }));
        let e = ParticleEnsemble::new(vec![0.5, 1.0, 1.7], 0.0).unwrap();
        for g in [TestFunction::Square, TestFunction::Bump { scale: 0.7 }] {
            let closed = apply_a0(g, &e, &p, JumpIntegration::Auto);
            let quad = apply_a0(g, &e, &p, JumpIntegration::Quadrature);
            assert!((closed - quad).abs() < 1e-10, "{g}: {closed} vs {quad}");
        }
        // Uniform marks, polynomial g: quadrature against the analytic second moment.
        let law = MarkLaw::Uniform { low: -0.5, high: 0.9 };
        let p = params(0.02, 0.2, 0.1, LevyMeasureSpec::new(0.8, law));
        let got = apply_a0(TestFunction::Square, &point(1.0), &p, JumpIntegration::Quadrature);
        let want = 0.04 + 0.04 + 0.01 + 0.8 * law.second_moment();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let g = TestFunction::Bump { scale: 0.6 };
        for x in [-1.0, -0.2, 0.0, 0.5, 1.3] {
            let h = 1e-5;
            let d1 = (g.value(x + h) - g.value(x - h)) / (2.0 * h);
            let d2 = (g.d1(x + h) - g.d1(x - h)) / (2.0 * h);
            assert!((d1 - g.d1(x)).abs() < 1e-8);
            assert!((d2 - g.d2(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!(TestFunction::parse("q").unwrap(), TestFunction::Linear);
        assert_eq!(TestFunction::parse("q2").unwrap(), TestFunction::Square);
        assert_eq!(TestFunction::parse("bump:2").unwrap(), TestFunction::Bump { scale: 2.0 });
        assert!(TestFunction::parse("cubic").is_err());
        assert_eq!(TestFunction::Square.to_string(), "q2");
    }

    #[test]
    fn grid_mismatch() {
        let tr = vec![point(1.0), point(1.0)];
        let p = ModelParams::baseline();
        assert_eq!(
            step_residuals(&tr, &[0.0, 0.1], 0.1, TestFunction::Linear, &p),
            Err(FpError::GridMismatch { ensembles: 2, increments: 2 })
        );
    }

    #[test]
    fn static_measure_has_zero_residual() {
        let p = params(0.0, 1e-300, 0.0, LevyMeasureSpec::none());
        let model = p.validate().unwrap();
        let exp = WeakFormExperiment {
            n_particles: 50,
            n_paths: 3,
            x0: 1.0,
            fine_dt: 0.01,
            n_fine_steps: 100,
            strides: vec![1, 2],
            seed: 5,
        };
        let out = run_weak_form(&model, &exp, &[TestFunction::Linear, TestFunction::Square]).unwrap();
        // σ₁ must be nonzero, so the common noise leaves a residue of order σ₁.
        for s in &out.stats {
            assert!(s.stats.max_abs < 1e-290);
            assert!(s.stats.mean.abs() < 1e-290);
        }
        assert_eq!(out.stats[2].stats.n_steps, 50);
    }

    #[test]
    fn exact_gbm_trajectory_residual() {
        // Point masses following the exact conditional mean: r_k = m(e^{(α₀−σ₁²/2)dt+σ₁ΔB₁} − 1 − α₀dt − σ₁ΔB₁).
        let p = params(0.02, 0.2, 0.0, LevyMeasureSpec::none());
        let dt = 0.01;
        let stream = NoiseStream::new(3, 0);
        let incs: Vec<f64> = (0..200).map(|k| stream.common_increment(k, dt)).collect();
        let path = crate::particles::conditional_mean_oracle(1.0, &p, &incs, dt);
        let traj: Vec<_> = path.iter().map(|&m| point(m)).collect();
        let rs = step_residuals(&traj, &incs, dt, TestFunction::Linear, &p).unwrap();
        for (k, r) in rs.iter().enumerate() {
            let m = path[k];
            let want = m * (((0.02 - 0.02) * dt + 0.2 * incs[k]).exp() - 1.0 - 0.02 * dt - 0.2 * incs[k]);
            assert!((r - want).abs() < 1e-14);
        }
    }

    #[test]
    fn accumulator_statistics() {
        let mut acc = ResidualAccumulator::default();
        for r in [1.0, -2.0, 3.0, -4.0] {
            acc.push(r);
        }
        let s = acc.finish(TestFunction::Linear, 1, 4, 0.1);
        assert!((s.mean + 0.5).abs() < 1e-15);
        let var = (1.5f64.powi(2) + 1.5f64.powi(2) + 3.5f64.powi(2) + 3.5f64.powi(2)) / 3.0;
        assert!((s.stderr - (var / 4.0).sqrt()).abs() < 1e-14);
        assert_eq!(s.max_abs, 4.0);
        assert!((s.rms - (30.0f64 / 4.0).sqrt()).abs() < 1e-14);
    }
}
