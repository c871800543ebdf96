//! Numeric quasi-variational-inequality checks for the reduced problem in
//! `u = ⟨μ, q⟩`, where the candidate value is `φ(s, x, μ) = e^{−ρs} ψ(u)`.
//!
//! Checked conditions, with running profit `f ≡ 0`:
//!
//! * (ii)  `ψ ≥ Mψ` wherever an impulse is admissible;
//! * (x)   `𝒢₀ψ = 0` in the continuation region `D = (0, ū)`;
//! * (vi)  `𝒢ψ ≤ 0` above `ū`, pointwise and through the closed-form jump bound;
//! * smooth fit of value and slope at `ū`.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dividend::{characteristic, DividendSolution};
use crate::model::{levy_mass, JumpIntegration, ModelParams};
use crate::numfmt::fmt_num;

type RealFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QviError {
    #[error("no admissible impulse at u = {u}: need u > c = {c}")]
    NoAdmissibleImpulse { u: f64, c: f64 },
}

/// `ψ(u)` with optional analytic first and second derivatives.
pub struct ReducedFunction {
    psi: RealFn,
    d1: Option<RealFn>,
    d2: Option<RealFn>,
    /// Central-difference step used when a derivative is not supplied.
    pub fd_step: f64,
}

impl std::fmt::Debug for ReducedFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReducedFunction")
            .field("analytic", &self.is_analytic())
            .field("fd_step", &self.fd_step)
            .finish()
    }
}

impl ReducedFunction {
    /// Value only; derivatives by central differences.
    pub fn new(psi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        ReducedFunction { psi: Box::new(psi), d1: None, d2: None, fd_step: DEFAULT_FD_STEP }
    }

    pub fn with_derivatives(
        psi: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d1: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d2: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ReducedFunction {
            psi: Box::new(psi),
            d1: Some(Box::new(d1)),
            d2: Some(Box::new(d2)),
            fd_step: DEFAULT_FD_STEP,
        }
    }

    /// The closed-form dividend value `ψ` with analytic derivatives.
    pub fn dividend(sol: &DividendSolution) -> Self {
        let (a, b, c) = (*sol, *sol, *sol);
        Self::with_derivatives(move |u| a.psi(u), move |u| b.psi_d1(u), move |u| c.psi_d2(u))
    }

    /// Drops analytic derivatives so that finite differences are used.
    pub fn numeric(mut self, fd_step: f64) -> Self {
        self.d1 = None;
        self.d2 = None;
        self.fd_step = fd_step;
        self
    }

    pub fn is_analytic(&self) -> bool {
        self.d1.is_some() && self.d2.is_some()
    }

    pub fn value(&self, u: f64) -> f64 {
        (self.psi)(u)
    }

    fn step_at(&self, u: f64) -> f64 {
        self.fd_step.min(0.5 * u.abs()).max(f64::MIN_POSITIVE)
    }

    pub fn d1(&self, u: f64) -> f64 {
        match &self.d1 {
            Some(f) => f(u),
            None => {
                let h = self.step_at(u);
                (self.value(u + h) - self.value(u - h)) / (2.0 * h)
            }
        }
    }

    pub fn d2(&self, u: f64) -> f64 {
        match &self.d2 {
            Some(f) => f(u),
            None => {
                let h = self.step_at(u);
                (self.value(u + h) - 2.0 * self.value(u) + self.value(u - h)) / (h * h)
            }
        }
    }
}

/// `Mψ(u) = sup { ψ(u − c − (1+λ)ζ) + ζ : 0 ≤ ζ ≤ (u − c)/(1+λ) }`.
///
/// Searches `zeta_grid` equally spaced impulses, then refines around the best one by
/// golden-section search. Returns `(value, argmax ζ)`.
pub fn intervention_operator_m(
    psi: &ReducedFunction,
    u: f64,
    p: &ModelParams,
    zeta_grid: usize,
) -> Result<(f64, f64), QviError> {
    if !(u > p.c) {
        return Err(QviError::NoAdmissibleImpulse { u, c: p.c });
    }
    let k = 1.0 + p.lambda;
    let z_max = (u - p.c) / k;
    // Post-impulse state; clamped so roundoff at ζ = z_max cannot leave the domain.
    let h = |z: f64| psi.value((u - p.c - k * z).max(0.0)) + z;

    let n = zeta_grid.max(2);
    let dz = z_max / (n - 1) as f64;
    let zeta = |i: usize| if i == n - 1 { z_max } else { i as f64 * dz };
    let (mut best_i, mut best) = (0, h(0.0));
    for i in 1..n {
        let v = h(zeta(i));
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let mut best_z = zeta(best_i);

    let (mut a, mut b) = (zeta(best_i.saturating_sub(1)), zeta((best_i + 1).min(n - 1)));
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (b - r * (b - a), a + r * (b - a));
    let (mut f1, mut f2) = (h(x1), h(x2));
    for _ in 0..80 {
        if b - a <= 1e-15 * z_max.max(1.0) {
            break;
        }
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = h(x2);
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = h(x1);
        }
    }
    for (z, v) in [(x1, f1), (x2, f2)] {
        if v > best {
            best = v;
            best_z = z;
        }
    }
    Ok((best, best_z))
}

/// `𝒢₀ψ(u) = −ρψ + α₀uψ′ + ½σ₁²u²ψ″`.
pub fn generator_g0(psi: &ReducedFunction, u: f64, p: &ModelParams) -> f64 {
    -p.rho * psi.value(u)
        + p.alpha0 * u * psi.d1(u)
        + 0.5 * p.sigma1 * p.sigma1 * u * u * psi.d2(u)
}

/// Jump part `‖ν‖ E[ψ(u(1 + γ₀)) − ψ(u) − γ₀uψ′(u)]` of the generator.
pub fn jump_term(psi: &ReducedFunction, u: f64, p: &ModelParams, mode: JumpIntegration) -> f64 {
    if p.levy.is_empty() {
        return 0.0;
    }
    let (v, d) = (psi.value(u), psi.d1(u));
    p.levy.rate * p.levy.marks.expect(|g| psi.value(u * (1.0 + g)) - v - g * u * d, mode)
}

/// `𝒢₀ψ` plus the jump part.
pub fn generator_with_jumps(psi: &ReducedFunction, u: f64, p: &ModelParams, mode: JumpIntegration) -> f64 {
    generator_g0(psi, u, p) + jump_term(psi, u, p, mode)
}

/// Closed-form jump criterion `γ₁ ≤ (ρ + ‖ν‖)/(α₀ + ‖ν‖)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConditionVi {
    pub holds: bool,
    /// `bound − γ₁`; `+∞` when the bound is infinite.
    pub margin: f64,
    /// `(ρ + ‖ν‖)/(α₀ + ‖ν‖)`, or `+∞` if `α₀ + ‖ν‖ ≤ 0`.
    pub bound: f64,
}

pub fn check_condition_vi(sol: &DividendSolution, p: &ModelParams) -> ConditionVi {
    let nu = levy_mass(&p.levy);
    let den = p.alpha0 + nu;
    let bound = if den > 0.0 { (p.rho + nu) / den } else { f64::INFINITY };
    ConditionVi { holds: sol.gamma1 <= bound, margin: bound - sol.gamma1, bound }
}

/// Jump mass at which the closed-form criterion switches: `(ρ − γ₁α₀)/(γ₁ − 1)`.
pub fn condition_vi_critical_rate(sol: &DividendSolution, p: &ModelParams) -> f64 {
    (p.rho - sol.gamma1 * p.alpha0) / (sol.gamma1 - 1.0)
}

/// Evaluation grid and tolerance ladder for [`verify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub n_points: usize,
    /// Right end of the grid; `None` means `2ū`.
    pub u_max: Option<f64>,
    pub zeta_grid: usize,
    /// Exact identities such as `ψ = Mψ` above `ū`.
    pub tol_exact: f64,
    /// Sign checks on analytic derivatives.
    pub tol_analytic: f64,
    /// `|𝒢₀ψ|` inside the continuation region with analytic derivatives.
    pub tol_continuation: f64,
    /// Anything involving finite differences, including smooth fit.
    pub tol_fd: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n_points: 2000,
            u_max: None,
            zeta_grid: 1024,
            tol_exact: 1e-10,
            tol_analytic: 1e-8,
            tol_continuation: 1e-6,
            tol_fd: 1e-5,
        }
    }
}

/// One-sided value and slope gaps at the free boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothFit {
    pub value_gap: f64,
    pub derivative_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct QviFlags {
    pub cond_ii: bool,
    pub cond_x: bool,
    pub cond_vi_pointwise: bool,
    pub cond_vi_closed_form: bool,
    pub smooth_fit: bool,
    pub continuation_region: bool,
}

impl QviFlags {
    fn all(&self) -> bool {
        self.cond_ii
            && self.cond_x
            && self.cond_vi_pointwise
            && self.cond_vi_closed_form
            && self.smooth_fit
            && self.continuation_region
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QviReport {
    pub u_bar: f64,
    pub derivatives: &'static str,
    pub grid: Vec<f64>,
    pub psi: Vec<f64>,
    /// `Mψ`; `None` where no impulse is admissible (`u ≤ c`).
    pub m_psi: Vec<Option<f64>>,
    pub argmax_zeta: Vec<Option<f64>>,
    /// `ψ − Mψ`.
    pub cond_ii: Vec<Option<f64>>,
    /// `𝒢₀ψ` for `u < ū`.
    pub cond_x: Vec<Option<f64>>,
    /// `𝒢₀ψ` plus the jump part for `u > ū`.
    pub cond_vi: Vec<Option<f64>>,
    pub smooth_fit: SmoothFit,
    pub condition_vi: ConditionVi,
    /// Pointwise (vi) and the closed-form criterion disagree.
    pub condition_vi_disagreement: bool,
    /// Grid points whose numerical region `{ψ > Mψ}` differs from `(0, ū)`.
    pub region_mismatches: Vec<f64>,
    /// `γ₁ < ρ/α₀`, the consequence of `F(ρ/α₀) > 0`; `None` when `α₀ ≤ 0`.
    pub gamma1_below_rho_over_alpha0: Option<bool>,
    pub grid_spec: GridSpec,
    pub flags: QviFlags,
    pub passed: bool,
}

/// Evaluates (ii), (x), (vi) and smooth fit of `psi` against the solved free boundary.
pub fn verify(psi: &ReducedFunction, sol: &DividendSolution, p: &ModelParams, spec: &GridSpec) -> QviReport {
    let u_bar = sol.u_bar;
    let u_max = spec.u_max.unwrap_or(2.0 * u_bar);
    let n = spec.n_points.max(1);
    let grid: Vec<f64> = (1..=n).map(|i| u_max * i as f64 / n as f64).collect();
    let analytic = psi.is_analytic();
    let (tol_x, tol_vi) = if analytic {
        (spec.tol_continuation, spec.tol_analytic)
    } else {
        (spec.tol_fd, spec.tol_fd)
    };

    struct Point {
        psi: f64,
        m: Option<(f64, f64)>,
        g_x: Option<f64>,
        g_vi: Option<f64>,
    }
    let points: Vec<Point> = grid
        .par_iter()
        .map(|&u| Point {
            psi: psi.value(u),
            m: intervention_operator_m(psi, u, p, spec.zeta_grid).ok(),
            g_x: (u < u_bar).then(|| generator_g0(psi, u, p)),
            g_vi: (u > u_bar).then(|| generator_with_jumps(psi, u, p, JumpIntegration::Auto)),
        })
        .collect();

    let mut flags = QviFlags {
        cond_ii: true,
        cond_x: true,
        cond_vi_pointwise: true,
        cond_vi_closed_form: true,
        smooth_fit: true,
        continuation_region: true,
    };
    let mut region_mismatches = Vec::new();
    for (u, pt) in grid.iter().zip(&points) {
        let gap = pt.m.map(|(m, _)| pt.psi - m);
        if let Some(g) = gap {
            if g < -spec.tol_exact || (*u >= u_bar && g > spec.tol_exact) {
                flags.cond_ii = false;
            }
        }
        if pt.g_x.is_some_and(|g| !(g.abs() <= tol_x)) {
            flags.cond_x = false;
        }
        if pt.g_vi.is_some_and(|g| !(g <= tol_vi)) {
            flags.cond_vi_pointwise = false;
        }
        if (u - u_bar).abs() >= 1e-4 * u_bar {
            let waits = gap.is_none_or(|g| g > spec.tol_exact);
            if waits != (*u < u_bar) {
                region_mismatches.push(*u);
            }
        }
    }
    flags.continuation_region = region_mismatches.is_empty();

    let smooth_fit = smooth_fit_gaps(psi, u_bar);
    flags.smooth_fit =
        smooth_fit.value_gap.abs() <= spec.tol_fd && smooth_fit.derivative_gap.abs() <= spec.tol_fd;
    let condition_vi = check_condition_vi(sol, p);
    flags.cond_vi_closed_form = condition_vi.holds;

    let gamma1_below_rho_over_alpha0 = (p.alpha0 > 0.0).then(|| {
        let g = p.rho / p.alpha0;
        characteristic(p, g) > 0.0 && sol.gamma1 < g
    });

    let passed = flags.all();
    QviReport {
        u_bar,
        derivatives: if analytic { "analytic" } else { "finite_difference" },
        psi: points.iter().map(|pt| pt.psi).collect(),
        m_psi: points.iter().map(|pt| pt.m.map(|m| m.0)).collect(),
        argmax_zeta: points.iter().map(|pt| pt.m.map(|m| m.1)).collect(),
        cond_ii: points.iter().map(|pt| pt.m.map(|m| pt.psi - m.0)).collect(),
        cond_x: points.iter().map(|pt| pt.g_x).collect(),
        cond_vi: points.iter().map(|pt| pt.g_vi).collect(),
        grid,
        smooth_fit,
        condition_vi,
        condition_vi_disagreement: flags.cond_vi_pointwise != condition_vi.holds,
        region_mismatches,
        gamma1_below_rho_over_alpha0,
        grid_spec: *spec,
        flags,
        passed,
    }
}

/// Left and right limits of `ψ` and `ψ′` at `ū` by quadratic extrapolation from
/// three points on each side, spaced `10⁻⁴ū`. Gaps are left minus right.
pub fn smooth_fit_gaps(psi: &ReducedFunction, u_bar: f64) -> SmoothFit {
    let d = 1e-4 * u_bar;
    let side = |sign: f64| {
        let f1 = psi.value(u_bar + sign * d);
        let f2 = psi.value(u_bar + sign * 2.0 * d);
        let f3 = psi.value(u_bar + sign * 3.0 * d);
        let value = 3.0 * f1 - 3.0 * f2 + f3;
        let slope = -sign * (2.5 * f1 - 4.0 * f2 + 1.5 * f3) / d;
        (value, slope)
    };
    let (lv, ls) = side(-1.0);
    let (rv, rs) = side(1.0);
    SmoothFit { value_gap: lv - rv, derivative_gap: ls - rs }
}

pub const QVI_CSV_HEADER: &str = "u,psi,m_psi,argmax_zeta,psi_minus_m,g0_continuation,g_above_boundary";

impl QviReport {
    /// Per-point values; empty cells where a condition does not apply.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let cell = |x: Option<f64>| x.map(fmt_num).unwrap_or_default();
        writeln!(w, "{QVI_CSV_HEADER}")?;
        for i in 0..self.grid.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                fmt_num(self.grid[i]),
                fmt_num(self.psi[i]),
                cell(self.m_psi[i]),
                cell(self.argmax_zeta[i]),
                cell(self.cond_ii[i]),
                cell(self.cond_x[i]),
                cell(self.cond_vi[i]),
            )?;
        }
        Ok(())
    }

    pub fn min_cond_ii(&self) -> f64 {
        self.cond_ii.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_cond_x(&self) -> f64 {
        self.cond_x.iter().flatten().fold(0.0, |a, g| a.max(g.abs()))
    }

    pub fn max_cond_vi(&self) -> f64 {
        self.cond_vi.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest `ψ − Mψ` at or above the boundary.
    pub fn max_cond_ii_above(&self) -> f64 {
        self.grid
            .iter()
            .zip(&self.cond_ii)
            .filter(|(u, _)| **u >= self.u_bar)
            .filter_map(|(_, g)| *g)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LevyMeasureSpec, MarkLaw};

    fn base() -> ModelParams {
        ModelParams::baseline()
    }

    fn solved() -> DividendSolution {
        DividendSolution::solve(&base()).unwrap()
    }

    #[test]
    fn m_of_solved_value_takes_everything() {
        let sol = solved();
        let psi = ReducedFunction::dividend(&sol);
        for u in [1.5, 2.0, sol.u_bar, 3.0, 5.0] {
            let (m, z) = intervention_operator_m(&psi, u, &base(), 1024).unwrap();
            assert!((m - (u - 1.0)).abs() < 1e-12, "u={u} m={m}");
            assert!((z - (u - 1.0)).abs() < 1e-9);
        }
        let (m, _) = intervention_operator_m(&psi, 2.0, &base(), 1024).unwrap();
        assert!(m < psi.value(2.0));
        assert!((psi.value(2.0) - 1.058).abs() < 1e-3);
    }

    #[test]
    fn m_of_zero_function() {
        let psi = ReducedFunction::new(|_| 0.0);
        let p = ModelParams { lambda: 0.5, ..base() };
        let (m, z) = intervention_operator_m(&psi, 4.0, &p, 64).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(z, 2.0);
    }

    #[test]
    fn m_interior_maximum_is_refined() {
        // ψ(w) = −(w − 1)², post-state w = u − c − ζ: h(ζ) = −(2 − ζ)² + ζ peaks at ζ = 2.5.
        let psi = ReducedFunction::new(|w| -(w - 1.0) * (w - 1.0));
        let (m, z) = intervention_operator_m(&psi, 4.0, &base(), 7).unwrap();
        assert!((z - 2.5).abs() < 1e-7, "{z}");
        assert!((m - 2.25).abs() < 1e-12);
    }

    #[test]
    fn m_requires_admissible_impulse() {
        let psi = ReducedFunction::new(|_| 0.0);
        assert_eq!(
            intervention_operator_m(&psi, 1.0, &base(), 16),
            Err(QviError::NoAdmissibleImpulse { u: 1.0, c: 1.0 })
        );
    }

    #[test]
    fn generator_examples() {
        let sol = solved();
        let g1 = sol.gamma1;
        let power = ReducedFunction::with_derivatives(
            move |u| u.powf(g1),
            move |u| g1 * u.powf(g1 - 1.0),
            move |u| g1 * (g1 - 1.0) * u.powf(g1 - 2.0),
        );
        let fd = ReducedFunction::new(move |u| u.powf(g1));
        for u in [0.3, 1.0, 2.0, 5.0] {
            assert!(generator_g0(&power, u, &base()).abs() < 1e-9);
            assert!(generator_g0(&fd, u, &base()).abs() < 1e-5);
        }
        let one = ReducedFunction::new(|_| 1.0);
        assert_eq!(generator_g0(&one, 2.0, &base()), -0.05);
        let lin = ReducedFunction::new(|u| u);
        let p = ModelParams { alpha0: 0.05, ..base() };
        for u in [0.5, 3.0] {
            assert!(generator_g0(&lin, u, &p).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_differences_are_second_order() {
        let sol = solved();
        let exact = ReducedFunction::dividend(&sol);
        let u = 1.3;
        let gap = |h: f64| {
            let fd = ReducedFunction::dividend(&sol).numeric(h);
            (generator_g0(&fd, u, &base()) - generator_g0(&exact, u, &base())).abs()
        };
        let ratio = gap(2e-2) / gap(1e-2);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn condition_vi_examples() {
        let sol = solved();
        let c = check_condition_vi(&sol, &base());
        assert!(c.holds);
        assert!((c.bound - 2.5).abs() < 1e-15);
        assert!((c.margin - 0.918_861).abs() < 1e-6);
        let heavy = ModelParams { levy: LevyMeasureSpec::new(1e9, MarkLaw::Constant { gamma0: 0.1 }), ..base() };
        assert!(!check_condition_vi(&sol, &heavy).holds);
        let flat = ModelParams { alpha0: 0.0, ..base() };
        let sol0 = DividendSolution::solve(&flat).unwrap();
        let c0 = check_condition_vi(&sol0, &flat);
        assert!(c0.holds && c0.bound.is_infinite());
        let nu = condition_vi_critical_rate(&sol, &base());
        assert!((nu - 0.031_623).abs() < 1e-6);
    }

    #[test]
    fn verify_baseline_passes() {
        let sol = solved();
        let r = verify(&ReducedFunction::dividend(&sol), &sol, &base(), &GridSpec::default());
        assert!(r.passed, "{:?}", r.flags);
        assert_eq!(r.grid.len(), 2000);
        assert!(r.min_cond_ii() >= -1e-10);
        assert!(r.max_cond_ii_above() <= 1e-10);
        assert!(r.max_abs_cond_x() <= 1e-6);
        assert!(r.max_cond_vi() <= 1e-8);
        assert_eq!(r.gamma1_below_rho_over_alpha0, Some(true));
        for (u, z) in r.grid.iter().zip(&r.argmax_zeta) {
            if *u > sol.u_bar {
                assert!((z.unwrap() - (u - 1.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn verify_with_finite_differences() {
        let sol = solved();
        let psi = ReducedFunction::dividend(&sol).numeric(1e-5);
        let spec = GridSpec { n_points: 400, ..GridSpec::default() };
        let r = verify(&psi, &sol, &base(), &spec);
        assert_eq!(r.derivatives, "finite_difference");
        // Points within one FD step of the kink at ū see the slope jump in ψ″.
        let far: Vec<f64> = r
            .grid
            .iter()
            .zip(&r.cond_x)
            .filter(|(u, _)| (*u - sol.u_bar).abs() > 1e-3)
            .filter_map(|(_, g)| *g)
            .collect();
        assert!(far.iter().all(|g| g.abs() < 1e-5));
    }

    #[test]
    fn perturbed_coefficient_is_caught() {
        let sol = solved();
        let worst_ii = |r: &QviReport| {
            r.grid
                .iter()
                .zip(&r.cond_ii)
                .filter_map(|(u, g)| g.map(|g| (*u, g)))
                .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
        };
        for factor in [1.1, 0.9] {
            let bad = sol.with_scaled_c1(factor);
            let r = verify(&ReducedFunction::dividend(&bad), &sol, &base(), &GridSpec::default());
            assert!(!r.passed);
            assert!(!r.flags.smooth_fit);
            assert!((r.smooth_fit.value_gap - (factor - 1.0) * (sol.u_bar - 1.0)).abs() < 1e-8);
            assert!((r.smooth_fit.derivative_gap - (factor - 1.0)).abs() < 1e-6);
        }
        // Inflating C₁ only raises ψ below ū; Mψ = u − c there, so ψ ≥ Mψ survives.
        let up = verify(&ReducedFunction::dividend(&sol.with_scaled_c1(1.1)), &sol, &base(), &GridSpec::default());
        assert!(up.flags.cond_ii);
        // Deflating it puts ψ under the payout line just left of ū.
        let down = verify(&ReducedFunction::dividend(&sol.with_scaled_c1(0.9)), &sol, &base(), &GridSpec::default());
        assert!(!down.flags.cond_ii);
        let (u, g) = worst_ii(&down);
        assert!(g < 0.0 && u < sol.u_bar && u > 0.9 * sol.u_bar, "{u} {g}");
    }

    #[test]
    fn gap_function_k_is_positive_convex_and_tangent() {
        let sol = solved();
        let k = |u: f64| sol.c1 * u.powf(sol.gamma1) - (u - 1.0);
        let k2 = |u: f64| sol.c1 * sol.gamma1 * (sol.gamma1 - 1.0) * u.powf(sol.gamma1 - 2.0);
        for i in 1..1000 {
            let u = sol.u_bar * i as f64 / 1000.0;
            assert!(k(u) > 0.0);
            assert!(k2(u) > 0.0);
        }
        assert!(k(sol.u_bar).abs() < 1e-12);
        let k1 = sol.c1 * sol.gamma1 * sol.u_bar.powf(sol.gamma1 - 1.0) - 1.0;
        assert!(k1.abs() < 1e-12);
    }

    #[test]
    fn jumps_enter_only_the_vi_check() {
        let sol = solved();
        let p = ModelParams { levy: LevyMeasureSpec::new(0.02, MarkLaw::Constant { gamma0: -0.5 }), ..base() };
        let psi = ReducedFunction::dividend(&sol);
        let j = jump_term(&psi, 3.0, &p, JumpIntegration::Auto);
        assert!((0.0..=0.02).contains(&j));
        let q = jump_term(&psi, 3.0, &p, JumpIntegration::Quadrature);
        assert!((j - q).abs() < 1e-12);
        let r = verify(&psi, &sol, &p, &GridSpec { n_points: 200, ..GridSpec::default() });
        assert!(r.flags.cond_x && r.flags.cond_vi_closed_form && r.flags.cond_vi_pointwise);
    }

    #[test]
    fn verify_is_deterministic() {
        let sol = solved();
        let spec = GridSpec { n_points: 300, ..GridSpec::default() };
        let a = verify(&ReducedFunction::dividend(&sol), &sol, &base(), &spec);
        let b = verify(&ReducedFunction::dividend(&sol), &sol, &base(), &spec);
        assert_eq!(a, b);
        let mut csv = Vec::new();
        a.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 301);
        assert!(text.lines().nth(1).unwrap().contains(",,"));
    }

    proptest::proptest! {
        #[test]
        fn m_is_monotone_for_nondecreasing_psi(a in 0.0f64..2.0, b in 0.1f64..3.0, lambda in 0.0f64..1.0) {
            let psi = ReducedFunction::new(move |w| a * w.max(0.0).powf(b));
            let p = ModelParams { lambda, ..base() };
            let mut last = f64::NEG_INFINITY;
            for i in 1..40 {
                let u = 1.0 + 0.1 * i as f64;
                let (m, _) = intervention_operator_m(&psi, u, &p, 128).unwrap();
                proptest::prop_assert!(m >= last - 1e-9);
                last = m;
            }
        }
    }
}
