//! Monte Carlo conditioning engine.
//!
//! Computes the weighted conditional p-value of a likelihood-ratio test given
//! the constrained estimate of the nuisance parameters, for any model that
//! implements [`PivotModel`], and inverts such tests into intervals.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{substream, DOMAIN_MC};

/// Likelihood-ratio statistics below this value are treated as exactly zero,
/// so that the test at the unconstrained estimate has p-value one.
pub const LRT_FLOOR: f64 = 1e-9;

/// Constrained fit under `H0: φ = φ0`.
#[derive(Debug, Clone)]
pub struct ConstrainedFit<N> {
    pub nuisance: N,
    /// Minimized deviance (−2 log-likelihood up to a constant).
    pub deviance: f64,
}

/// Unconstrained maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct UnconstrainedFit<P, N> {
    pub estimate: P,
    pub nuisance: N,
    pub deviance: f64,
}

/// Solution `ψ*(U)` of the pivot equation.
#[derive(Debug, Clone)]
pub struct PivotSolution<N> {
    pub value: N,
    /// The raw solution left the parameter space and was moved onto its
    /// boundary.
    pub clamped: bool,
}

/// The contract consumed by the engine.
///
/// `φ` is the parameter of interest and `ψ` the nuisance parameter. Every
/// method must be a deterministic function of its arguments.
pub trait PivotModel: Sync {
    type Data: Sync;
    type Param: Clone + Sync;
    type Nuisance: Clone + Send + Sync;

    /// Length of the standard-normal vector `U` per replicate.
    fn draw_dimension(&self, data: &Self::Data) -> usize;

    fn constrained_fit(
        &self,
        data: &Self::Data,
        phi0: &Self::Param,
    ) -> Result<ConstrainedFit<Self::Nuisance>>;

    fn unconstrained_fit(
        &self,
        data: &Self::Data,
    ) -> Result<UnconstrainedFit<Self::Param, Self::Nuisance>>;

    /// Nuisance value `ψ*(U)` consistent with the observed constrained
    /// estimate `psi_hat_c`.
    fn solve_pivot(
        &self,
        data: &Self::Data,
        u: &[f64],
        phi0: &Self::Param,
        psi_hat_c: &Self::Nuisance,
    ) -> Result<PivotSolution<Self::Nuisance>>;

    /// Synthetic dataset `Y* = H(U, φ0, ψ)`.
    fn synth_data(
        &self,
        data: &Self::Data,
        u: &[f64],
        phi0: &Self::Param,
        psi: &Self::Nuisance,
    ) -> Self::Data;

    /// Importance weight `w(U)`; must be finite and nonnegative to be used.
    fn weight(
        &self,
        data: &Self::Data,
        u: &[f64],
        phi0: &Self::Param,
        psi_hat_c: &Self::Nuisance,
        psi_star: &Self::Nuisance,
    ) -> f64;

    /// `T = (constrained minimum deviance) − (unconstrained minimum deviance)`.
    fn lrt_stat(&self, data: &Self::Data, phi0: &Self::Param) -> Result<f64> {
        let c = self.constrained_fit(data, phi0)?;
        let u = self.unconstrained_fit(data)?;
        Ok(snap_lrt(c.deviance - u.deviance))
    }

    /// Statistic of a synthetic dataset. Models may override this to warm
    /// start their fits from the conditioning value `psi_hat_c`.
    fn synthetic_lrt_stat(
        &self,
        synthetic: &Self::Data,
        phi0: &Self::Param,
        _psi_hat_c: &Self::Nuisance,
    ) -> Result<f64> {
        self.lrt_stat(synthetic, phi0)
    }
}

pub(crate) fn snap_lrt(t: f64) -> f64 {
    if t < LRT_FLOOR {
        0.0
    } else {
        t
    }
}

/// Weighted Monte Carlo p-value with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PValueResult {
    pub p: f64,
    /// Number of Monte Carlo replicates requested.
    pub replicates: usize,
    /// Effective sample size `(Σw)² / Σw²`.
    pub ess: f64,
    /// Weighted binomial standard error `sqrt(p(1-p)/ess)`.
    pub mc_se: f64,
    /// Replicates dropped because the pivot could not be solved or the
    /// weight was zero or non-finite.
    pub n_degenerate: usize,
    /// Replicates whose pivot was moved onto the parameter boundary.
    pub n_clamped: usize,
    /// Observed likelihood-ratio statistic.
    pub statistic: f64,
}

/// A bank of standard-normal draws `U^(1..B)`, one substream per index.
///
/// Reusing one bank for every tested value gives common random numbers.
#[derive(Debug, Clone)]
pub struct DrawBank {
    dim: usize,
    draws: Vec<f64>,
}

impl DrawBank {
    pub fn generate(dim: usize, replicates: usize, seed: u64) -> Self {
        let draws = (0..replicates)
            .into_par_iter()
            .flat_map_iter(|b| {
                let mut rng = substream(seed, &[DOMAIN_MC, b as u64]);
                (0..dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect::<Vec<f64>>()
            })
            .collect();
        DrawBank { dim, draws }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn replicates(&self) -> usize {
        self.draws.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.draws[b * self.dim..(b + 1) * self.dim]
    }
}

enum Replicate {
    Used { exceeds: bool, weight: f64, clamped: bool },
    Degenerate,
}

/// Monte Carlo p-value of `H0: φ = φ0` with fresh draws from `seed`.
pub fn conditional_p_value<M: PivotModel>(
    model: &M,
    data: &M::Data,
    phi0: &M::Param,
    replicates: usize,
    seed: u64,
) -> Result<PValueResult> {
    if replicates == 0 {
        return Err(Error::invalid("number of Monte Carlo replicates must be positive"));
    }
    let bank = DrawBank::generate(model.draw_dimension(data), replicates, seed);
    conditional_p_value_with_draws(model, data, phi0, &bank)
}

/// Monte Carlo p-value using a pre-generated draw bank.
pub fn conditional_p_value_with_draws<M: PivotModel>(
    model: &M,
    data: &M::Data,
    phi0: &M::Param,
    draws: &DrawBank,
) -> Result<PValueResult> {
    let dim = model.draw_dimension(data);
    if draws.dim() != dim {
        return Err(Error::invalid(format!(
            "draw bank has dimension {}, model needs {dim}",
            draws.dim()
        )));
    }
    let b_total = draws.replicates();
    if b_total == 0 {
        return Err(Error::invalid("number of Monte Carlo replicates must be positive"));
    }
    let constrained = model.constrained_fit(data, phi0)?;
    let unconstrained = model.unconstrained_fit(data)?;
    let t_obs = snap_lrt(constrained.deviance - unconstrained.deviance);
    let psi_hat_c = &constrained.nuisance;

    let outcomes: Vec<Replicate> = (0..b_total)
        .into_par_iter()
        .map(|b| {
            let u = draws.row(b);
            let pivot = match model.solve_pivot(data, u, phi0, psi_hat_c) {
                Ok(p) => p,
                Err(_) => return Replicate::Degenerate,
            };
            let weight = model.weight(data, u, phi0, psi_hat_c, &pivot.value);
            if !weight.is_finite() || weight <= 0.0 {
                return Replicate::Degenerate;
            }
            let synthetic = model.synth_data(data, u, phi0, &pivot.value);
            match model.synthetic_lrt_stat(&synthetic, phi0, psi_hat_c) {
                Ok(t) if t.is_finite() => Replicate::Used {
                    exceeds: snap_lrt(t) >= t_obs,
                    weight,
                    clamped: pivot.clamped,
                },
                _ => Replicate::Degenerate,
            }
        })
        .collect();

    // Index-ordered reduction keeps the sum independent of the schedule.
    let (mut sum_w, mut sum_w2, mut sum_hit) = (0.0, 0.0, 0.0);
    let (mut n_degenerate, mut n_clamped) = (0, 0);
    for r in &outcomes {
        match r {
            Replicate::Used {
                exceeds,
                weight,
                clamped,
            } => {
                sum_w += weight;
                sum_w2 += weight * weight;
                if *exceeds {
                    sum_hit += weight;
                }
                if *clamped {
                    n_clamped += 1;
                }
            }
            Replicate::Degenerate => n_degenerate += 1,
        }
    }
    if n_degenerate == b_total || !(sum_w > 0.0) {
        return Err(Error::PivotFailed(format!(
            "all {b_total} Monte Carlo replicates were degenerate"
        )));
    }
    let p = (sum_hit / sum_w).clamp(0.0, 1.0);
    let ess = (sum_w * sum_w / sum_w2).clamp(1.0, b_total as f64);
    Ok(PValueResult {
        p,
        replicates: b_total,
        ess,
        mc_se: (p * (1.0 - p) / ess).sqrt(),
        n_degenerate,
        n_clamped,
        statistic: t_obs,
    })
}

/// Inverted-test confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
    pub point_estimate: f64,
    pub converged: bool,
    /// Number of p-value evaluations used.
    pub evaluations: usize,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InversionOptions {
    pub alpha: f64,
    /// Bisection stops once the endpoint bracket is narrower than this.
    pub tol: f64,
    /// Maximum number of half-width doublings while bracketing.
    pub max_expand: usize,
}

/// Default relative bisection tolerance, as a fraction of the Wald half-width.
pub const DEFAULT_RELATIVE_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_EXPAND: usize = 12;

impl InversionOptions {
    pub fn new(alpha: f64, half_width: f64) -> Self {
        InversionOptions {
            alpha,
            tol: DEFAULT_RELATIVE_TOL * half_width,
            max_expand: DEFAULT_MAX_EXPAND,
        }
    }
}

/// Sign-change bisection of `f` on `[lo, hi]` down to bracket width `tol`.
pub fn bisect<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if !(tol > 0.0) {
        return Err(Error::invalid("bisection tolerance must be positive"));
    }
    let (flo, fhi) = (f(lo), f(hi));
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.is_nan() || fhi.is_nan() || flo.signum() == fhi.signum() {
        return Err(Error::BracketFailed(format!(
            "f({lo}) and f({hi}) do not have opposite signs"
        )));
    }
    let lo_positive = flo > 0.0;
    let (mut a, mut b) = (lo, hi);
    while (b - a).abs() > tol {
        let mid = 0.5 * (a + b);
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm > 0.0) == lo_positive {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Bisection on a predicate: `inside` satisfies it, `outside` does not.
pub(crate) fn bisect_boundary<F>(
    mut accept: F,
    mut inside: f64,
    mut outside: f64,
    tol: f64,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<bool>,
{
    while (outside - inside).abs() > tol {
        let mid = 0.5 * (inside + outside);
        if accept(mid)? {
            inside = mid;
        } else {
            outside = mid;
        }
    }
    Ok(0.5 * (inside + outside))
}

/// Invert a family of tests into `{x : p(x) > alpha}`.
///
/// Brackets are searched outward from `point_estimate ± half_width`,
/// doubling the offset up to `max_expand` times, then refined by bisection.
/// With `lower_bound`, candidates are clamped to the parameter space and the
/// bound itself is returned when it is not rejected.
pub fn invert_to_interval<F>(
    mut p_fn: F,
    point_estimate: f64,
    half_width: f64,
    lower_bound: Option<f64>,
    opts: InversionOptions,
) -> Result<ConfidenceInterval>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    if !(half_width > 0.0 && half_width.is_finite()) {
        return Err(Error::invalid("initial half-width must be positive and finite"));
    }
    let mut evaluations = 0usize;
    let mut accept = |x: f64| -> Result<bool> {
        evaluations += 1;
        Ok(p_fn(x)? > opts.alpha)
    };
    if !accept(point_estimate)? {
        return Err(Error::invalid(format!(
            "p-value at the point estimate {point_estimate} does not exceed alpha"
        )));
    }
    let mut endpoints = [point_estimate; 2];
    for (slot, dir) in [(0usize, -1.0), (1usize, 1.0)] {
        let mut inside = point_estimate;
        let mut offset = half_width;
        let mut outside = None;
        let mut at_bound = false;
        for _ in 0..=opts.max_expand {
            let mut cand = point_estimate + dir * offset;
            let clamped = match lower_bound {
                Some(lb) if cand <= lb => {
                    cand = lb;
                    true
                }
                _ => false,
            };
            if accept(cand)? {
                inside = cand;
                if clamped {
                    at_bound = true;
                    break;
                }
                offset *= 2.0;
            } else {
                outside = Some(cand);
                break;
            }
        }
        endpoints[slot] = if at_bound {
            inside
        } else {
            let outside = outside.ok_or_else(|| {
                Error::BracketFailed(format!(
                    "no rejection within {} doublings of half-width {half_width}",
                    opts.max_expand
                ))
            })?;
            bisect_boundary(&mut accept, inside, outside, opts.tol)?
        };
    }
    Ok(ConfidenceInterval {
        lower: endpoints[0],
        upper: endpoints[1],
        alpha: opts.alpha,
        point_estimate,
        converged: true,
        evaluations,
    })
}
