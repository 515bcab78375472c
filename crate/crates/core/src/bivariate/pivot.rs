//! Pivot, importance weight and Monte Carlo p-value for `H0: μ = μ0`.

use nalgebra::{Matrix3, Vector3};

use super::fit::{
    cold_starts, derivs, fit_constrained_bivar, fit_constrained_from, fit_ml_bivar, fit_ml_from,
    moment_start, score_cov, theta_to_nuisance,
};
use super::{marginal_cov, BivarNuisance, DtaData, DtaStudy, RHO_BOUND};
use crate::error::{Error, Result};
use crate::mc::{
    conditional_p_value, snap_lrt, ConstrainedFit, PValueResult, PivotModel, PivotSolution,
    UnconstrainedFit,
};
use crate::optim::nelder_mead;

/// Largest accepted residual of the pivot equations.
pub const PIVOT_TOLERANCE: f64 = 1e-6;
/// Relative finite-difference step of the weight Jacobian.
const WEIGHT_STEP: f64 = 1e-4;

/// `y_i = μ0 + T_i u_i` with `T_i` the lower Cholesky factor of `Σ(s) + C_i`.
pub(crate) fn synth_cov(data: &DtaData, u: &[f64], mu0: [f64; 2], s: &[f64; 3]) -> Option<DtaData> {
    let mut studies = Vec::with_capacity(data.k());
    for (i, st) in data.studies().iter().enumerate() {
        let [l11, l21, l22] = marginal_cov(st, s).cholesky()?;
        let (u1, u2) = (u[2 * i], u[2 * i + 1]);
        studies.push(DtaStudy {
            ya: mu0[0] + l11 * u1,
            yb: mu0[1] + l21 * u1 + l22 * u2,
            va: st.va,
            vb: st.vb,
        });
    }
    Some(DtaData { studies })
}

/// Residuals of the three pivot equations at `psi`, i.e. the score
/// equations at `psi_hat_c` evaluated on the synthetic data built from `psi`.
pub fn pivot_equations(
    u: &[f64],
    data: &DtaData,
    mu0: [f64; 2],
    psi_hat_c: &BivarNuisance,
    psi: &BivarNuisance,
) -> Result<[f64; 3]> {
    check_draws(u, data)?;
    equations_cov(u, data, mu0, &psi_hat_c.covariance(), &psi.covariance())
        .ok_or_else(|| Error::numerical("covariance is not positive definite"))
}

fn check_draws(u: &[f64], data: &DtaData) -> Result<()> {
    if u.len() != 2 * data.k() {
        return Err(Error::invalid(format!(
            "expected {} draws, got {}",
            2 * data.k(),
            u.len()
        )));
    }
    Ok(())
}

fn equations_cov(
    u: &[f64],
    data: &DtaData,
    mu0: [f64; 2],
    s_hat: &[f64; 3],
    s: &[f64; 3],
) -> Option<[f64; 3]> {
    let y = synth_cov(data, u, mu0, s)?;
    score_cov(&y, mu0, s_hat)
}

fn norm_inf(v: &[f64; 3]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Levenberg-Marquardt root search in covariance coordinates.
fn lm_root<F>(mut g: F, s0: [f64; 3]) -> Option<([f64; 3], f64)>
where
    F: FnMut(&[f64; 3]) -> Option<[f64; 3]>,
{
    let mut s = s0;
    let mut gs = g(&s)?;
    let mut res = gs.iter().map(|v| v * v).sum::<f64>();
    let mut lambda = 1e-8;
    for _ in 0..200 {
        if norm_inf(&gs) < 1e-11 {
            break;
        }
        let mut jac = Matrix3::zeros();
        for j in 0..3 {
            let h = 1e-6 * s[j].abs().max(1.0);
            let (mut sp, mut sm) = (s, s);
            sp[j] += h;
            sm[j] -= h;
            let (gp, gm) = match (g(&sp), g(&sm)) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    let gp = g(&sp)?;
                    for i in 0..3 {
                        jac[(i, j)] = (gp[i] - gs[i]) / h;
                    }
                    continue;
                }
            };
            for i in 0..3 {
                jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let jtj = jt * jac;
        let rhs = -(jt * Vector3::from(gs));
        let mut improved = false;
        for _ in 0..40 {
            let mut a = jtj;
            for i in 0..3 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&rhs) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [s[0] + step[0], s[1] + step[1], s[2] + step[2]];
            if let Some(gt) = g(&trial) {
                let rt = gt.iter().map(|v| v * v).sum::<f64>();
                if rt < res {
                    s = trial;
                    gs = gt;
                    res = rt;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = true;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((s, norm_inf(&gs)))
}

/// Map covariance coordinates into the parameter space; `true` when the
/// point had to be moved.
fn project(s: &[f64; 3]) -> (BivarNuisance, bool) {
    let (a, b) = (s[0].max(0.0), s[1].max(0.0));
    let mut clamped = s[0] < 0.0 || s[1] < 0.0;
    let rho = if a > 0.0 && b > 0.0 {
        let r = s[2] / (a * b).sqrt();
        if r.abs() > RHO_BOUND {
            clamped = true;
        }
        r.clamp(-RHO_BOUND, RHO_BOUND)
    } else {
        0.0
    };
    (
        BivarNuisance {
            sigma_a2: a,
            sigma_b2: b,
            rho,
        },
        clamped,
    )
}

/// `ψ*(U)`: root of the pivot equations started from `psi_hat_c`.
///
/// A root outside the parameter space is moved onto its boundary and
/// reported as clamped. Without a root, the squared residual is minimized
/// over the parameter space; a boundary minimizer is accepted as clamped.
pub fn pivot_psi_star(
    u: &[f64],
    data: &DtaData,
    mu0: [f64; 2],
    psi_hat_c: &BivarNuisance,
) -> Result<PivotSolution<BivarNuisance>> {
    check_draws(u, data)?;
    let s_hat = psi_hat_c.covariance();
    let eq = |s: &[f64; 3]| equations_cov(u, data, mu0, &s_hat, s);
    if let Some((s, r)) = lm_root(eq, s_hat) {
        if r < PIVOT_TOLERANCE {
            let (value, clamped) = project(&s);
            return Ok(PivotSolution { value, clamped });
        }
    }
    let objective = |th: &[f64]| -> f64 {
        let s = theta_to_nuisance(th).covariance();
        match equations_cov(u, data, mu0, &s_hat, &s) {
            Some(g) => g.iter().map(|v| v * v).sum(),
            None => f64::INFINITY,
        }
    };
    let start = super::fit::nuisance_to_theta(psi_hat_c);
    let nm = nelder_mead(objective, &start, 0.3, 1e-16, 3000);
    let psi = theta_to_nuisance(&nm.x);
    let residual = nm.value.sqrt();
    if residual < PIVOT_TOLERANCE {
        return Ok(PivotSolution {
            value: psi,
            clamped: false,
        });
    }
    let mut snapped = psi;
    let mut on_boundary = false;
    if psi.sigma_a2 < 1e-6 {
        snapped.sigma_a2 = 0.0;
        on_boundary = true;
    }
    if psi.sigma_b2 < 1e-6 {
        snapped.sigma_b2 = 0.0;
        on_boundary = true;
    }
    if psi.rho.abs() > RHO_BOUND * (1.0 - 1e-6) {
        snapped.rho = RHO_BOUND.copysign(psi.rho);
        on_boundary = true;
    }
    if on_boundary {
        Ok(PivotSolution {
            value: snapped,
            clamped: true,
        })
    } else {
        Err(Error::PivotFailed(format!(
            "pivot residual {residual:.3e} exceeds tolerance"
        )))
    }
}

/// Root of the score equations for `(data, mu0)`, by Newton iteration in
/// covariance coordinates started at `s0`. No bound constraints are imposed.
fn score_root(data: &DtaData, mu0: [f64; 2], s0: [f64; 3]) -> Option<[f64; 3]> {
    // The score also vanishes as variances grow without bound.
    let limit = 1e4 * (1.0 + s0.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut s = s0;
    for _ in 0..50 {
        if s.iter().any(|v| v.abs() > limit) {
            return None;
        }
        let d = derivs(data, mu0, &s)?;
        let g = Vector3::from(d.g_s);
        let scale = d.h_ss.iter().flatten().fold(1.0, |m: f64, v| m.max(v.abs()));
        if g.amax() < 1e-12 * scale {
            return Some(s);
        }
        let h = Matrix3::from_fn(|i, j| d.h_ss[i][j]);
        let step = h.lu().solve(&(-g))?;
        let mut t = 1.0;
        loop {
            let trial = [s[0] + t * step[0], s[1] + t * step[1], s[2] + t * step[2]];
            if let Some(gt) = score_cov(data, mu0, &trial) {
                if Vector3::from(gt).amax() < g.amax() || step.amax() * t < 1e-14 {
                    s = trial;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-6 {
                return None;
            }
        }
        if step.amax() * t < 1e-15 * (1.0 + s.iter().fold(0.0, |m: f64, v| m.max(v.abs()))) {
            return Some(s);
        }
    }
    let g = score_cov(data, mu0, &s)?;
    (norm_inf(&g) < 1e-8).then_some(s)
}

/// Importance weight `1/|det ∂ψ̂/∂ψ|` at `ψ = psi_star`, where `ψ ↦ ψ̂`
/// synthesizes data from `ψ` and solves the constrained score equations.
///
/// `ψ̂` is expressed in covariance coordinates, which changes the weight by
/// a factor that is the same for every replicate.
pub fn weight_bivar(
    u: &[f64],
    data: &DtaData,
    mu0: [f64; 2],
    psi_hat_c: &BivarNuisance,
    psi_star: &BivarNuisance,
) -> f64 {
    weight_bivar_with_step(u, data, mu0, psi_hat_c, psi_star, WEIGHT_STEP)
}

/// [`weight_bivar`] with relative step `rel_step`.
pub fn weight_bivar_with_step(
    u: &[f64],
    data: &DtaData,
    mu0: [f64; 2],
    psi_hat_c: &BivarNuisance,
    psi_star: &BivarNuisance,
    rel_step: f64,
) -> f64 {
    match jacobian(u, data, mu0, psi_hat_c, psi_star, rel_step) {
        Some(j) => 1.0 / j.determinant().abs(),
        None => f64::NAN,
    }
}

pub(crate) fn jacobian(
    u: &[f64],
    data: &DtaData,
    mu0: [f64; 2],
    psi_hat_c: &BivarNuisance,
    psi_star: &BivarNuisance,
    rel_step: f64,
) -> Option<Matrix3<f64>> {
    if u.len() != 2 * data.k() {
        return None;
    }
    let s_hat = psi_hat_c.covariance();
    let refit = |psi: [f64; 3]| -> Option<[f64; 3]> {
        let s = BivarNuisance::from_array(psi).covariance();
        let y = synth_cov(data, u, mu0, &s)?;
        score_root(&y, mu0, s_hat)
    };
    let x = psi_star.as_array();
    let lower = [0.0, 0.0, -RHO_BOUND];
    let upper = [f64::INFINITY, f64::INFINITY, RHO_BOUND];
    let mut jac = Matrix3::zeros();
    for j in 0..3 {
        let h = rel_step * x[j].abs().max(1.0);
        let (mut xp, mut xm) = (x, x);
        xp[j] += h;
        xm[j] -= h;
        let col = if xm[j] >= lower[j] && xp[j] <= upper[j] {
            let (a, b) = (refit(xp)?, refit(xm)?);
            [0, 1, 2].map(|i| (a[i] - b[i]) / (2.0 * h))
        } else if xp[j] <= upper[j] {
            let (a, b) = (refit(xp)?, refit(x)?);
            [0, 1, 2].map(|i| (a[i] - b[i]) / h)
        } else {
            let (a, b) = (refit(x)?, refit(xm)?);
            [0, 1, 2].map(|i| (a[i] - b[i]) / h)
        };
        for i in 0..3 {
            jac[(i, j)] = col[i];
        }
    }
    Some(jac)
}

/// The test of `H0: (μ_A, μ_B) = μ0` with nuisance `(σ_A², σ_B², ρ)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BivarMeanTest;

impl PivotModel for BivarMeanTest {
    type Data = DtaData;
    type Param = [f64; 2];
    type Nuisance = BivarNuisance;

    fn draw_dimension(&self, data: &DtaData) -> usize {
        2 * data.k()
    }

    fn constrained_fit(&self, data: &DtaData, mu0: &[f64; 2]) -> Result<ConstrainedFit<BivarNuisance>> {
        let fit = fit_constrained_bivar(data, *mu0)?;
        Ok(ConstrainedFit {
            nuisance: fit.nuisance,
            deviance: fit.deviance,
        })
    }

    fn unconstrained_fit(
        &self,
        data: &DtaData,
    ) -> Result<UnconstrainedFit<[f64; 2], BivarNuisance>> {
        let fit = fit_ml_bivar(data)?;
        Ok(UnconstrainedFit {
            estimate: fit.mu,
            nuisance: fit.nuisance,
            deviance: fit.deviance,
        })
    }

    fn solve_pivot(
        &self,
        data: &DtaData,
        u: &[f64],
        mu0: &[f64; 2],
        psi_hat_c: &BivarNuisance,
    ) -> Result<PivotSolution<BivarNuisance>> {
        pivot_psi_star(u, data, *mu0, psi_hat_c)
    }

    fn synth_data(&self, data: &DtaData, u: &[f64], mu0: &[f64; 2], psi: &BivarNuisance) -> DtaData {
        synth_cov(data, u, *mu0, &psi.covariance())
            .expect("parameter-space covariance gives positive definite marginals")
    }

    fn weight(
        &self,
        data: &DtaData,
        u: &[f64],
        mu0: &[f64; 2],
        psi_hat_c: &BivarNuisance,
        psi_star: &BivarNuisance,
    ) -> f64 {
        weight_bivar(u, data, *mu0, psi_hat_c, psi_star)
    }

    fn lrt_stat(&self, data: &DtaData, mu0: &[f64; 2]) -> Result<f64> {
        let starts = cold_starts(data);
        let c = fit_constrained_from(data, *mu0, &starts)?;
        let u = fit_ml_from(data, &starts)?;
        Ok(snap_lrt(c.deviance - u.deviance.min(c.deviance)))
    }

    fn synthetic_lrt_stat(
        &self,
        synthetic: &DtaData,
        mu0: &[f64; 2],
        psi_hat_c: &BivarNuisance,
    ) -> Result<f64> {
        let starts = [*psi_hat_c, moment_start(synthetic)];
        let c = fit_constrained_from(synthetic, *mu0, &starts)?;
        let mut ml_starts = starts.to_vec();
        ml_starts.push(c.nuisance);
        let u = fit_ml_from(synthetic, &ml_starts)?;
        Ok(snap_lrt(c.deviance - u.deviance.min(c.deviance)))
    }
}

/// Monte Carlo p-value of `H0: μ = mu0`.
pub fn p_value_bivar(data: &DtaData, mu0: [f64; 2], replicates: usize, seed: u64) -> Result<PValueResult> {
    conditional_p_value(&BivarMeanTest, data, &mu0, replicates, seed)
}
