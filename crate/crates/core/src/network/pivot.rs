//! Two-stage pivot, determinant-ratio weight and Monte Carlo inference for
//! a contrast `η = cᵗβ`.
//!
//! The model is assumed transformed so that `β_1` is the tested coordinate;
//! `W₁` is the first design column and `W₂` the rest, with coefficients `ω`.
//! For a draw `u` the synthetic response is `W₁β₁₀ + W₂ω + A(τ²)u` with
//! `A(τ²)` the blockwise lower Cholesky factor of `V(τ²)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::fit::{fit_constrained_net, fit_ml_net, tau2_upper, NetNuisance};
use super::{contrast_transform, NetworkModel};
use crate::error::{Error, Result};
use crate::mc::{
    conditional_p_value, conditional_p_value_with_draws, invert_to_interval, ConfidenceInterval,
    ConstrainedFit, DrawBank, InversionOptions, PValueResult, PivotModel, PivotSolution,
    UnconstrainedFit,
};
use crate::optim::brent_root;
use crate::univariate::normal_quantile;

/// Quantities fixed by the conditioning value `τ̂_c²`.
struct Conditioning {
    vinv: Vec<DMatrix<f64>>,
    /// `V̂⁻¹ Q V̂⁻¹` per block.
    kq: Vec<DMatrix<f64>>,
    w2: Vec<DMatrix<f64>>,
    /// `tr(V̂⁻¹Q)`.
    lhs: f64,
    /// Cholesky factor of `M = W₂ᵗV̂⁻¹W₂`; `None` when `p = 1`.
    m: Option<Cholesky<f64, Dyn>>,
    m_mat: DMatrix<f64>,
}

impl Conditioning {
    fn new(model: &NetworkModel, tau2_hat_c: f64) -> Result<Self> {
        let q = model.p() - 1;
        let mut out = Conditioning {
            vinv: Vec::with_capacity(model.k()),
            kq: Vec::with_capacity(model.k()),
            w2: Vec::with_capacity(model.k()),
            lhs: 0.0,
            m: None,
            m_mat: DMatrix::zeros(q, q),
        };
        for b in &model.blocks {
            let vinv = b
                .v(tau2_hat_c)
                .cholesky()
                .ok_or_else(|| Error::numerical("V block is not positive definite"))?
                .inverse();
            let vq = &vinv * &b.q;
            out.lhs += vq.trace();
            let w2 = b.x.columns(1, q).into_owned();
            out.m_mat += w2.transpose() * &vinv * &w2;
            out.kq.push(&vq * &vinv);
            out.vinv.push(vinv);
            out.w2.push(w2);
        }
        if q > 0 {
            out.m = Some(
                out.m_mat
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::numerical("W2' V^-1 W2 is singular"))?,
            );
        }
        Ok(out)
    }

    /// `ω − ω̂_c` solving the first pivot equation for the draw `a = A u`.
    fn omega_shift(&self, a: &[DVector<f64>]) -> DVector<f64> {
        let Some(m) = &self.m else {
            return DVector::zeros(0);
        };
        let mut g = DVector::zeros(self.m_mat.nrows());
        for ((w2, vinv), a) in self.w2.iter().zip(&self.vinv).zip(a) {
            g += w2.transpose() * (vinv * a);
        }
        -m.solve(&g)
    }

    fn residuals(&self, a: &[DVector<f64>], shift: &DVector<f64>) -> Vec<DVector<f64>> {
        a.iter().zip(&self.w2).map(|(a, w2)| a + w2 * shift).collect()
    }

    fn equations(&self, r: &[DVector<f64>]) -> (DVector<f64>, f64) {
        let mut g1 = DVector::zeros(self.m_mat.nrows());
        let mut g2 = self.lhs;
        for (((r, w2), vinv), kq) in r.iter().zip(&self.w2).zip(&self.vinv).zip(&self.kq) {
            g1 += w2.transpose() * (vinv * r);
            g2 -= r.dot(&(kq * r));
        }
        (g1, g2)
    }

    /// `W₂ᵗ V̂⁻¹QV̂⁻¹ r`.
    fn quad_gradient(&self, r: &[DVector<f64>]) -> DVector<f64> {
        let mut g = DVector::zeros(self.m_mat.nrows());
        for ((r, w2), kq) in r.iter().zip(&self.w2).zip(&self.kq) {
            g += w2.transpose() * (kq * r);
        }
        g
    }
}

/// `A(τ²)u` split by study.
fn draws(model: &NetworkModel, u: &[f64], tau2: f64) -> Result<Vec<DVector<f64>>> {
    if u.len() != model.n_obs() {
        return Err(Error::invalid("draw length does not match the number of contrasts"));
    }
    let mut out = Vec::with_capacity(model.k());
    let mut row = 0;
    for b in &model.blocks {
        let m = b.y.len();
        let chol = b
            .v(tau2)
            .cholesky()
            .ok_or_else(|| Error::numerical("V block is not positive definite"))?;
        out.push(chol.l() * DVector::from_column_slice(&u[row..row + m]));
        row += m;
    }
    Ok(out)
}

/// Pivot equations `(G₁, G₂)` at `(ω, τ²)` for the draw `u`, conditioning on
/// `(ω̂_c, τ̂_c²)`. They do not depend on `β₁₀`.
pub fn pivot_equations_net(
    u: &[f64],
    model: &NetworkModel,
    omega: &[f64],
    tau2: f64,
    omega_hat_c: &[f64],
    tau2_hat_c: f64,
) -> Result<(Vec<f64>, f64)> {
    let cond = Conditioning::new(model, tau2_hat_c)?;
    let (g1, g2) = equations_at(&cond, model, u, omega, tau2, omega_hat_c)?;
    Ok((g1.iter().copied().collect(), g2))
}

fn equations_at(
    cond: &Conditioning,
    model: &NetworkModel,
    u: &[f64],
    omega: &[f64],
    tau2: f64,
    omega_hat_c: &[f64],
) -> Result<(DVector<f64>, f64)> {
    if omega.len() + 1 != model.p() || omega_hat_c.len() + 1 != model.p() {
        return Err(Error::invalid("omega has the wrong length"));
    }
    let a = draws(model, u, tau2)?;
    let shift = DVector::from_iterator(
        omega.len(),
        omega.iter().zip(omega_hat_c).map(|(w, c)| w - c),
    );
    Ok(cond.equations(&cond.residuals(&a, &shift)))
}

/// `(ω*, τ²*)` for the draw `u`.
///
/// `τ²*` is the root of the second equation after substituting `ω*(u, τ²)`;
/// it is clamped to 0 when the quadratic form already exceeds the trace at
/// `τ² = 0`. A draw without a root below the expanded search bound fails.
pub fn pivot_net(
    u: &[f64],
    model: &NetworkModel,
    beta10: f64,
    omega_hat_c: &[f64],
    tau2_hat_c: f64,
) -> Result<PivotSolution<NetNuisance>> {
    if omega_hat_c.len() + 1 != model.p() {
        return Err(Error::invalid("omega has the wrong length"));
    }
    let cond = Conditioning::new(model, tau2_hat_c)?;
    let excess = |t: f64| -> f64 {
        match draws(model, u, t) {
            Ok(a) => {
                let r = cond.residuals(&a, &cond.omega_shift(&a));
                -cond.equations(&r).1
            }
            Err(_) => f64::NAN,
        }
    };
    let at_zero = excess(0.0);
    let (tau2, clamped) = if at_zero >= 0.0 {
        (0.0, at_zero > 0.0)
    } else {
        let mut hi = tau2_upper(model, Some(beta10))
            .ok_or_else(|| Error::numerical("V is not positive definite at tau2 = 0"))?
            .max(10.0 * tau2_hat_c);
        let mut found = false;
        for _ in 0..4 {
            if excess(hi) >= 0.0 {
                found = true;
                break;
            }
            hi *= 4.0;
        }
        if !found {
            return Err(Error::PivotFailed(format!("no root of the variance pivot below {hi}")));
        }
        (brent_root(&excess, 0.0, hi, 1e-14 * (1.0 + hi), 300)?, false)
    };
    let a = draws(model, u, tau2)?;
    let shift = cond.omega_shift(&a);
    Ok(PivotSolution {
        value: NetNuisance {
            omega: omega_hat_c.iter().zip(shift.iter()).map(|(c, s)| c + s).collect(),
            tau2,
        },
        clamped,
    })
}

/// Jacobians of `G = (G₁, G₂)` in `(ω, τ²)` (denominator) and in
/// `(ω̂_c, τ̂_c²)` (numerator). The `ω` blocks are analytic, the variance
/// columns are finite differences.
#[derive(Debug, Clone)]
pub struct NetJacobians {
    pub numerator: DMatrix<f64>,
    pub denominator: DMatrix<f64>,
}

/// Derivative of `f` at `x ≥ 0`; central when `x ≥ h`, otherwise the
/// second-order forward formula.
fn fd<F>(f: F, x: f64, h: f64) -> Result<DVector<f64>>
where
    F: Fn(f64) -> Result<DVector<f64>>,
{
    if x >= h {
        Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
    } else {
        Ok((f(x)? * -3.0 + f(x + h)? * 4.0 - f(x + 2.0 * h)?) / (2.0 * h))
    }
}

fn stacked((g1, g2): (DVector<f64>, f64)) -> DVector<f64> {
    DVector::from_iterator(g1.len() + 1, g1.iter().copied().chain(std::iter::once(g2)))
}

impl NetJacobians {
    /// Jacobians at `(ω*, τ²*)`; `step` overrides the variance step
    /// `1e-5·max(1, τ²)`.
    pub fn compute(
        u: &[f64],
        model: &NetworkModel,
        omega_hat_c: &[f64],
        tau2_hat_c: f64,
        omega_star: &[f64],
        tau2_star: f64,
        step: Option<f64>,
    ) -> Result<Self> {
        let p = model.p();
        let q = p - 1;
        let cond = Conditioning::new(model, tau2_hat_c)?;
        let a = draws(model, u, tau2_star)?;
        let shift = DVector::from_iterator(
            q,
            omega_star.iter().zip(omega_hat_c).map(|(w, c)| w - c),
        );
        let r = cond.residuals(&a, &shift);
        let grad = cond.quad_gradient(&r) * 2.0;

        let mut den = DMatrix::zeros(p, p);
        let mut num = DMatrix::zeros(p, p);
        den.view_mut((0, 0), (q, q)).copy_from(&cond.m_mat);
        num.view_mut((0, 0), (q, q)).copy_from(&(-&cond.m_mat));
        for j in 0..q {
            den[(q, j)] = -grad[j];
            num[(q, j)] = grad[j];
        }

        let h = step.unwrap_or(1e-5 * tau2_star.max(1.0));
        let col = fd(
            |t| equations_at(&cond, model, u, omega_star, t, omega_hat_c).map(stacked),
            tau2_star,
            h,
        )?;
        den.column_mut(q).copy_from(&col);

        let h = step.unwrap_or(1e-5 * tau2_hat_c.max(1.0));
        let col = fd(
            |t| {
                let c = Conditioning::new(model, t)?;
                equations_at(&c, model, u, omega_star, tau2_star, omega_hat_c).map(stacked)
            },
            tau2_hat_c,
            h,
        )?;
        num.column_mut(q).copy_from(&col);
        Ok(NetJacobians {
            numerator: num,
            denominator: den,
        })
    }

    /// `|det numerator| / |det denominator|`.
    pub fn weight(&self) -> f64 {
        let den = self.denominator.determinant();
        if den == 0.0 || !den.is_finite() {
            return f64::NAN;
        }
        self.numerator.determinant().abs() / den.abs()
    }
}

/// Importance weight of the draw `u`; NaN when it cannot be evaluated.
pub fn weight_net(
    u: &[f64],
    model: &NetworkModel,
    beta10: f64,
    omega_hat_c: &[f64],
    tau2_hat_c: f64,
    omega_star: &[f64],
    tau2_star: f64,
) -> f64 {
    weight_net_with_step(
        u,
        model,
        beta10,
        omega_hat_c,
        tau2_hat_c,
        omega_star,
        tau2_star,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn weight_net_with_step(
    u: &[f64],
    model: &NetworkModel,
    _beta10: f64,
    omega_hat_c: &[f64],
    tau2_hat_c: f64,
    omega_star: &[f64],
    tau2_star: f64,
    step: Option<f64>,
) -> f64 {
    NetJacobians::compute(u, model, omega_hat_c, tau2_hat_c, omega_star, tau2_star, step)
        .map(|j| j.weight())
        .unwrap_or(f64::NAN)
}

/// Pivot model for `H0: β₁ = β₁₀` on a transformed network model.
#[derive(Debug, Clone, Copy, Default)]
pub struct ContrastTest;

impl PivotModel for ContrastTest {
    type Data = NetworkModel;
    type Param = f64;
    type Nuisance = NetNuisance;

    fn draw_dimension(&self, model: &NetworkModel) -> usize {
        model.n_obs()
    }

    fn constrained_fit(&self, model: &NetworkModel, beta10: &f64) -> Result<ConstrainedFit<NetNuisance>> {
        let fit = fit_constrained_net(model, *beta10)?;
        if !fit.converged {
            return Err(Error::Convergence(format!(
                "constrained network fit at {beta10}"
            )));
        }
        Ok(ConstrainedFit {
            nuisance: fit.nuisance(),
            deviance: fit.deviance,
        })
    }

    fn unconstrained_fit(&self, model: &NetworkModel) -> Result<UnconstrainedFit<f64, NetNuisance>> {
        let fit = fit_ml_net(model)?;
        if !fit.converged {
            return Err(Error::Convergence("network fit".into()));
        }
        Ok(UnconstrainedFit {
            estimate: fit.beta[0],
            nuisance: fit.nuisance(),
            deviance: fit.deviance,
        })
    }

    fn solve_pivot(
        &self,
        model: &NetworkModel,
        u: &[f64],
        beta10: &f64,
        psi_hat_c: &NetNuisance,
    ) -> Result<PivotSolution<NetNuisance>> {
        pivot_net(u, model, *beta10, &psi_hat_c.omega, psi_hat_c.tau2)
    }

    fn synth_data(&self, model: &NetworkModel, u: &[f64], beta10: &f64, psi: &NetNuisance) -> NetworkModel {
        let a = draws(model, u, psi.tau2).expect("pivot solutions keep V positive definite");
        let mut coef = Vec::with_capacity(model.p());
        coef.push(*beta10);
        coef.extend_from_slice(&psi.omega);
        let coef = DVector::from_vec(coef);
        let y: Vec<f64> = model
            .blocks
            .iter()
            .zip(&a)
            .flat_map(|(b, a)| (&b.x * &coef + a).iter().copied().collect::<Vec<_>>())
            .collect();
        model.with_y(&y).expect("same design")
    }

    fn weight(
        &self,
        model: &NetworkModel,
        u: &[f64],
        beta10: &f64,
        psi_hat_c: &NetNuisance,
        psi_star: &NetNuisance,
    ) -> f64 {
        weight_net(
            u,
            model,
            *beta10,
            &psi_hat_c.omega,
            psi_hat_c.tau2,
            &psi_star.omega,
            psi_star.tau2,
        )
    }
}

/// Monte Carlo p-value of `H0: cᵗβ = eta0`.
pub fn p_value_contrast(
    model: &NetworkModel,
    c: &[f64],
    eta0: f64,
    replicates: usize,
    seed: u64,
) -> Result<PValueResult> {
    let t = contrast_transform(model, c)?;
    conditional_p_value(&ContrastTest, &t, &eta0, replicates, seed)
}

/// Monte Carlo confidence interval for `cᵗβ`.
pub fn ci_contrast(
    model: &NetworkModel,
    c: &[f64],
    alpha: f64,
    replicates: usize,
    seed: u64,
) -> Result<ConfidenceInterval> {
    let t = contrast_transform(model, c)?;
    let fit = fit_ml_net(&t)?;
    let half_width = normal_quantile(1.0 - alpha / 2.0) * fit.cov_beta[0][0].sqrt();
    let bank = DrawBank::generate(t.n_obs(), replicates, seed);
    invert_to_interval(
        |eta0| Ok(conditional_p_value_with_draws(&ContrastTest, &t, &eta0, &bank)?.p),
        fit.beta[0],
        half_width,
        None,
        InversionOptions::new(alpha, half_width),
    )
}
