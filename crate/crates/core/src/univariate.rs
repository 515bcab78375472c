//! Univariate random-effects meta-analysis.
//!
//! Model: `y_i ~ N(μ, τ² + σ_i²)` with known within-study variances.
//! Deviances are `−2 log L` without the `k log 2π` constant.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mc::{
    conditional_p_value, conditional_p_value_with_draws, invert_to_interval, ConfidenceInterval,
    ConstrainedFit, DrawBank, InversionOptions, PValueResult, PivotModel, PivotSolution,
    UnconstrainedFit,
};
use crate::optim::brent_root;

const ROOT_MAX_ITER: usize = 200;

/// Per-study effect estimates and their known within-study variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateData {
    y: Vec<f64>,
    sigma2: Vec<f64>,
}

impl UnivariateData {
    pub fn new(y: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if y.len() != sigma2.len() {
            return Err(Error::invalid(format!(
                "{} effects but {} variances",
                y.len(),
                sigma2.len()
            )));
        }
        if y.len() < 2 {
            return Err(Error::invalid("at least two studies are required"));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("effect {} is not finite", i + 1)));
        }
        if let Some(i) = sigma2.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid(format!(
                "variance {} must be positive and finite",
                i + 1
            )));
        }
        Ok(UnivariateData { y, sigma2 })
    }

    pub fn k(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniFit {
    pub mu: f64,
    pub tau2: f64,
    pub deviance: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `Σ log(τ² + σ_i²) + Σ (y_i − μ)² / (τ² + σ_i²)`.
pub fn deviance(data: &UnivariateData, mu: f64, tau2: f64) -> f64 {
    data.y
        .iter()
        .zip(&data.sigma2)
        .map(|(y, s2)| {
            let v = tau2 + s2;
            v.ln() + (y - mu) * (y - mu) / v
        })
        .sum()
}

/// Inverse-variance weighted mean at heterogeneity `tau2`.
pub fn weighted_mean(data: &UnivariateData, tau2: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (y, s2) in data.y.iter().zip(&data.sigma2) {
        let w = 1.0 / (tau2 + s2);
        num += w * y;
        den += w;
    }
    num / den
}

/// Twice the derivative of the log-likelihood in `τ²` at fixed `μ`:
/// `Σ (y_i − μ)²/v_i² − Σ 1/v_i`.
pub fn tau2_score(data: &UnivariateData, mu: f64, tau2: f64) -> f64 {
    data.y
        .iter()
        .zip(&data.sigma2)
        .map(|(y, s2)| {
            let v = tau2 + s2;
            let r = y - mu;
            r * r / (v * v) - 1.0 / v
        })
        .sum()
}

/// Variance root search shared by the constrained and profiled fits: the
/// score is positive at zero and negative beyond `upper`.
fn variance_root<F: FnMut(f64) -> f64>(mut score: F, upper: f64) -> (f64, bool, usize) {
    let mut calls = 0;
    let xtol = 1e-15 * (1.0 + upper);
    let res = brent_root(
        |t| {
            calls += 1;
            score(t)
        },
        0.0,
        upper,
        xtol,
        ROOT_MAX_ITER,
    );
    match res {
        Ok(t) => (t.max(0.0), true, calls),
        Err(_) => (0.0, false, calls),
    }
}

/// Constrained ML fit under `H0: μ = mu0`.
///
/// `τ̂_c²` is the root of [`tau2_score`], or zero when the score is
/// nonpositive at `τ² = 0`. At `τ² ≥ max_i (y_i − μ0)²` every score term is
/// negative, which bounds the search.
pub fn fit_ml_constrained(data: &UnivariateData, mu0: f64) -> UniFit {
    let upper = data
        .y
        .iter()
        .map(|y| (y - mu0) * (y - mu0))
        .fold(0.0, f64::max);
    let (tau2, converged, iterations) = if tau2_score(data, mu0, 0.0) <= 0.0 {
        (0.0, true, 1)
    } else {
        variance_root(|t| tau2_score(data, mu0, t), upper)
    };
    UniFit {
        mu: mu0,
        tau2,
        deviance: deviance(data, mu0, tau2),
        converged,
        iterations,
    }
}

/// Unconstrained ML fit.
///
/// Profiles `μ` by its weighted mean and solves the profiled `τ²` score,
/// which is the fixed point of the usual alternating mean/variance
/// iteration. The search interval is bounded by the squared range of `y`.
pub fn fit_ml(data: &UnivariateData) -> UniFit {
    let profile_score = |t: f64| tau2_score(data, weighted_mean(data, t), t);
    let (lo, hi) = data
        .y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    let range2 = (hi - lo) * (hi - lo);
    let (tau2, converged, iterations) = if profile_score(0.0) <= 0.0 {
        (0.0, true, 1)
    } else {
        variance_root(profile_score, range2)
    };
    let mu = weighted_mean(data, tau2);
    UniFit {
        mu,
        tau2,
        deviance: deviance(data, mu, tau2),
        converged,
        iterations,
    }
}

/// `G(U, τ², τ̂_c²) = Σ 1/v̂_i − Σ (τ² + σ_i²) u_i² / v̂_i²`, `v̂_i = τ̂_c² + σ_i²`.
pub fn pivot_residual(u: &[f64], data: &UnivariateData, tau2: f64, tau2_hat_c: f64) -> f64 {
    u.iter()
        .zip(&data.sigma2)
        .map(|(u, s2)| {
            let vh = tau2_hat_c + s2;
            1.0 / vh - (tau2 + s2) * u * u / (vh * vh)
        })
        .sum()
}

/// Closed-form root of [`pivot_residual`] in `τ²`, before clamping.
pub fn tau2_star_raw(u: &[f64], data: &UnivariateData, tau2_hat_c: f64) -> Result<f64> {
    if u.len() != data.k() {
        return Err(Error::invalid("draw length does not match number of studies"));
    }
    let (mut den, mut num) = (0.0, 0.0);
    for (u, s2) in u.iter().zip(&data.sigma2) {
        let vh = tau2_hat_c + s2;
        let vh2 = vh * vh;
        den += u * u / vh2;
        num += (tau2_hat_c + s2 * (1.0 - u * u)) / vh2;
    }
    if den == 0.0 {
        return Err(Error::PivotFailed("all draws are zero".into()));
    }
    Ok(num / den)
}

/// `τ*²(U)`, clamped at zero.
pub fn pivot_tau2_star(u: &[f64], data: &UnivariateData, tau2_hat_c: f64) -> Result<f64> {
    tau2_star_raw(u, data, tau2_hat_c).map(|t| t.max(0.0))
}

/// Weight `|∂τ̂_c²/∂τ²|⁻¹` from the implicit function theorem applied to `G`.
pub fn weight_mu(u: &[f64], data: &UnivariateData, tau2_hat_c: f64, tau2_star: f64) -> f64 {
    let (mut den, mut num) = (0.0, 0.0);
    for (u, s2) in u.iter().zip(&data.sigma2) {
        let vh = tau2_hat_c + s2;
        let u2 = u * u;
        den += u2 / (vh * vh);
        num += (2.0 * (tau2_star + s2) * u2 - vh) / (vh * vh * vh);
    }
    num.abs() / den
}

/// Pivot model for `H0: μ = μ0` with nuisance `τ²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanTest;

impl PivotModel for MeanTest {
    type Data = UnivariateData;
    type Param = f64;
    type Nuisance = f64;

    fn draw_dimension(&self, data: &UnivariateData) -> usize {
        data.k()
    }

    fn constrained_fit(&self, data: &UnivariateData, mu0: &f64) -> Result<ConstrainedFit<f64>> {
        let fit = fit_ml_constrained(data, *mu0);
        if !fit.converged {
            return Err(Error::Convergence(format!(
                "constrained heterogeneity fit at mu0 = {mu0}"
            )));
        }
        Ok(ConstrainedFit {
            nuisance: fit.tau2,
            deviance: fit.deviance,
        })
    }

    fn unconstrained_fit(&self, data: &UnivariateData) -> Result<UnconstrainedFit<f64, f64>> {
        let fit = fit_ml(data);
        if !fit.converged {
            return Err(Error::Convergence("unconstrained heterogeneity fit".into()));
        }
        Ok(UnconstrainedFit {
            estimate: fit.mu,
            nuisance: fit.tau2,
            deviance: fit.deviance,
        })
    }

    fn solve_pivot(
        &self,
        data: &UnivariateData,
        u: &[f64],
        _mu0: &f64,
        tau2_hat_c: &f64,
    ) -> Result<PivotSolution<f64>> {
        let raw = tau2_star_raw(u, data, *tau2_hat_c)?;
        Ok(PivotSolution {
            value: raw.max(0.0),
            clamped: raw < 0.0,
        })
    }

    fn synth_data(&self, data: &UnivariateData, u: &[f64], mu0: &f64, tau2: &f64) -> UnivariateData {
        let y = u
            .iter()
            .zip(&data.sigma2)
            .map(|(u, s2)| mu0 + u * (tau2 + s2).sqrt())
            .collect();
        UnivariateData {
            y,
            sigma2: data.sigma2.clone(),
        }
    }

    fn weight(
        &self,
        data: &UnivariateData,
        u: &[f64],
        _mu0: &f64,
        tau2_hat_c: &f64,
        tau2_star: &f64,
    ) -> f64 {
        weight_mu(u, data, *tau2_hat_c, *tau2_star)
    }
}

/// Pivot model for `H0: τ² = τ0²` with nuisance `μ`; unit weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeterogeneityTest;

impl PivotModel for HeterogeneityTest {
    type Data = UnivariateData;
    type Param = f64;
    type Nuisance = f64;

    fn draw_dimension(&self, data: &UnivariateData) -> usize {
        data.k()
    }

    fn constrained_fit(&self, data: &UnivariateData, tau2_0: &f64) -> Result<ConstrainedFit<f64>> {
        if !(*tau2_0 >= 0.0) {
            return Err(Error::invalid("tested heterogeneity variance must be nonnegative"));
        }
        let mu = weighted_mean(data, *tau2_0);
        Ok(ConstrainedFit {
            nuisance: mu,
            deviance: deviance(data, mu, *tau2_0),
        })
    }

    fn unconstrained_fit(&self, data: &UnivariateData) -> Result<UnconstrainedFit<f64, f64>> {
        let fit = fit_ml(data);
        if !fit.converged {
            return Err(Error::Convergence("unconstrained heterogeneity fit".into()));
        }
        Ok(UnconstrainedFit {
            estimate: fit.tau2,
            nuisance: fit.mu,
            deviance: fit.deviance,
        })
    }

    fn solve_pivot(
        &self,
        data: &UnivariateData,
        u: &[f64],
        tau2_0: &f64,
        mu_hat: &f64,
    ) -> Result<PivotSolution<f64>> {
        Ok(PivotSolution {
            value: mu_star(u, data, *tau2_0, *mu_hat),
            clamped: false,
        })
    }

    fn synth_data(&self, data: &UnivariateData, u: &[f64], tau2_0: &f64, mu: &f64) -> UnivariateData {
        let y = u
            .iter()
            .zip(&data.sigma2)
            .map(|(u, s2)| mu + u * (tau2_0 + s2).sqrt())
            .collect();
        UnivariateData {
            y,
            sigma2: data.sigma2.clone(),
        }
    }

    fn weight(&self, _: &UnivariateData, _: &[f64], _: &f64, _: &f64, _: &f64) -> f64 {
        1.0
    }
}

/// `μ*(U) = μ̂ − (Σ 1/v_i)⁻¹ Σ u_i/√v_i` with `v_i = τ0² + σ_i²`.
pub fn mu_star(u: &[f64], data: &UnivariateData, tau2_0: f64, mu_hat: f64) -> f64 {
    let (mut info, mut s) = (0.0, 0.0);
    for (u, s2) in u.iter().zip(&data.sigma2) {
        let v = tau2_0 + s2;
        info += 1.0 / v;
        s += u / v.sqrt();
    }
    mu_hat - s / info
}

pub fn p_value_mu(data: &UnivariateData, mu0: f64, replicates: usize, seed: u64) -> Result<PValueResult> {
    conditional_p_value(&MeanTest, data, &mu0, replicates, seed)
}

pub fn p_value_tau2(
    data: &UnivariateData,
    tau2_0: f64,
    replicates: usize,
    seed: u64,
) -> Result<PValueResult> {
    conditional_p_value(&HeterogeneityTest, data, &tau2_0, replicates, seed)
}

pub(crate) fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p)
}

/// Monte Carlo confidence interval for `μ`.
pub fn ci_mu(data: &UnivariateData, alpha: f64, replicates: usize, seed: u64) -> Result<ConfidenceInterval> {
    let fit = fit_ml(data);
    if !fit.converged {
        return Err(Error::Convergence("unconstrained heterogeneity fit".into()));
    }
    let info: f64 = data.sigma2.iter().map(|s2| 1.0 / (fit.tau2 + s2)).sum();
    let half_width = normal_quantile(1.0 - alpha / 2.0) / info.sqrt();
    let bank = DrawBank::generate(data.k(), replicates, seed);
    invert_to_interval(
        |mu0| Ok(conditional_p_value_with_draws(&MeanTest, data, &mu0, &bank)?.p),
        fit.mu,
        half_width,
        None,
        InversionOptions::new(alpha, half_width),
    )
}

/// Monte Carlo confidence interval for `τ²`; the lower limit is clamped at 0.
pub fn ci_tau2(data: &UnivariateData, alpha: f64, replicates: usize, seed: u64) -> Result<ConfidenceInterval> {
    let fit = fit_ml(data);
    if !fit.converged {
        return Err(Error::Convergence("unconstrained heterogeneity fit".into()));
    }
    // Fisher information for τ² at the estimate is ½ Σ 1/v_i².
    let info: f64 = data
        .sigma2
        .iter()
        .map(|s2| 0.5 / ((fit.tau2 + s2) * (fit.tau2 + s2)))
        .sum();
    let half_width = normal_quantile(1.0 - alpha / 2.0) / info.sqrt();
    let bank = DrawBank::generate(data.k(), replicates, seed);
    invert_to_interval(
        |t0| Ok(conditional_p_value_with_draws(&HeterogeneityTest, data, &t0, &bank)?.p),
        fit.tau2,
        half_width,
        Some(0.0),
        InversionOptions::new(alpha, half_width),
    )
}
