//! ML, REML and constrained fits of the network model.
//!
//! The coefficients are profiled out by generalized least squares at each
//! `τ²`; `τ²` minimizes the profiled objective by golden-section search and
//! is then polished as a root of the profiled score.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::NetworkModel;
use crate::error::{Error, Result};
use crate::optim::{brent_root, golden_section};

/// Nuisance parameters of the contrast test: the remaining coefficients
/// `ω = (β_2, …, β_p)` and `τ²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetNuisance {
    pub omega: Vec<f64>,
    pub tau2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetFit {
    pub beta: Vec<f64>,
    pub tau2: f64,
    /// Minimized objective: the deviance, or the REML objective for
    /// [`fit_reml_net`].
    pub deviance: f64,
    /// `(Xᵗ V(τ̂²)⁻¹ X)⁻¹` over the estimated coefficients.
    pub cov_beta: Vec<Vec<f64>>,
    pub converged: bool,
}

impl NetFit {
    pub fn nuisance(&self) -> NetNuisance {
        NetNuisance {
            omega: self.beta[1..].to_vec(),
            tau2: self.tau2,
        }
    }
}

/// GLS profile at fixed `τ²`, optionally with `β_1 = beta10` fixed.
pub(crate) struct Profile {
    pub free: DVector<f64>,
    pub info: DMatrix<f64>,
    pub deviance: f64,
    /// Derivative of the profiled deviance in `τ²`.
    pub score: f64,
    pub reml_logdet: f64,
    /// Derivative of `reml_logdet` in `τ²`.
    pub reml_score: f64,
}

pub(crate) fn profile(model: &NetworkModel, tau2: f64, beta10: Option<f64>) -> Option<Profile> {
    let p = model.p();
    let start = usize::from(beta10.is_some());
    let nfree = p - start;
    let mut info = DMatrix::zeros(nfree, nfree);
    let mut rhs = DVector::zeros(nfree);
    let mut parts = Vec::with_capacity(model.k());
    let mut logdet = 0.0;
    for b in &model.blocks {
        let chol = b.v(tau2).cholesky()?;
        logdet += 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let vinv = chol.inverse();
        let d = b.x.columns(start, nfree).into_owned();
        let yo = match beta10 {
            Some(b10) => &b.y - b.x.column(0) * b10,
            None => b.y.clone(),
        };
        let dv = d.transpose() * &vinv;
        info += &dv * &d;
        rhs += &dv * &yo;
        parts.push((vinv, d, yo));
    }
    let (free, info_inv) = if nfree == 0 {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    } else {
        let ch = info.clone().cholesky()?;
        (ch.solve(&rhs), ch.inverse())
    };
    let mut deviance = logdet;
    let mut score = 0.0;
    let mut k = DMatrix::zeros(nfree, nfree);
    for ((vinv, d, yo), b) in parts.iter().zip(&model.blocks) {
        let r = yo - d * &free;
        let z = vinv * &r;
        deviance += r.dot(&z);
        let vq = vinv * &b.q;
        score += vq.trace() - z.dot(&(&b.q * &z));
        if nfree > 0 {
            let vd = vinv * d;
            k += vd.transpose() * &b.q * &vd;
        }
    }
    let (reml_logdet, reml_score) = if nfree == 0 {
        (0.0, 0.0)
    } else {
        let ld = info.clone().cholesky()?.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        (ld, -(&info_inv * &k).trace())
    };
    Some(Profile {
        free,
        info,
        deviance,
        score,
        reml_logdet,
        reml_score,
    })
}

/// Initial upper bound of every `τ²` search: ten times the largest squared
/// residual of the `τ² = 0` fit.
pub(crate) fn tau2_upper(model: &NetworkModel, beta10: Option<f64>) -> Option<f64> {
    let prof = profile(model, 0.0, beta10)?;
    let start = usize::from(beta10.is_some());
    let nfree = model.p() - start;
    let mut worst = 0.0f64;
    for b in &model.blocks {
        let mut r = &b.y - b.x.columns(start, nfree) * &prof.free;
        if let Some(b10) = beta10 {
            r -= b.x.column(0) * b10;
        }
        worst = worst.max(r.amax().powi(2));
    }
    Some((10.0 * worst).max(1e-4))
}

/// Golden-section minimization of `f` over `[0, upper]` (the bound grows
/// fourfold up to three times while the minimum sits at it), polished by a
/// root search on `score` around the minimizer.
pub(crate) fn minimize_tau2<F, S>(f: F, score: S, upper: f64) -> Result<(f64, bool)>
where
    F: Fn(f64) -> f64,
    S: Fn(f64) -> f64,
{
    let mut hi = upper;
    let mut t = 0.0;
    for attempt in 0..4 {
        let (x, _) = golden_section(&f, 0.0, hi, 1e-10 * hi, 400);
        t = x;
        if x < 0.999 * hi {
            break;
        }
        if attempt == 3 {
            return Err(Error::BracketFailed(format!(
                "heterogeneity estimate reached the search bound {hi}"
            )));
        }
        hi *= 4.0;
    }
    // Near zero the objective is too flat for golden section to separate a
    // boundary minimum from a nearby interior point, so decide by the score.
    let (f0, ft, s0) = (f(0.0), f(t), score(0.0));
    if f0 <= ft + 1e-10 * (1.0 + ft.abs()) && s0 > -1e-7 {
        return Ok((0.0, true));
    }
    let mut w = 1e-8 * (1.0 + t);
    for _ in 0..14 {
        let (lo, up) = ((t - w).max(0.5 * t), (t + w).min(hi));
        if score(lo) < 0.0 && score(up) > 0.0 {
            let root = brent_root(&score, lo, up, 1e-15 * (1.0 + up), 200)?;
            return Ok((root, true));
        }
        w *= 10.0;
    }
    Ok((t, false))
}

fn finish(model: &NetworkModel, tau2: f64, beta10: Option<f64>, reml: bool, converged: bool) -> Result<NetFit> {
    let prof = profile(model, tau2, beta10)
        .ok_or_else(|| Error::numerical("V is not positive definite at the estimate"))?;
    let mut beta = Vec::with_capacity(model.p());
    if let Some(b10) = beta10 {
        beta.push(b10);
    }
    beta.extend(prof.free.iter());
    let cov = if prof.info.nrows() == 0 {
        DMatrix::zeros(0, 0)
    } else {
        prof.info
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numerical("information matrix is singular"))?
    };
    let cov_beta = (0..cov.nrows()).map(|i| cov.row(i).iter().copied().collect()).collect();
    Ok(NetFit {
        beta,
        tau2,
        deviance: prof.deviance + if reml { prof.reml_logdet } else { 0.0 },
        cov_beta,
        converged,
    })
}

fn fit(model: &NetworkModel, beta10: Option<f64>, reml: bool) -> Result<NetFit> {
    let upper = tau2_upper(model, beta10)
        .ok_or_else(|| Error::numerical("V is not positive definite at tau2 = 0"))?;
    let value = |t: f64| match profile(model, t, beta10) {
        Some(p) => p.deviance + if reml { p.reml_logdet } else { 0.0 },
        None => f64::INFINITY,
    };
    let score = |t: f64| match profile(model, t, beta10) {
        Some(p) => p.score + if reml { p.reml_score } else { 0.0 },
        None => f64::NAN,
    };
    let (tau2, converged) = minimize_tau2(value, score, upper)?;
    finish(model, tau2, beta10, reml, converged)
}

/// Maximum-likelihood fit of `(β, τ²)`.
pub fn fit_ml_net(model: &NetworkModel) -> Result<NetFit> {
    fit(model, None, false)
}

/// REML fit; `deviance` holds the REML objective.
pub fn fit_reml_net(model: &NetworkModel) -> Result<NetFit> {
    fit(model, None, true)
}

/// Constrained ML fit under `β_1 = beta10`; `beta[0]` equals `beta10`.
pub fn fit_constrained_net(model: &NetworkModel, beta10: f64) -> Result<NetFit> {
    if !beta10.is_finite() {
        return Err(Error::invalid("hypothesized value must be finite"));
    }
    fit(model, Some(beta10), false)
}

/// Residuals of the constrained score equations at `(ω, τ²)`:
/// `W₂ᵗV⁻¹r` and `tr(V⁻¹Q) − rᵗV⁻¹QV⁻¹r` with `r = y − W₁β₁₀ − W₂ω`.
pub fn profile_score(
    model: &NetworkModel,
    beta10: f64,
    omega: &[f64],
    tau2: f64,
) -> Result<(Vec<f64>, f64)> {
    let p = model.p();
    if omega.len() + 1 != p {
        return Err(Error::invalid("omega has the wrong length"));
    }
    let omega = DVector::from_column_slice(omega);
    let mut g1 = DVector::zeros(p - 1);
    let mut g2 = 0.0;
    for b in &model.blocks {
        let chol = b
            .v(tau2)
            .cholesky()
            .ok_or_else(|| Error::numerical("V block is not positive definite"))?;
        let w2 = b.x.columns(1, p - 1);
        let r = &b.y - b.x.column(0) * beta10 - w2 * &omega;
        let z = chol.solve(&r);
        g1 += w2.transpose() * &z;
        g2 += chol.solve(&b.q).trace() - z.dot(&(&b.q * &z));
    }
    Ok((g1.iter().copied().collect(), g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{contrast_transform, contrasts_from_arms, deviance_net, ArmRecord, ContrastStudy};
    use crate::univariate::{fit_ml, UnivariateData};

    fn arm(study: u64, treatment: usize, events: f64, n: f64) -> ArmRecord {
        ArmRecord {
            study,
            treatment,
            events,
            n,
        }
    }

    pub(crate) fn network() -> NetworkModel {
        let arms = [
            arm(1, 0, 12.0, 50.0),
            arm(1, 1, 11.0, 50.0),
            arm(2, 0, 20.0, 80.0),
            arm(2, 2, 41.0, 80.0),
            arm(3, 1, 14.0, 40.0),
            arm(3, 2, 19.0, 40.0),
            arm(4, 0, 9.0, 60.0),
            arm(4, 1, 15.0, 60.0),
            arm(4, 2, 32.0, 60.0),
            arm(5, 0, 30.0, 100.0),
            arm(5, 1, 58.0, 100.0),
            arm(6, 0, 17.0, 70.0),
            arm(6, 2, 25.0, 70.0),
        ];
        NetworkModel::new(contrasts_from_arms(&arms, true).unwrap().studies, 2).unwrap()
    }

    fn reduced() -> (NetworkModel, UnivariateData) {
        let y = [0.3, -0.4, 1.1, 0.2, 0.8, 1.6];
        let v = [0.10, 0.25, 0.08, 0.30, 0.12, 0.20];
        let studies = y
            .iter()
            .zip(&v)
            .map(|(&y, &v)| ContrastStudy::new(vec![1], vec![y], vec![vec![v]]).unwrap())
            .collect();
        (
            NetworkModel::new(studies, 1).unwrap(),
            UnivariateData::new(y.to_vec(), v.to_vec()).unwrap(),
        )
    }

    #[test]
    fn single_contrast_network_reduces_to_univariate() {
        let (m, u) = reduced();
        let net = fit_ml_net(&m).unwrap();
        let uni = fit_ml(&u);
        assert!(uni.tau2 > 0.0);
        assert!((net.tau2 - uni.tau2).abs() < 1e-8, "{} {}", net.tau2, uni.tau2);
        assert!((net.beta[0] - uni.mu).abs() < 1e-8);
        assert!((net.deviance - uni.deviance).abs() < 1e-8);
    }

    #[test]
    fn ml_fit_is_stationary() {
        let m = network();
        let fit = fit_ml_net(&m).unwrap();
        assert!(fit.converged && fit.tau2 > 0.0, "{fit:?}");
        let prof = profile(&m, fit.tau2, None).unwrap();
        assert!(prof.score.abs() < 1e-7);
        let d = deviance_net(&m, &fit.beta, fit.tau2).unwrap();
        assert!((d - fit.deviance).abs() < 1e-10);
        for t in [0.0, 0.5 * fit.tau2, 2.0 * fit.tau2] {
            assert!(profile(&m, t, None).unwrap().deviance >= fit.deviance - 1e-12);
        }
    }

    #[test]
    fn reml_exceeds_ml_heterogeneity() {
        let m = network();
        let ml = fit_ml_net(&m).unwrap();
        let reml = fit_reml_net(&m).unwrap();
        assert!(reml.tau2 > ml.tau2);
        let p = profile(&m, reml.tau2, None).unwrap();
        assert!((p.score + p.reml_score).abs() < 1e-7);
        let cov = &reml.cov_beta;
        assert!((cov[0][1] - cov[1][0]).abs() < 1e-14 && cov[0][0] > 0.0);
    }

    #[test]
    fn reml_score_matches_finite_difference() {
        let m = network();
        let h = 1e-6;
        for t in [0.05, 0.2] {
            let p = profile(&m, t, None).unwrap();
            let (a, b) = (profile(&m, t + h, None).unwrap(), profile(&m, t - h, None).unwrap());
            assert!(((a.reml_logdet - b.reml_logdet) / (2.0 * h) - p.reml_score).abs() < 1e-6);
            assert!(((a.deviance - b.deviance) / (2.0 * h) - p.score).abs() < 1e-6);
        }
    }

    #[test]
    fn constrained_fit_at_mle_and_plug_back() {
        let m = network();
        let ml = fit_ml_net(&m).unwrap();
        let c = fit_constrained_net(&m, ml.beta[0]).unwrap();
        assert!((c.tau2 - ml.tau2).abs() < 1e-8);
        assert!((c.beta[1] - ml.beta[1]).abs() < 1e-8);
        for b10 in [ml.beta[0] - 0.3, ml.beta[0] + 0.4] {
            let c = fit_constrained_net(&m, b10).unwrap();
            let (g1, g2) = profile_score(&m, b10, &c.beta[1..], c.tau2).unwrap();
            assert!(g1.iter().all(|v| v.abs() < 1e-7), "{g1:?}");
            if c.tau2 > 0.0 {
                assert!(g2.abs() < 1e-7, "{g2}");
            }
        }
    }

    #[test]
    fn constrained_heterogeneity_grows_away_from_estimate() {
        let m = network();
        let ml = fit_ml_net(&m).unwrap();
        for dir in [-1.0, 1.0] {
            let taus: Vec<f64> = (1..6)
                .map(|i| fit_constrained_net(&m, ml.beta[0] + dir * 0.3 * i as f64).unwrap().tau2)
                .collect();
            assert!(taus.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{taus:?}");
            assert!(taus[0] >= ml.tau2 - 1e-3);
        }
    }

    #[test]
    fn pseudo_arm_size_barely_moves_estimates() {
        let mut arms = vec![arm(9, 1, 14.0, 40.0), arm(9, 2, 25.0, 40.0)];
        let base = network();
        let mut studies = base.studies().to_vec();
        studies.extend(contrasts_from_arms(&arms, true).unwrap().studies);
        let a = fit_ml_net(&NetworkModel::new(studies.clone(), 2).unwrap()).unwrap();

        // Same study with the pseudo reference arm's patients halved.
        let (e0, n0) = (0.001, 0.005);
        arms.iter_mut().for_each(|a| a.study = 10);
        let lo = |e: f64, n: f64| (e / (n - e)).ln();
        let shared = 1.0 / e0 + 1.0 / (n0 - e0);
        let y: Vec<f64> = arms.iter().map(|a| lo(a.events, a.n) - lo(e0, n0)).collect();
        let d: Vec<f64> = arms.iter().map(|a| 1.0 / a.events + 1.0 / (a.n - a.events)).collect();
        let s = vec![vec![shared + d[0], shared], vec![shared, shared + d[1]]];
        studies.pop();
        studies.push(ContrastStudy::new(vec![1, 2], y, s).unwrap());
        let b = fit_ml_net(&NetworkModel::new(studies, 2).unwrap()).unwrap();
        for j in 0..2 {
            assert!((a.beta[j] - b.beta[j]).abs() < 1e-3, "{:?} {:?}", a.beta, b.beta);
        }
    }

    #[test]
    fn transform_gives_contrast_estimate() {
        let m = network();
        let ml = fit_ml_net(&m).unwrap();
        let t = contrast_transform(&m, &[-1.0, 1.0]).unwrap();
        let tf = fit_ml_net(&t).unwrap();
        assert!((tf.beta[0] - (ml.beta[1] - ml.beta[0])).abs() < 1e-8);
        assert!((tf.deviance - ml.deviance).abs() < 1e-8);
        assert!((tf.tau2 - ml.tau2).abs() < 1e-8);
    }
}
