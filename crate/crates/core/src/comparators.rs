//! Standard comparator methods: DerSimonian–Laird, REML Wald, Knapp–Hartung
//! and asymptotic likelihood-ratio intervals, plus the bivariate REML fit
//! behind the approximate elliptical region.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, StudentsT};

use crate::bivariate::{
    cold_starts, deviance_cov, gls_mean, marginal_cov, nuisance_to_theta, theta_to_nuisance,
    BivarFit, DtaData,
};
use crate::error::{Error, Result};
use crate::mc::{invert_to_interval, InversionOptions};
use crate::network::{
    contrast_transform, fit_constrained_net, fit_ml_net, fit_reml_net, NetworkModel,
};
use crate::optim::{brent_root, nelder_mead};
use crate::univariate::{
    fit_ml, fit_ml_constrained, normal_quantile, weighted_mean, UnivariateData,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    #[serde(rename = "MC")]
    Mc,
    #[serde(rename = "DL")]
    Dl,
    #[serde(rename = "REML")]
    Reml,
    #[serde(rename = "KNHA")]
    Knha,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "ACR")]
    Acr,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Mc => "MC",
            Method::Dl => "DL",
            Method::Reml => "REML",
            Method::Knha => "KNHA",
            Method::Lr => "LR",
            Method::Acr => "ACR",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mc" => Ok(Method::Mc),
            "dl" => Ok(Method::Dl),
            "reml" => Ok(Method::Reml),
            "knha" => Ok(Method::Knha),
            "lr" => Ok(Method::Lr),
            "acr" => Ok(Method::Acr),
            other => Err(Error::invalid(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: Method,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub tau2: f64,
}

impl MethodResult {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("alpha must lie in (0, 1)"))
    }
}

fn wald(method: Method, data: &UnivariateData, tau2: f64, alpha: f64) -> MethodResult {
    let mu = weighted_mean(data, tau2);
    let info: f64 = data.sigma2().iter().map(|s2| 1.0 / (tau2 + s2)).sum();
    let hw = normal_quantile(1.0 - alpha / 2.0) / info.sqrt();
    MethodResult {
        method,
        estimate: mu,
        lower: mu - hw,
        upper: mu + hw,
        tau2,
    }
}

/// DerSimonian–Laird moment estimate of `τ²`.
pub fn dl_tau2(data: &UnivariateData) -> f64 {
    let w: Vec<f64> = data.sigma2().iter().map(|s2| 1.0 / s2).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|w| w * w).sum();
    let ybar = w.iter().zip(data.y()).map(|(w, y)| w * y).sum::<f64>() / sw;
    let q: f64 = w
        .iter()
        .zip(data.y())
        .map(|(w, y)| w * (y - ybar) * (y - ybar))
        .sum();
    ((q - (data.k() as f64 - 1.0)) / (sw - sw2 / sw)).max(0.0)
}

pub fn dl_interval(data: &UnivariateData, alpha: f64) -> Result<MethodResult> {
    check_alpha(alpha)?;
    Ok(wald(Method::Dl, data, dl_tau2(data), alpha))
}

/// Derivative of the REML log-likelihood in `τ²`, times two.
fn reml_score(data: &UnivariateData, tau2: f64) -> f64 {
    let mu = weighted_mean(data, tau2);
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for (y, s2) in data.y().iter().zip(data.sigma2()) {
        let v = tau2 + s2;
        a += (y - mu) * (y - mu) / (v * v) - 1.0 / v;
        b += 1.0 / (v * v);
        c += 1.0 / v;
    }
    a + b / c
}

/// REML estimate of `τ²`: the root of the REML score, or zero when the
/// score is nonpositive there.
pub fn reml_tau2(data: &UnivariateData) -> Result<f64> {
    if reml_score(data, 0.0) <= 0.0 {
        return Ok(0.0);
    }
    let (lo, hi) = data
        .y()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    let mut upper = ((hi - lo) * (hi - lo)).max(1e-8);
    let mut expansions = 0;
    while reml_score(data, upper) > 0.0 {
        upper *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return Err(Error::BracketFailed("REML score stays positive".into()));
        }
    }
    brent_root(|t| reml_score(data, t), 0.0, upper, 1e-14 * (1.0 + upper), 200)
        .map(|t| t.max(0.0))
}

pub fn reml_interval_uni(data: &UnivariateData, alpha: f64) -> Result<MethodResult> {
    check_alpha(alpha)?;
    Ok(wald(Method::Reml, data, reml_tau2(data)?, alpha))
}

/// Knapp–Hartung interval with REML heterogeneity and `t_{k−1}` quantile.
pub fn knha_interval(data: &UnivariateData, alpha: f64) -> Result<MethodResult> {
    check_alpha(alpha)?;
    let tau2 = reml_tau2(data)?;
    let mu = weighted_mean(data, tau2);
    let k = data.k() as f64;
    let (mut sw, mut q) = (0.0, 0.0);
    for (y, s2) in data.y().iter().zip(data.sigma2()) {
        let w = 1.0 / (tau2 + s2);
        sw += w;
        q += w * (y - mu) * (y - mu);
    }
    q /= k - 1.0;
    let t = StudentsT::new(0.0, 1.0, k - 1.0)
        .map_err(|e| Error::numerical(e.to_string()))?
        .inverse_cdf(1.0 - alpha / 2.0);
    let hw = t * (q / sw).sqrt();
    Ok(MethodResult {
        method: Method::Knha,
        estimate: mu,
        lower: mu - hw,
        upper: mu + hw,
        tau2,
    })
}

/// Upper-`alpha` point of `χ²(1)`.
pub fn chi2_1_critical(alpha: f64) -> f64 {
    let z = normal_quantile(1.0 - alpha / 2.0);
    z * z
}

fn chi2_1_sf(t: f64) -> f64 {
    1.0 - ChiSquared::new(1.0).expect("one degree of freedom").cdf(t.max(0.0))
}

/// Likelihood-ratio interval `{μ0 : T(μ0) ≤ χ²₁(1−α)}`.
pub fn lr_interval_uni(data: &UnivariateData, alpha: f64) -> Result<MethodResult> {
    check_alpha(alpha)?;
    let ml = fit_ml(data);
    let info: f64 = data.sigma2().iter().map(|s2| 1.0 / (ml.tau2 + s2)).sum();
    let hw = normal_quantile(1.0 - alpha / 2.0) / info.sqrt();
    let ci = invert_to_interval(
        |mu0| Ok(chi2_1_sf(fit_ml_constrained(data, mu0).deviance - ml.deviance)),
        ml.mu,
        hw,
        None,
        InversionOptions::new(alpha, hw),
    )?;
    Ok(MethodResult {
        method: Method::Lr,
        estimate: ml.mu,
        lower: ci.lower,
        upper: ci.upper,
        tau2: ml.tau2,
    })
}

/// REML objective of the bivariate model at covariance coordinates `s`:
/// the deviance at the GLS mean plus `log |Σ V_i⁻¹|`.
fn reml_objective_bivar(data: &DtaData, s: &[f64; 3]) -> Option<f64> {
    let mu = gls_mean(data, s)?;
    let dev = deviance_cov(data, mu, s)?;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for st in data.studies() {
        let p = marginal_cov(st, s).inverse()?;
        a += p.a;
        b += p.b;
        c += p.c;
    }
    Some(dev + (a * c - b * b).ln())
}

/// REML Wald intervals for every coordinate of `β`.
pub fn reml_wald_net(model: &NetworkModel, alpha: f64) -> Result<Vec<MethodResult>> {
    check_alpha(alpha)?;
    let fit = fit_reml_net(model)?;
    let z = normal_quantile(1.0 - alpha / 2.0);
    Ok(fit
        .beta
        .iter()
        .enumerate()
        .map(|(j, &b)| {
            let hw = z * fit.cov_beta[j][j].sqrt();
            MethodResult {
                method: Method::Reml,
                estimate: b,
                lower: b - hw,
                upper: b + hw,
                tau2: fit.tau2,
            }
        })
        .collect())
}

/// Asymptotic likelihood-ratio interval for `cᵗβ`.
pub fn lr_interval_net(model: &NetworkModel, c: &[f64], alpha: f64) -> Result<MethodResult> {
    check_alpha(alpha)?;
    let t = contrast_transform(model, c)?;
    let ml = fit_ml_net(&t)?;
    let hw = normal_quantile(1.0 - alpha / 2.0) * ml.cov_beta[0][0].sqrt();
    let ci = invert_to_interval(
        |eta0| Ok(chi2_1_sf(fit_constrained_net(&t, eta0)?.deviance - ml.deviance)),
        ml.beta[0],
        hw,
        None,
        InversionOptions::new(alpha, hw),
    )?;
    Ok(MethodResult {
        method: Method::Lr,
        estimate: ml.beta[0],
        lower: ci.lower,
        upper: ci.upper,
        tau2: ml.tau2,
    })
}

/// REML fit of the bivariate model; `deviance` holds the REML objective.
pub fn reml_bivar(data: &DtaData) -> Result<BivarFit> {
    let objective = |th: &[f64]| {
        reml_objective_bivar(data, &theta_to_nuisance(th).covariance()).unwrap_or(f64::INFINITY)
    };
    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    for start in cold_starts(data) {
        let mut x = nuisance_to_theta(&start).to_vec();
        let mut value = f64::INFINITY;
        let mut iterations = 0;
        // Restarting the simplex guards against premature collapse.
        for _ in 0..3 {
            let r = nelder_mead(objective, &x, 0.2, 1e-14, 5000);
            iterations += r.iterations;
            let done = value - r.value < 1e-12;
            x = r.x;
            value = r.value;
            if done {
                break;
            }
        }
        if best.as_ref().is_none_or(|b| value < b.1) {
            best = Some((x, value, iterations));
        }
    }
    let (x, value, iterations) = best.expect("at least one start");
    if !value.is_finite() {
        return Err(Error::Convergence("bivariate REML fit failed".into()));
    }
    let nuisance = theta_to_nuisance(&x);
    let mu = gls_mean(data, &nuisance.covariance())
        .ok_or_else(|| Error::numerical("information matrix is singular"))?;
    Ok(BivarFit {
        mu,
        nuisance,
        deviance: value,
        converged: true,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bivariate::{BivarNuisance, DtaStudy};

    fn data(y: &[f64], s2: &[f64]) -> UnivariateData {
        UnivariateData::new(y.to_vec(), s2.to_vec()).unwrap()
    }

    #[test]
    fn dl_hand_example() {
        let r = dl_interval(&data(&[0.0, 1.0], &[1.0, 1.0]), 0.05).unwrap();
        assert_eq!(r.tau2, 0.0);
        assert!((r.estimate - 0.5).abs() < 1e-15);
        let hw = 1.959963984540054 / 2f64.sqrt();
        assert!((r.upper - 0.5 - hw).abs() < 1e-9);
        assert!((r.lower - 0.5 + hw).abs() < 1e-9);
        assert_eq!(dl_tau2(&data(&[0.3, 0.3, 0.3], &[0.1, 0.2, 0.3])), 0.0);
    }

    #[test]
    fn dl_matches_direct_formula() {
        let d = data(&[0.1, 1.4, -0.7, 2.2], &[0.1, 0.3, 0.2, 0.15]);
        let w = [10.0, 1.0 / 0.3, 5.0, 1.0 / 0.15];
        let sw: f64 = w.iter().sum();
        let ybar = (0.1 * w[0] + 1.4 * w[1] - 0.7 * w[2] + 2.2 * w[3]) / sw;
        let q = w[0] * (0.1 - ybar).powi(2)
            + w[1] * (1.4 - ybar).powi(2)
            + w[2] * (-0.7 - ybar).powi(2)
            + w[3] * (2.2 - ybar).powi(2);
        let c = sw - w.iter().map(|w| w * w).sum::<f64>() / sw;
        assert!((dl_tau2(&d) - (q - 3.0) / c).abs() < 1e-12);
    }

    #[test]
    fn reml_maximizes_restricted_likelihood() {
        let d = data(&[0.1, 1.4, -0.7, 2.2, 0.5], &[0.1, 0.3, 0.2, 0.15, 0.4]);
        let tau2 = reml_tau2(&d).unwrap();
        assert!(tau2 > 0.0);
        let obj = |t: f64| {
            let mu = weighted_mean(&d, t);
            let mut s = 0.0;
            let mut sw = 0.0;
            for (y, s2) in d.y().iter().zip(d.sigma2()) {
                let v = t + s2;
                s += v.ln() + (y - mu) * (y - mu) / v;
                sw += 1.0 / v;
            }
            s + sw.ln()
        };
        for dt in [-1e-3, 1e-3, 0.1] {
            assert!(obj(tau2) <= obj((tau2 + dt).max(0.0)) + 1e-12);
        }
    }

    #[test]
    fn knha_uses_t_quantile() {
        let d = data(&[0.0, 1.0, 0.4], &[0.2, 0.2, 0.2]);
        let r = knha_interval(&d, 0.05).unwrap();
        let tau2 = r.tau2;
        let mu = 1.4 / 3.0;
        let w = 1.0 / (tau2 + 0.2);
        let q = w * (mu * mu + (1.0 - mu) * (1.0 - mu) + (0.4 - mu) * (0.4 - mu)) / 2.0;
        let hw = 4.302652729911275 * (q / (3.0 * w)).sqrt();
        assert!((r.estimate - mu).abs() < 1e-12);
        assert!((r.upper - r.estimate - hw).abs() < 1e-8);
    }

    #[test]
    fn lr_interval_endpoints_hit_critical_value() {
        let d = data(&[0.1, 1.4, -0.7, 2.2, 0.5], &[0.1, 0.3, 0.2, 0.15, 0.4]);
        let r = lr_interval_uni(&d, 0.05).unwrap();
        let ml = fit_ml(&d);
        for x in [r.lower, r.upper] {
            let t = fit_ml_constrained(&d, x).deviance - ml.deviance;
            assert!((t - 3.841458820694124).abs() < 1e-3, "{t}");
        }
        assert!((chi2_1_critical(0.05) - 3.841458820694124).abs() < 1e-9);
    }

    #[test]
    fn bivariate_reml_beats_grid() {
        let studies = [
            (1.8, -1.2, 0.12, 0.08),
            (0.4, -0.3, 0.30, 0.10),
            (1.1, -1.9, 0.05, 0.20),
            (2.3, -0.4, 0.25, 0.15),
            (0.9, -1.0, 0.10, 0.40),
            (1.5, -2.2, 0.20, 0.05),
        ];
        let d = DtaData::new(
            studies
                .iter()
                .map(|&(a, b, c, e)| DtaStudy::new(a, b, c, e).unwrap())
                .collect(),
        )
        .unwrap();
        let fit = reml_bivar(&d).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                for r in [-0.9, -0.5, 0.0, 0.5, 0.9] {
                    let psi = BivarNuisance::new(0.05 * i as f64, 0.05 * j as f64, r).unwrap();
                    let v = reml_objective_bivar(&d, &psi.covariance()).unwrap();
                    assert!(fit.deviance <= v + 1e-9);
                }
            }
        }
    }

    fn single_contrast_network(y: &[f64], v: &[f64]) -> NetworkModel {
        let studies = y
            .iter()
            .zip(v)
            .map(|(&y, &v)| crate::network::ContrastStudy::new(vec![1], vec![y], vec![vec![v]]).unwrap())
            .collect();
        NetworkModel::new(studies, 1).unwrap()
    }

    #[test]
    fn network_comparators_reduce_to_univariate() {
        let (y, v) = ([0.3, -0.4, 1.1, 0.2, 0.8, 1.6], [0.10, 0.25, 0.08, 0.30, 0.12, 0.20]);
        let m = single_contrast_network(&y, &v);
        let d = data(&y, &v);
        let wald = &reml_wald_net(&m, 0.05).unwrap()[0];
        let uni = reml_interval_uni(&d, 0.05).unwrap();
        assert!((wald.tau2 - uni.tau2).abs() < 1e-7);
        assert!((wald.lower - uni.lower).abs() < 1e-7 && (wald.upper - uni.upper).abs() < 1e-7);
        assert!(((wald.upper - wald.estimate) - (wald.estimate - wald.lower)).abs() < 1e-12);
        let lr = lr_interval_net(&m, &[1.0], 0.05).unwrap();
        let lu = lr_interval_uni(&d, 0.05).unwrap();
        assert!((lr.lower - lu.lower).abs() < 1e-6 && (lr.upper - lu.upper).abs() < 1e-6);
    }
}
