//! Bivariate random-effects meta-analysis of diagnostic test accuracy.
//!
//! Study `i` reports logit sensitivity and specificity `y_i = (y_Ai, y_Bi)`
//! with known within-study covariance `C_i = diag(s_Ai², s_Bi²)`; the true
//! logits are `N(μ, Σ(ψ))` with `ψ = (σ_A², σ_B², ρ)`. Deviances are
//! `Σ log|V_i| + Σ (y_i − μ)ᵗ V_i⁻¹ (y_i − μ)` with `V_i = Σ(ψ) + C_i`.

mod fit;
mod pivot;
mod region;

pub use fit::{
    fit_constrained_bivar, fit_ml_bivar, mean_covariance, score_residual, BivarFit,
};
pub(crate) use fit::{cold_starts, nuisance_to_theta, theta_to_nuisance};
pub use pivot::{
    p_value_bivar, pivot_equations, pivot_psi_star, weight_bivar, weight_bivar_with_step,
    BivarMeanTest, PIVOT_TOLERANCE,
};
pub use region::{
    approx_region, approx_region_points, confidence_region, confidence_region_with,
    in_approx_region, smooth_circular, sroc_points, transform_to_roc, ConfidenceRegion,
    RegionOptions, RocPoint,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on `|ρ|` for every fit and pivot.
pub const RHO_BOUND: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtaStudy {
    /// Logit sensitivity.
    pub ya: f64,
    /// Logit specificity.
    pub yb: f64,
    pub va: f64,
    pub vb: f64,
}

impl DtaStudy {
    pub fn new(ya: f64, yb: f64, va: f64, vb: f64) -> Result<Self> {
        if !(ya.is_finite() && yb.is_finite()) {
            return Err(Error::invalid("logit values must be finite"));
        }
        if !(va > 0.0 && vb > 0.0 && va.is_finite() && vb.is_finite()) {
            return Err(Error::invalid("within-study variances must be positive"));
        }
        Ok(DtaStudy { ya, yb, va, vb })
    }

    /// Logit sensitivity/specificity from a 2×2 table. When any cell is zero,
    /// 0.5 is added to all four cells. Returns the study and whether the
    /// correction was applied.
    pub fn from_counts(tp: f64, fp: f64, fn_: f64, tn: f64) -> Result<(Self, bool)> {
        let mut cells = [tp, fp, fn_, tn];
        if cells.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("cell counts must be nonnegative"));
        }
        let corrected = cells.contains(&0.0);
        if corrected {
            cells.iter_mut().for_each(|c| *c += 0.5);
        }
        let [tp, fp, fn_, tn] = cells;
        let study = DtaStudy::new(
            (tp / fn_).ln(),
            (tn / fp).ln(),
            1.0 / tp + 1.0 / fn_,
            1.0 / tn + 1.0 / fp,
        )?;
        Ok((study, corrected))
    }

    fn y(&self) -> [f64; 2] {
        [self.ya, self.yb]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtaData {
    studies: Vec<DtaStudy>,
}

impl DtaData {
    pub fn new(studies: Vec<DtaStudy>) -> Result<Self> {
        if studies.len() < 2 {
            return Err(Error::invalid("at least two studies are required"));
        }
        Ok(DtaData { studies })
    }

    pub fn studies(&self) -> &[DtaStudy] {
        &self.studies
    }

    pub fn k(&self) -> usize {
        self.studies.len()
    }
}

/// Between-study covariance parameters `ψ = (σ_A², σ_B², ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivarNuisance {
    pub sigma_a2: f64,
    pub sigma_b2: f64,
    pub rho: f64,
}

impl BivarNuisance {
    pub fn new(sigma_a2: f64, sigma_b2: f64, rho: f64) -> Result<Self> {
        if !(sigma_a2 >= 0.0 && sigma_b2 >= 0.0) || !(rho.abs() <= 1.0) {
            return Err(Error::invalid("need nonnegative variances and |rho| <= 1"));
        }
        Ok(BivarNuisance {
            sigma_a2,
            sigma_b2,
            rho,
        })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.sigma_a2, self.sigma_b2, self.rho]
    }

    pub fn from_array(x: [f64; 3]) -> Self {
        BivarNuisance {
            sigma_a2: x[0],
            sigma_b2: x[1],
            rho: x[2],
        }
    }

    /// Covariance coordinates `(Σ11, Σ22, Σ12)`.
    pub fn covariance(&self) -> [f64; 3] {
        [
            self.sigma_a2,
            self.sigma_b2,
            self.rho * (self.sigma_a2 * self.sigma_b2).sqrt(),
        ]
    }

    /// Swap the roles of the two outcomes.
    pub fn swapped(&self) -> Self {
        BivarNuisance {
            sigma_a2: self.sigma_b2,
            sigma_b2: self.sigma_a2,
            rho: self.rho,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivarParams {
    pub mu_a: f64,
    pub mu_b: f64,
    pub nuisance: BivarNuisance,
}

/// Symmetric 2×2 matrix stored as `(a, b, c)` for `[[a, b], [b, c]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Sym2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.a * self.c - self.b * self.b
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let d = self.det();
        if !(d > 0.0 && self.a > 0.0) {
            return None;
        }
        Some(Sym2 {
            a: self.c / d,
            b: -self.b / d,
            c: self.a / d,
        })
    }

    pub fn apply(&self, x: [f64; 2]) -> [f64; 2] {
        [self.a * x[0] + self.b * x[1], self.b * x[0] + self.c * x[1]]
    }

    /// Lower Cholesky factor `(l11, l21, l22)`.
    pub fn cholesky(&self) -> Option<[f64; 3]> {
        if !(self.a > 0.0) {
            return None;
        }
        let l11 = self.a.sqrt();
        let l21 = self.b / l11;
        let d = self.c - l21 * l21;
        if !(d > 0.0) {
            return None;
        }
        Some([l11, l21, d.sqrt()])
    }
}

/// `V_i = Σ + C_i` from covariance coordinates `s = (Σ11, Σ22, Σ12)`.
pub(crate) fn marginal_cov(study: &DtaStudy, s: &[f64; 3]) -> Sym2 {
    Sym2 {
        a: s[0] + study.va,
        b: s[2],
        c: s[1] + study.vb,
    }
}

/// Bivariate deviance at mean `mu` and nuisance `psi`.
pub fn deviance_bivar(data: &DtaData, mu: [f64; 2], psi: &BivarNuisance) -> Result<f64> {
    deviance_cov(data, mu, &psi.covariance())
        .ok_or_else(|| Error::numerical("marginal covariance is not positive definite"))
}

pub(crate) fn deviance_cov(data: &DtaData, mu: [f64; 2], s: &[f64; 3]) -> Option<f64> {
    let mut total = 0.0;
    for st in &data.studies {
        let v = marginal_cov(st, s);
        let p = v.inverse()?;
        let r = [st.ya - mu[0], st.yb - mu[1]];
        let z = p.apply(r);
        total += v.det().ln() + r[0] * z[0] + r[1] * z[1];
    }
    Some(total)
}

/// Generalized least-squares mean `(Σ V_i⁻¹)⁻¹ Σ V_i⁻¹ y_i`.
pub(crate) fn gls_mean(data: &DtaData, s: &[f64; 3]) -> Option<[f64; 2]> {
    let mut info = Sym2 {
        a: 0.0,
        b: 0.0,
        c: 0.0,
    };
    let mut rhs = [0.0; 2];
    for st in &data.studies {
        let p = marginal_cov(st, s).inverse()?;
        info.a += p.a;
        info.b += p.b;
        info.c += p.c;
        let z = p.apply(st.y());
        rhs[0] += z[0];
        rhs[1] += z[1];
    }
    Some(info.inverse()?.apply(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::univariate::{deviance, UnivariateData};

    #[test]
    fn single_study_at_mean_has_zero_deviance() {
        let data = DtaData {
            studies: vec![DtaStudy::new(0.3, -0.4, 1.0, 1.0).unwrap()],
        };
        let psi = BivarNuisance::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(deviance_bivar(&data, [0.3, -0.4], &psi).unwrap(), 0.0);
    }

    #[test]
    fn zero_correlation_decouples() {
        let studies = vec![
            DtaStudy::new(0.3, -0.4, 0.1, 0.2).unwrap(),
            DtaStudy::new(1.3, -1.4, 0.3, 0.05).unwrap(),
            DtaStudy::new(0.8, -0.1, 0.2, 0.4).unwrap(),
        ];
        let data = DtaData::new(studies.clone()).unwrap();
        let psi = BivarNuisance::new(0.4, 0.7, 0.0).unwrap();
        let ua = UnivariateData::new(
            studies.iter().map(|s| s.ya).collect(),
            studies.iter().map(|s| s.va).collect(),
        )
        .unwrap();
        let ub = UnivariateData::new(
            studies.iter().map(|s| s.yb).collect(),
            studies.iter().map(|s| s.vb).collect(),
        )
        .unwrap();
        let total = deviance(&ua, 0.5, 0.4) + deviance(&ub, -0.5, 0.7);
        assert!((deviance_bivar(&data, [0.5, -0.5], &psi).unwrap() - total).abs() < 1e-12);
    }

    #[test]
    fn deviance_matches_explicit_inverse() {
        let data = DtaData::new(vec![
            DtaStudy::new(0.3, -0.4, 0.1, 0.2).unwrap(),
            DtaStudy::new(1.3, -1.4, 0.3, 0.05).unwrap(),
        ])
        .unwrap();
        let psi = BivarNuisance::new(0.4, 0.7, -0.35).unwrap();
        let mu = [0.2, -0.9];
        let mut oracle = 0.0;
        for s in data.studies() {
            let cov = -0.35 * (0.4f64 * 0.7).sqrt();
            let (a, b, c) = (0.4 + s.va, cov, 0.7 + s.vb);
            let det = a * c - b * b;
            let (ra, rb) = (s.ya - mu[0], s.yb - mu[1]);
            oracle += det.ln() + (c * ra * ra - 2.0 * b * ra * rb + a * rb * rb) / det;
        }
        assert!((deviance_bivar(&data, mu, &psi).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn counts_use_continuity_correction() {
        let (s, corrected) = DtaStudy::from_counts(10.0, 5.0, 0.0, 20.0).unwrap();
        assert!(corrected);
        assert!((s.ya - (10.5f64 / 0.5).ln()).abs() < 1e-15);
        assert!((s.va - (1.0 / 10.5 + 1.0 / 0.5)).abs() < 1e-15);
        let (s, corrected) = DtaStudy::from_counts(10.0, 5.0, 2.0, 20.0).unwrap();
        assert!(!corrected);
        assert!((s.yb - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cholesky_reconstructs() {
        let m = Sym2 {
            a: 2.0,
            b: 0.3,
            c: 0.9,
        };
        let [l11, l21, l22] = m.cholesky().unwrap();
        assert!((l11 * l11 - 2.0).abs() < 1e-15);
        assert!((l11 * l21 - 0.3).abs() < 1e-15);
        assert!((l21 * l21 + l22 * l22 - 0.9).abs() < 1e-15);
    }
}
