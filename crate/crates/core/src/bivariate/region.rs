//! Confidence regions for `(μ_A, μ_B)` and summary ROC output.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use super::fit::{fit_ml_bivar, mean_covariance, BivarFit};
use super::pivot::BivarMeanTest;
use super::DtaData;
use crate::error::{Error, Result};
use crate::mc::{bisect_boundary, conditional_p_value_with_draws, DrawBank, PivotModel};

/// Polygonal region given by radii from `center` along `angles`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceRegion {
    pub center: [f64; 2],
    pub angles: Vec<f64>,
    pub radii_raw: Vec<f64>,
    pub radii_smoothed: Vec<f64>,
    pub alpha: f64,
    /// `center + radii_smoothed[m]·(cos t_m, sin t_m)`.
    pub boundary: Vec<[f64; 2]>,
    /// Angles whose radius hit the bracket-expansion cap.
    pub unbounded_angles: Vec<usize>,
}

impl ConfidenceRegion {
    fn build(center: [f64; 2], angles: Vec<f64>, raw: Vec<f64>, smoothed: Vec<f64>, alpha: f64) -> Self {
        let boundary = angles
            .iter()
            .zip(&smoothed)
            .map(|(t, r)| [center[0] + r * t.cos(), center[1] + r * t.sin()])
            .collect();
        ConfidenceRegion {
            center,
            angles,
            radii_raw: raw,
            radii_smoothed: smoothed,
            alpha,
            boundary,
            unbounded_angles: Vec::new(),
        }
    }

    /// Some angle's radius could not be bracketed.
    pub fn is_partial(&self) -> bool {
        !self.unbounded_angles.is_empty()
    }

    /// Even-odd point-in-polygon test against `boundary`.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.boundary.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.boundary[i], self.boundary[j]);
            if (a[1] > p[1]) != (b[1] > p[1])
                && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0]
            {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegionOptions {
    pub alpha: f64,
    /// Number of angles.
    pub m: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Bisection tolerance relative to the Wald radius.
    pub rel_tol: f64,
    pub max_expand: usize,
}

impl RegionOptions {
    pub fn new(alpha: f64, m: usize, replicates: usize, seed: u64) -> Self {
        RegionOptions {
            alpha,
            m,
            replicates,
            seed,
            rel_tol: 1e-3,
            max_expand: 12,
        }
    }
}

/// `sqrt` of the upper-`alpha` point of `χ²(2)`.
fn chi2_2_root(alpha: f64) -> f64 {
    (-2.0 * alpha.ln()).sqrt()
}

/// Circular moving average over `2·half + 1` neighbours.
pub fn smooth_circular(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let width = 2 * half + 1;
    (0..n)
        .map(|i| {
            (0..width)
                .map(|j| x[(i + n * width + j - half) % n])
                .sum::<f64>()
                / width as f64
        })
        .collect()
}

/// Monte Carlo confidence region with default tolerances.
pub fn confidence_region(
    data: &DtaData,
    alpha: f64,
    m: usize,
    replicates: usize,
    seed: u64,
) -> Result<ConfidenceRegion> {
    confidence_region_with(data, RegionOptions::new(alpha, m, replicates, seed))
}

/// Monte Carlo confidence region: for each of `m` equally spaced angles the
/// radius where the p-value crosses `alpha` is found by bisection, with one
/// draw bank shared by every angle and radius.
pub fn confidence_region_with(data: &DtaData, opts: RegionOptions) -> Result<ConfidenceRegion> {
    if opts.m < 8 {
        return Err(Error::invalid("at least 8 angles are required"));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    if opts.replicates == 0 {
        return Err(Error::invalid("number of Monte Carlo replicates must be positive"));
    }
    let model = BivarMeanTest;
    let ml = fit_ml_bivar(data)?;
    let center = ml.mu;
    let cov = mean_covariance(data, &ml.nuisance)?;
    let bank = DrawBank::generate(model.draw_dimension(data), opts.replicates, opts.seed);
    let p_at = |x: [f64; 2]| conditional_p_value_with_draws(&model, data, &x, &bank).map(|r| r.p);
    if !(p_at(center)? > opts.alpha) {
        return Err(Error::invalid("p-value at the estimate does not exceed alpha"));
    }
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[0][1];
    let c = chi2_2_root(opts.alpha);
    let angles: Vec<f64> = (0..opts.m).map(|i| 2.0 * PI * i as f64 / opts.m as f64).collect();
    let radii: Vec<Result<(f64, bool)>> = angles
        .par_iter()
        .map(|&t| {
            let d = [t.cos(), t.sin()];
            // dᵗ Cov⁻¹ d
            let q = (cov[1][1] * d[0] * d[0] - 2.0 * cov[0][1] * d[0] * d[1] + cov[0][0] * d[1] * d[1]) / det;
            let r0 = c / q.sqrt();
            let accept = |r: f64| -> Result<bool> {
                Ok(p_at([center[0] + r * d[0], center[1] + r * d[1]])? > opts.alpha)
            };
            let mut inside = 0.0;
            let mut outside = r0;
            let mut expansions = 0;
            while accept(outside)? {
                if expansions == opts.max_expand {
                    return Ok((outside, true));
                }
                inside = outside;
                outside *= 2.0;
                expansions += 1;
            }
            bisect_boundary(accept, inside, outside, opts.rel_tol * r0).map(|r| (r, false))
        })
        .collect();
    let mut raw = Vec::with_capacity(opts.m);
    let mut unbounded = Vec::new();
    for (i, r) in radii.into_iter().enumerate() {
        let (r, capped) = r?;
        if capped {
            unbounded.push(i);
        }
        raw.push(r);
    }
    let smoothed = smooth_circular(&raw, 3);
    let mut region = ConfidenceRegion::build(center, angles, raw, smoothed, opts.alpha);
    region.unbounded_angles = unbounded;
    Ok(region)
}

/// Centre, standard errors and estimate correlation of the REML fit.
fn reml_summary(data: &DtaData) -> Result<([f64; 2], f64, f64, f64)> {
    let fit = crate::comparators::reml_bivar(data)?;
    let cov = mean_covariance(data, &fit.nuisance)?;
    let (sa, sb) = (cov[0][0].sqrt(), cov[1][1].sqrt());
    Ok((fit.mu, sa, sb, (cov[0][1] / (sa * sb)).clamp(-1.0, 1.0)))
}

/// Points of the approximate elliptical region at parameter values `t`:
/// `μ_A = μ̂_A + c ŝ_A cos t`, `μ_B = μ̂_B + c ŝ_B cos(t + arccos ρ̂)`.
pub fn approx_region_points(data: &DtaData, alpha: f64, t: &[f64]) -> Result<Vec<[f64; 2]>> {
    let (mu, sa, sb, rho) = reml_summary(data)?;
    let c = chi2_2_root(alpha);
    let phase = rho.acos();
    Ok(t.iter()
        .map(|&t| [mu[0] + c * sa * t.cos(), mu[1] + c * sb * (t + phase).cos()])
        .collect())
}

/// Approximate elliptical region from the REML fit, sampled at `m` equally
/// spaced parameter values and stored in polar form about the centre.
pub fn approx_region(data: &DtaData, alpha: f64, m: usize) -> Result<ConfidenceRegion> {
    if m < 8 {
        return Err(Error::invalid("at least 8 points are required"));
    }
    let (center, ..) = reml_summary(data)?;
    let t: Vec<f64> = (0..m).map(|i| 2.0 * PI * i as f64 / m as f64).collect();
    let points = approx_region_points(data, alpha, &t)?;
    let angles: Vec<f64> = points
        .iter()
        .map(|p| (p[1] - center[1]).atan2(p[0] - center[0]))
        .collect();
    let radii: Vec<f64> = points
        .iter()
        .map(|p| (p[0] - center[0]).hypot(p[1] - center[1]))
        .collect();
    Ok(ConfidenceRegion::build(center, angles, radii.clone(), radii, alpha))
}

/// Whether `point` lies in the approximate elliptical region.
pub fn in_approx_region(data: &DtaData, alpha: f64, point: [f64; 2]) -> Result<bool> {
    let (mu, sa, sb, rho) = reml_summary(data)?;
    let (x, y) = ((point[0] - mu[0]) / sa, (point[1] - mu[1]) / sb);
    let q = (x * x - 2.0 * rho * x * y + y * y) / (1.0 - rho * rho);
    Ok(q <= -2.0 * alpha.ln())
}

fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(μ_A, μ_B) ↦ (sensitivity, false-positive rate) = (expit μ_A, 1 − expit μ_B)`.
pub fn transform_to_roc(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    points
        .iter()
        .map(|p| [expit(p[0]), expit(-p[1])])
        .collect()
}

/// A point on the logit scale together with its ROC coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub t: f64,
    pub mu_a: f64,
    pub mu_b: f64,
    pub sens: f64,
    pub fpr: f64,
}

impl RocPoint {
    pub fn new(t: f64, mu: [f64; 2]) -> Self {
        let [sens, fpr] = transform_to_roc(&[mu])[0];
        RocPoint {
            t,
            mu_a: mu[0],
            mu_b: mu[1],
            sens,
            fpr,
        }
    }
}

impl ConfidenceRegion {
    pub fn roc_points(&self) -> Vec<RocPoint> {
        self.angles
            .iter()
            .zip(&self.boundary)
            .map(|(&t, &p)| RocPoint::new(t, p))
            .collect()
    }
}

/// Regression line `μ_A = μ̂_A + ρ̂(σ̂_A/σ̂_B)(μ_B − μ̂_B)` over `grid` of
/// `μ_B` values.
pub fn sroc_points(fit: &BivarFit, grid: &[f64]) -> Result<Vec<RocPoint>> {
    let psi = fit.nuisance;
    if !(psi.sigma_b2 > 0.0) {
        return Err(Error::invalid("SROC line needs a positive between-study variance for specificity"));
    }
    let slope = psi.rho * (psi.sigma_a2 / psi.sigma_b2).sqrt();
    Ok(grid
        .iter()
        .map(|&mb| RocPoint::new(mb, [fit.mu[0] + slope * (mb - fit.mu[1]), mb]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bivariate::{BivarNuisance, DtaStudy};

    fn example() -> DtaData {
        let rows = [
            (1.8, -1.2, 0.12, 0.08),
            (0.4, -0.3, 0.30, 0.10),
            (1.1, -1.9, 0.05, 0.20),
            (2.3, -0.4, 0.25, 0.15),
            (0.9, -1.0, 0.10, 0.40),
            (1.5, -2.2, 0.20, 0.05),
            (0.2, -0.8, 0.08, 0.30),
            (1.2, -1.5, 0.15, 0.12),
        ];
        DtaData::new(
            rows.iter()
                .map(|&(a, b, c, d)| DtaStudy::new(a, b, c, d).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn circular_smoothing_wraps() {
        let x = [7.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let s = smooth_circular(&x, 3);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[3], 1.0);
        assert_eq!(s[7], 1.0);
        assert_eq!(s[4], 0.0);
        assert!((s.iter().sum::<f64>() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn roc_transform_examples() {
        assert_eq!(transform_to_roc(&[[0.0, 0.0]]), vec![[0.5, 0.5]]);
        let far = transform_to_roc(&[[40.0, 40.0]])[0];
        assert!((far[0] - 1.0).abs() < 1e-15 && far[1] < 1e-15);
        for x in [-3.2, -0.4, 0.0, 1.7, 5.0] {
            let [s, f] = transform_to_roc(&[[x, x]])[0];
            assert!(((s / (1.0 - s)).ln() - x).abs() < 1e-12);
            assert!((((1.0 - f) / f).ln() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn sroc_line_properties() {
        let mut fit = BivarFit {
            mu: [1.0, -1.0],
            nuisance: BivarNuisance::new(0.5, 0.8, 0.0).unwrap(),
            deviance: 0.0,
            converged: true,
            iterations: 0,
        };
        let grid: Vec<f64> = (0..21).map(|i| -3.0 + 0.2 * i as f64).collect();
        let flat = sroc_points(&fit, &grid).unwrap();
        assert!(flat.iter().all(|p| (p.sens - expit(1.0)).abs() < 1e-15));
        fit.nuisance.rho = 0.6;
        let line = sroc_points(&fit, &grid).unwrap();
        let at = sroc_points(&fit, &[-1.0]).unwrap()[0];
        assert!((at.mu_a - 1.0).abs() < 1e-15);
        assert!(line.windows(2).all(|w| w[1].mu_a > w[0].mu_a));
        fit.nuisance.sigma_b2 = 0.0;
        assert!(sroc_points(&fit, &grid).is_err());
    }

    #[test]
    fn approx_region_matches_formula() {
        let data = example();
        let (mu, sa, sb, rho) = reml_summary(&data).unwrap();
        let c2: f64 = 5.991464547107979;
        let t: Vec<f64> = (0..50).map(|i| 0.13 * i as f64).collect();
        let pts = approx_region_points(&data, 0.05, &t).unwrap();
        for (t, p) in t.iter().zip(&pts) {
            let a = mu[0] + c2.sqrt() * sa * t.cos();
            let b = mu[1] + c2.sqrt() * sb * (t + rho.acos()).cos();
            assert!((p[0] - a).abs() < 1e-12 && (p[1] - b).abs() < 1e-12);
        }
        let t0 = approx_region_points(&data, 0.05, &[0.0]).unwrap()[0];
        assert!((t0[1] - (mu[1] + c2.sqrt() * sb * rho)).abs() < 1e-12);
        let region = approx_region(&data, 0.05, 64).unwrap();
        for (i, p) in region.boundary.iter().enumerate() {
            let t = region.angles[i];
            let r = region.radii_smoothed[i];
            assert_eq!(*p, [region.center[0] + r * t.cos(), region.center[1] + r * t.sin()]);
            assert!(in_approx_region(&data, 0.05, [
                region.center[0] + 0.999 * r * t.cos(),
                region.center[1] + 0.999 * r * t.sin()
            ])
            .unwrap());
            assert!(!in_approx_region(&data, 0.05, [
                region.center[0] + 1.001 * r * t.cos(),
                region.center[1] + 1.001 * r * t.sin()
            ])
            .unwrap());
        }
        assert!(region.contains(region.center));
    }

    #[test]
    fn mc_region_contains_center_and_is_consistent() {
        let data = example();
        let region = confidence_region_with(&data, RegionOptions {
            rel_tol: 1e-2,
            ..RegionOptions::new(0.05, 16, 100, 3)
        })
        .unwrap();
        assert!(region.contains(region.center));
        assert!(region.radii_raw.iter().all(|r| *r > 0.0));
        assert!(!region.is_partial());
        for (i, p) in region.boundary.iter().enumerate() {
            let t = region.angles[i];
            let r = region.radii_smoothed[i];
            assert_eq!(*p, [region.center[0] + r * t.cos(), region.center[1] + r * t.sin()]);
        }
    }
}
