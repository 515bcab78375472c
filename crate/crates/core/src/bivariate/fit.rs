//! Maximum-likelihood fitting of the bivariate model.
//!
//! Derivatives are analytic in covariance coordinates `s = (Σ11, Σ22, Σ12)`.
//! The optimizer works in `θ = (a, b, z)` with `σ_A² = a²`, `σ_B² = b²` and
//! `ρ = 0.999·tanh z`, so variances reach zero smoothly and `|ρ| < 0.999`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{deviance_cov, gls_mean, marginal_cov, BivarNuisance, DtaData, RHO_BOUND};
use crate::error::{Error, Result};
use crate::optim::nelder_mead;

const GRAD_TOL: f64 = 1e-10;
const MAX_ITER: usize = 300;
/// Smallest starting standard deviation; `a = 0` is a stationary point of
/// the reparametrized objective, so starts must stay away from it.
const MIN_START_SD: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BivarFit {
    pub mu: [f64; 2],
    pub nuisance: BivarNuisance,
    pub deviance: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Deviance derivatives at `(μ, s)`.
pub(crate) struct Derivs {
    pub dev: f64,
    pub g_mu: [f64; 2],
    pub g_s: [f64; 3],
    pub h_mumu: [[f64; 2]; 2],
    pub h_mus: [[f64; 3]; 2],
    pub h_ss: [[f64; 3]; 3],
}

fn mat(p: &super::Sym2) -> [[f64; 2]; 2] {
    [[p.a, p.b], [p.b, p.c]]
}

fn mul(x: &[[f64; 2]; 2], y: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
        }
    }
    out
}

fn trace_prod(x: &[[f64; 2]; 2], y: &[[f64; 2]; 2]) -> f64 {
    x[0][0] * y[0][0] + x[0][1] * y[1][0] + x[1][0] * y[0][1] + x[1][1] * y[1][1]
}

const J: [[[f64; 2]; 2]; 3] = [
    [[1.0, 0.0], [0.0, 0.0]],
    [[0.0, 0.0], [0.0, 1.0]],
    [[0.0, 1.0], [1.0, 0.0]],
];

pub(crate) fn derivs(data: &DtaData, mu: [f64; 2], s: &[f64; 3]) -> Option<Derivs> {
    let mut d = Derivs {
        dev: 0.0,
        g_mu: [0.0; 2],
        g_s: [0.0; 3],
        h_mumu: [[0.0; 2]; 2],
        h_mus: [[0.0; 3]; 2],
        h_ss: [[0.0; 3]; 3],
    };
    for st in data.studies() {
        let v = marginal_cov(st, s);
        let p = v.inverse()?;
        let r = [st.ya - mu[0], st.yb - mu[1]];
        let z = p.apply(r);
        d.dev += v.det().ln() + r[0] * z[0] + r[1] * z[1];
        let pm = mat(&p);
        let pj: Vec<[[f64; 2]; 2]> = J.iter().map(|j| mul(&pm, j)).collect();
        // J_m z
        let w = [[z[0], 0.0], [0.0, z[1]], [z[1], z[0]]];
        let pw: Vec<[f64; 2]> = w.iter().map(|w| p.apply(*w)).collect();
        for m in 0..3 {
            d.g_s[m] += pj[m][0][0] + pj[m][1][1] - (z[0] * w[m][0] + z[1] * w[m][1]);
            for n in 0..3 {
                d.h_ss[m][n] += -trace_prod(&pj[n], &pj[m])
                    + 2.0 * (w[m][0] * pw[n][0] + w[m][1] * pw[n][1]);
            }
            for (c, row) in d.h_mus.iter_mut().enumerate() {
                row[m] += 2.0 * pw[m][c];
            }
        }
        d.g_mu[0] -= 2.0 * z[0];
        d.g_mu[1] -= 2.0 * z[1];
        for i in 0..2 {
            for j in 0..2 {
                d.h_mumu[i][j] += 2.0 * pm[i][j];
            }
        }
    }
    Some(d)
}

/// Score equations `Σ tr(V_i⁻¹J_m) − Σ r_iᵗV_i⁻¹J_mV_i⁻¹r_i`, `m = 1, 2, 3`,
/// at mean `mu` and nuisance `psi`.
pub fn score_residual(data: &DtaData, mu: [f64; 2], psi: &BivarNuisance) -> Result<[f64; 3]> {
    score_cov(data, mu, &psi.covariance())
        .ok_or_else(|| Error::numerical("marginal covariance is not positive definite"))
}

pub(crate) fn score_cov(data: &DtaData, mu: [f64; 2], s: &[f64; 3]) -> Option<[f64; 3]> {
    let mut g = [0.0; 3];
    for st in data.studies() {
        let p = marginal_cov(st, s).inverse()?;
        let z = p.apply([st.ya - mu[0], st.yb - mu[1]]);
        g[0] += p.a - z[0] * z[0];
        g[1] += p.c - z[1] * z[1];
        g[2] += 2.0 * (p.b - z[0] * z[1]);
    }
    Some(g)
}

/// Covariance of the GLS mean, `(Σ V_i⁻¹)⁻¹`, as `[[v_A, c], [c, v_B]]`.
pub fn mean_covariance(data: &DtaData, psi: &BivarNuisance) -> Result<[[f64; 2]; 2]> {
    let s = psi.covariance();
    let mut info = super::Sym2 {
        a: 0.0,
        b: 0.0,
        c: 0.0,
    };
    for st in data.studies() {
        let p = marginal_cov(st, &s)
            .inverse()
            .ok_or_else(|| Error::numerical("marginal covariance is not positive definite"))?;
        info.a += p.a;
        info.b += p.b;
        info.c += p.c;
    }
    let cov = info
        .inverse()
        .ok_or_else(|| Error::numerical("information matrix is singular"))?;
    Ok(mat(&cov))
}

/// Covariance coordinates and their first and second derivatives in `θ`.
struct Chain {
    s: [f64; 3],
    js: [[f64; 3]; 3],
    hess: [[[f64; 3]; 3]; 3],
}

fn chain(theta: &[f64]) -> Chain {
    let (a, b, z) = (theta[0], theta[1], theta[2]);
    let t = z.tanh();
    let r = RHO_BOUND * t;
    let r1 = RHO_BOUND * (1.0 - t * t);
    let r2 = -2.0 * t * r1;
    let mut hess = [[[0.0; 3]; 3]; 3];
    hess[0][0][0] = 2.0;
    hess[1][1][1] = 2.0;
    hess[2] = [[0.0, r, r1 * b], [r, 0.0, r1 * a], [r1 * b, r1 * a, r2 * a * b]];
    Chain {
        s: [a * a, b * b, r * a * b],
        js: [[2.0 * a, 0.0, 0.0], [0.0, 2.0 * b, 0.0], [r * b, r * a, r1 * a * b]],
        hess,
    }
}

pub(crate) fn theta_to_nuisance(theta: &[f64]) -> BivarNuisance {
    let (a, b) = (theta[0], theta[1]);
    let mut rho = RHO_BOUND * theta[2].tanh();
    if (a < 0.0) != (b < 0.0) {
        rho = -rho;
    }
    BivarNuisance {
        sigma_a2: a * a,
        sigma_b2: b * b,
        rho,
    }
}

pub(crate) fn nuisance_to_theta(psi: &BivarNuisance) -> [f64; 3] {
    let rho = (psi.rho / RHO_BOUND).clamp(-0.99, 0.99);
    [
        psi.sigma_a2.sqrt().max(MIN_START_SD),
        psi.sigma_b2.sqrt().max(MIN_START_SD),
        rho.atanh(),
    ]
}

/// Deviance, gradient and Hessian in the optimizer coordinates. With
/// `free_mean` the first two coordinates are `(μ_A, μ_B)`.
fn objective(
    data: &DtaData,
    mu0: [f64; 2],
    x: &[f64],
    free_mean: bool,
) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    let (mu, theta) = if free_mean {
        ([x[0], x[1]], &x[2..])
    } else {
        (mu0, x)
    };
    let c = chain(theta);
    let d = derivs(data, mu, &c.s)?;
    let off = if free_mean { 2 } else { 0 };
    let n = off + 3;
    let mut g = DVector::zeros(n);
    let mut h = DMatrix::zeros(n, n);
    for p in 0..3 {
        g[off + p] = (0..3).map(|m| d.g_s[m] * c.js[m][p]).sum();
        for q in 0..3 {
            let mut v = 0.0;
            for m in 0..3 {
                v += d.g_s[m] * c.hess[m][p][q];
                for l in 0..3 {
                    v += c.js[m][p] * d.h_ss[m][l] * c.js[l][q];
                }
            }
            h[(off + p, off + q)] = v;
        }
    }
    if free_mean {
        for i in 0..2 {
            g[i] = d.g_mu[i];
            for j in 0..2 {
                h[(i, j)] = d.h_mumu[i][j];
            }
            for q in 0..3 {
                let v: f64 = (0..3).map(|m| d.h_mus[i][m] * c.js[m][q]).sum();
                h[(i, 2 + q)] = v;
                h[(2 + q, i)] = v;
            }
        }
    }
    Some((d.dev, g, h))
}

struct NewtonResult {
    x: Vec<f64>,
    value: f64,
    converged: bool,
    iterations: usize,
}

/// Levenberg-damped Newton minimization.
fn damped_newton<F>(mut f: F, x0: &[f64]) -> Option<NewtonResult>
where
    F: FnMut(&[f64]) -> Option<(f64, DVector<f64>, DMatrix<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g, mut h) = f(&x)?;
    if !fx.is_finite() {
        return None;
    }
    let mut lambda = 0.0;
    for it in 0..MAX_ITER {
        if g.amax() < GRAD_TOL {
            return Some(NewtonResult {
                x,
                value: fx,
                converged: true,
                iterations: it,
            });
        }
        let scale = (0..n).map(|i| h[(i, i)].abs()).fold(1e-8, f64::max);
        let mut accepted = false;
        for _ in 0..60 {
            let mut damped = h.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * scale;
            }
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
                    continue;
                }
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match f(&trial) {
                Some((ft, gt, ht)) if ft.is_finite() && ft <= fx + 1e-12 * fx.abs() => {
                    let small = step.amax() < 1e-13 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                    let improvement = fx - ft;
                    x = trial;
                    fx = ft;
                    g = gt;
                    h = ht;
                    lambda = if lambda < 1e-9 { 0.0 } else { lambda / 10.0 };
                    accepted = true;
                    if small || (improvement.abs() < 1e-15 * (1.0 + fx.abs()) && g.amax() < 1e-6) {
                        return Some(NewtonResult {
                            x,
                            value: fx,
                            converged: true,
                            iterations: it + 1,
                        });
                    }
                    break;
                }
                _ => {
                    lambda = if lambda == 0.0 { 1e-6 } else { lambda * 10.0 };
                }
            }
        }
        if !accepted {
            let converged = g.amax() < 1e-6;
            return Some(NewtonResult {
                x,
                value: fx,
                converged,
                iterations: it,
            });
        }
    }
    let converged = g.amax() < 1e-6;
    Some(NewtonResult {
        x,
        value: fx,
        converged,
        iterations: MAX_ITER,
    })
}

/// Moment-based starting nuisance values.
pub(crate) fn moment_start(data: &DtaData) -> BivarNuisance {
    let k = data.k() as f64;
    let st = data.studies();
    let ma = st.iter().map(|s| s.ya).sum::<f64>() / k;
    let mb = st.iter().map(|s| s.yb).sum::<f64>() / k;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for s in st {
        saa += (s.ya - ma).powi(2);
        sbb += (s.yb - mb).powi(2);
        sab += (s.ya - ma) * (s.yb - mb);
    }
    let va = st.iter().map(|s| s.va).sum::<f64>() / k;
    let vb = st.iter().map(|s| s.vb).sum::<f64>() / k;
    let sa2 = (saa / (k - 1.0) - va).max(0.05);
    let sb2 = (sbb / (k - 1.0) - vb).max(0.05);
    let rho = if saa > 0.0 && sbb > 0.0 {
        (sab / (saa * sbb).sqrt()).clamp(-0.9, 0.9)
    } else {
        0.0
    };
    BivarNuisance {
        sigma_a2: sa2,
        sigma_b2: sb2,
        rho,
    }
}

/// The moment start followed by four jittered copies.
pub(crate) fn cold_starts(data: &DtaData) -> Vec<BivarNuisance> {
    let m = moment_start(data);
    let jitter = [
        (1.0, 1.0, m.rho),
        (4.0, 4.0, 0.0),
        (0.25, 0.25, 0.0),
        (4.0, 0.25, 0.5),
        (0.25, 4.0, -0.5),
    ];
    jitter
        .iter()
        .map(|&(fa, fb, rho)| BivarNuisance {
            sigma_a2: m.sigma_a2 * fa,
            sigma_b2: m.sigma_b2 * fb,
            rho,
        })
        .collect()
}

fn best_fit(
    data: &DtaData,
    mu0: [f64; 2],
    free_mean: bool,
    starts: &[BivarNuisance],
) -> Result<BivarFit> {
    let mut best: Option<BivarFit> = None;
    fn consider(best: &mut Option<BivarFit>, fit: BivarFit) {
        let better = match best {
            None => true,
            Some(b) => {
                fit.deviance < b.deviance - 1e-10
                    || (fit.converged && !b.converged && fit.deviance <= b.deviance + 1e-10)
            }
        };
        if better {
            *best = Some(fit);
        }
    }
    for start in starts {
        let theta = nuisance_to_theta(start);
        let x0: Vec<f64> = if free_mean {
            let m = gls_mean(data, &start.covariance()).unwrap_or(mu0);
            vec![m[0], m[1], theta[0], theta[1], theta[2]]
        } else {
            theta.to_vec()
        };
        if let Some(r) = damped_newton(|x| objective(data, mu0, x, free_mean), &x0) {
            let (mu, th) = if free_mean {
                ([r.x[0], r.x[1]], &r.x[2..])
            } else {
                (mu0, &r.x[..])
            };
            consider(&mut best, BivarFit {
                mu,
                nuisance: theta_to_nuisance(th),
                deviance: r.value,
                converged: r.converged,
                iterations: r.iterations,
            });
        }
    }
    if !best.as_ref().is_some_and(|b| b.converged) {
        // Derivative-free fallback over the profile deviance.
        let start = nuisance_to_theta(&starts[0]);
        let profile = |th: &[f64]| -> f64 {
            let s = chain(th).s;
            let mu = if free_mean { gls_mean(data, &s) } else { Some(mu0) };
            mu.and_then(|mu| deviance_cov(data, mu, &s)).unwrap_or(f64::INFINITY)
        };
        let nm = nelder_mead(profile, &start, 0.3, 1e-12, 4000);
        if nm.value.is_finite() {
            let s = chain(&nm.x).s;
            let mu = if free_mean {
                gls_mean(data, &s).unwrap_or(mu0)
            } else {
                mu0
            };
            consider(&mut best, BivarFit {
                mu,
                nuisance: theta_to_nuisance(&nm.x),
                deviance: nm.value,
                converged: false,
                iterations: nm.iterations,
            });
        }
    }
    best.ok_or_else(|| Error::Convergence("bivariate fit failed from every start".into()))
}

/// Constrained fit of `ψ` with the mean fixed at `mu0`.
pub fn fit_constrained_bivar(data: &DtaData, mu0: [f64; 2]) -> Result<BivarFit> {
    best_fit(data, mu0, false, &cold_starts(data))
}

/// Unconstrained fit of `(μ, ψ)`.
pub fn fit_ml_bivar(data: &DtaData) -> Result<BivarFit> {
    best_fit(data, [0.0; 2], true, &cold_starts(data))
}

pub(crate) fn fit_constrained_from(
    data: &DtaData,
    mu0: [f64; 2],
    starts: &[BivarNuisance],
) -> Result<BivarFit> {
    best_fit(data, mu0, false, starts)
}

pub(crate) fn fit_ml_from(data: &DtaData, starts: &[BivarNuisance]) -> Result<BivarFit> {
    best_fit(data, [0.0; 2], true, starts)
}
