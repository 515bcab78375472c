//! Contrast-based network meta-analysis.
//!
//! Study `i` reports log odds ratios `y_i` of its `p_i` non-reference
//! treatments against the reference, with within-study covariance `S_i`.
//! The model is `y = Xβ + Zu + ε` with `u_i ~ N(0, τ² P(0.5))`, so that
//! `V(τ²)` is block diagonal with blocks `τ² P_{p_i}(0.5) + S_i`.

mod fit;
mod pivot;

pub use fit::{
    fit_constrained_net, fit_ml_net, fit_reml_net, profile_score, NetFit, NetNuisance,
};
pub use pivot::{
    ci_contrast, p_value_contrast, pivot_equations_net, pivot_net, weight_net,
    weight_net_with_step, ContrastTest, NetJacobians,
};

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Events and patients of the pseudo reference arm added to studies that
/// lack the reference treatment.
pub const AUGMENT_EVENTS: f64 = 0.001;
pub const AUGMENT_PATIENTS: f64 = 0.01;
/// Correlation of the compound-symmetry heterogeneity structure.
pub const CS_CORRELATION: f64 = 0.5;

/// One arm of one study; treatment 0 is the reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub study: u64,
    pub treatment: usize,
    pub events: f64,
    pub n: f64,
}

/// Contrasts of one study against the reference treatment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastStudy {
    /// Non-reference treatment ids (1-based), one per contrast.
    pub treatments: Vec<usize>,
    pub y: Vec<f64>,
    /// Within-study covariance, row-major `p_i × p_i`.
    pub s: Vec<Vec<f64>>,
}

impl ContrastStudy {
    pub fn new(treatments: Vec<usize>, y: Vec<f64>, s: Vec<Vec<f64>>) -> Result<Self> {
        let m = treatments.len();
        if m == 0 {
            return Err(Error::invalid("a study needs at least one contrast"));
        }
        if y.len() != m || s.len() != m || s.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("contrast dimensions do not match"));
        }
        if treatments.contains(&0) {
            return Err(Error::invalid("contrast treatments must be non-reference ids"));
        }
        let mut sorted = treatments.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != m {
            return Err(Error::invalid("treatment ids within a study must be distinct"));
        }
        if y.iter().chain(s.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("contrast values must be finite"));
        }
        let study = ContrastStudy { treatments, y, s };
        let mat = study.s_matrix();
        if (&mat - mat.transpose()).amax() > 1e-10 * mat.amax().max(1.0) || mat.cholesky().is_none() {
            return Err(Error::invalid("within-study covariance must be symmetric positive definite"));
        }
        Ok(study)
    }

    pub fn dim(&self) -> usize {
        self.treatments.len()
    }

    pub(crate) fn s_matrix(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_fn(m, m, |i, j| self.s[i][j])
    }
}

/// Contrast studies assembled from arm-level records.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assembled {
    pub studies: Vec<ContrastStudy>,
    /// Study ids in output order.
    pub study_ids: Vec<u64>,
    /// Studies that received the 0.5 zero-cell correction.
    pub zero_cell_corrections: usize,
    /// Studies that received a pseudo reference arm.
    pub augmented: usize,
}

fn log_odds(events: f64, n: f64) -> f64 {
    (events / (n - events)).ln()
}

fn arm_variance(events: f64, n: f64) -> f64 {
    1.0 / events + 1.0 / (n - events)
}

/// Log odds-ratio contrasts against treatment 0 for every study.
///
/// A study with a zero cell has 0.5 added to the events and non-events of
/// each of its observed arms. A study without the reference arm gets a
/// pseudo arm of [`AUGMENT_EVENTS`] events in [`AUGMENT_PATIENTS`] patients
/// when `augment` is set and is an error otherwise.
pub fn contrasts_from_arms(arms: &[ArmRecord], augment: bool) -> Result<Assembled> {
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<ArmRecord>> = HashMap::new();
    for arm in arms {
        if !(arm.n > 0.0 && arm.events >= 0.0 && arm.events <= arm.n) {
            return Err(Error::invalid(format!(
                "study {}: need 0 <= events <= n and n > 0",
                arm.study
            )));
        }
        groups
            .entry(arm.study)
            .or_insert_with(|| {
                order.push(arm.study);
                Vec::new()
            })
            .push(*arm);
    }
    let mut out = Assembled {
        studies: Vec::with_capacity(order.len()),
        study_ids: order.clone(),
        zero_cell_corrections: 0,
        augmented: 0,
    };
    for id in order {
        let mut group = groups.remove(&id).expect("grouped above");
        if group.len() < 2 {
            return Err(Error::invalid(format!("study {id} has a single arm")));
        }
        group.sort_by_key(|a| a.treatment);
        if group.windows(2).any(|w| w[0].treatment == w[1].treatment) {
            return Err(Error::invalid(format!("study {id} repeats a treatment")));
        }
        if group.iter().any(|a| a.events == 0.0 || a.events == a.n) {
            for a in group.iter_mut() {
                a.events += 0.5;
                a.n += 1.0;
            }
            out.zero_cell_corrections += 1;
        }
        let reference = if group[0].treatment == 0 {
            group.remove(0)
        } else if augment {
            out.augmented += 1;
            ArmRecord {
                study: id,
                treatment: 0,
                events: AUGMENT_EVENTS,
                n: AUGMENT_PATIENTS,
            }
        } else {
            return Err(Error::invalid(format!(
                "study {id} lacks the reference treatment; enable augmentation"
            )));
        };
        let base = log_odds(reference.events, reference.n);
        let shared = arm_variance(reference.events, reference.n);
        let m = group.len();
        let y = group.iter().map(|a| log_odds(a.events, a.n) - base).collect();
        let s = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        if i == j {
                            shared + arm_variance(group[i].events, group[i].n)
                        } else {
                            shared
                        }
                    })
                    .collect()
            })
            .collect();
        out.studies.push(ContrastStudy::new(
            group.iter().map(|a| a.treatment).collect(),
            y,
            s,
        )?);
    }
    Ok(out)
}

/// `P_m(ρ)`: unit diagonal, every off-diagonal element `ρ`.
pub fn cs_matrix(m: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { rho })
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub y: DVector<f64>,
    pub s: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Rows of the (possibly transformed) design matrix.
    pub x: DMatrix<f64>,
}

impl Block {
    pub fn v(&self, tau2: f64) -> DMatrix<f64> {
        &self.s + &self.q * tau2
    }
}

/// Network model with stacked response, design and block-diagonal
/// covariance structure.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    studies: Vec<ContrastStudy>,
    p: usize,
    pub(crate) blocks: Vec<Block>,
    /// Contrast matrix `A` when the design is `X A⁻¹`.
    transform: Option<DMatrix<f64>>,
}

impl NetworkModel {
    /// Model for `p` non-reference treatments. Errors when some treatment
    /// id exceeds `p` or the network does not identify every `β_j`.
    pub fn new(studies: Vec<ContrastStudy>, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("need at least one non-reference treatment"));
        }
        if studies.is_empty() {
            return Err(Error::invalid("need at least one study"));
        }
        let mut blocks = Vec::with_capacity(studies.len());
        for st in &studies {
            if st.treatments.iter().any(|&t| t > p) {
                return Err(Error::invalid(format!("treatment id exceeds p = {p}")));
            }
            let m = st.dim();
            let mut x = DMatrix::zeros(m, p);
            for (r, &t) in st.treatments.iter().enumerate() {
                x[(r, t - 1)] = 1.0;
            }
            blocks.push(Block {
                y: DVector::from_vec(st.y.clone()),
                s: st.s_matrix(),
                q: cs_matrix(m, CS_CORRELATION),
                x,
            });
        }
        let model = NetworkModel {
            studies,
            p,
            blocks,
            transform: None,
        };
        let xtx = model.blocks.iter().fold(DMatrix::zeros(p, p), |acc, b| acc + b.x.transpose() * &b.x);
        let eig = xtx.symmetric_eigenvalues();
        if eig.min() < 1e-9 * eig.max() {
            return Err(Error::invalid("the network is disconnected; some effects are not identified"));
        }
        Ok(model)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    /// Total number of contrasts `N`.
    pub fn n_obs(&self) -> usize {
        self.blocks.iter().map(|b| b.y.len()).sum()
    }

    pub fn studies(&self) -> &[ContrastStudy] {
        &self.studies
    }

    pub fn transform(&self) -> Option<&DMatrix<f64>> {
        self.transform.as_ref()
    }

    /// Stacked response.
    pub fn y(&self) -> DVector<f64> {
        let v: Vec<f64> = self.blocks.iter().flat_map(|b| b.y.iter().copied()).collect();
        DVector::from_vec(v)
    }

    /// Stacked design matrix.
    pub fn x(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_obs(), self.p);
        let mut row = 0;
        for b in &self.blocks {
            x.rows_mut(row, b.x.nrows()).copy_from(&b.x);
            row += b.x.nrows();
        }
        x
    }

    /// Same design with a new stacked response.
    pub fn with_y(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(Error::invalid("response length does not match the design"));
        }
        let mut out = self.clone();
        let mut row = 0;
        for b in out.blocks.iter_mut() {
            let m = b.y.len();
            b.y.copy_from_slice(&y[row..row + m]);
            row += m;
        }
        Ok(out)
    }

    /// Full `V(τ²)`; mostly for checks, the fits work blockwise.
    pub fn build_v(&self, tau2: f64) -> Result<DMatrix<f64>> {
        if !(tau2 >= 0.0) {
            return Err(Error::invalid("tau2 must be nonnegative"));
        }
        let n = self.n_obs();
        let mut v = DMatrix::zeros(n, n);
        let mut row = 0;
        for b in &self.blocks {
            let m = b.y.len();
            v.view_mut((row, row), (m, m)).copy_from(&b.v(tau2));
            row += m;
        }
        Ok(v)
    }
}

/// Full-rank `A` with first row `cᵗ`; the remaining rows are standard basis
/// vectors, skipping the coordinate where `|c_j|` is largest.
pub fn contrast_matrix(c: &[f64]) -> Result<DMatrix<f64>> {
    let p = c.len();
    let (pivot, cmax) = c
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
    if !(cmax > 0.0) || c.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("contrast vector must be finite and nonzero"));
    }
    let mut a = DMatrix::zeros(p, p);
    for j in 0..p {
        a[(0, j)] = c[j];
    }
    for (row, j) in (0..p).filter(|&j| j != pivot).enumerate() {
        a[(row + 1, j)] = 1.0;
    }
    Ok(a)
}

/// Model with design `X A⁻¹`, whose first coefficient is `η = cᵗβ`.
/// Transforms compose: `c` refers to the coefficients of `model`.
pub fn contrast_transform(model: &NetworkModel, c: &[f64]) -> Result<NetworkModel> {
    if c.len() != model.p {
        return Err(Error::invalid(format!(
            "contrast has length {}, expected {}",
            c.len(),
            model.p
        )));
    }
    let a = contrast_matrix(c)?;
    let a_inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numerical("contrast matrix is singular"))?;
    let mut out = model.clone();
    for b in out.blocks.iter_mut() {
        b.x = &b.x * &a_inv;
    }
    out.transform = Some(match &model.transform {
        Some(prev) => &a * prev,
        None => a,
    });
    Ok(out)
}

/// Deviance `log|V| + (y − Xβ)ᵗ V⁻¹ (y − Xβ)`.
pub fn deviance_net(model: &NetworkModel, beta: &[f64], tau2: f64) -> Result<f64> {
    if beta.len() != model.p {
        return Err(Error::invalid("coefficient vector has the wrong length"));
    }
    let beta = DVector::from_column_slice(beta);
    let mut total = 0.0;
    for b in &model.blocks {
        let chol = b
            .v(tau2)
            .cholesky()
            .ok_or_else(|| Error::numerical("V block is not positive definite"))?;
        let r = &b.y - &b.x * &beta;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        total += logdet + r.dot(&chol.solve(&r));
    }
    Ok(total)
}
