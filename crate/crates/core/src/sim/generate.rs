//! Data generators for the coverage experiments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, StandardNormal};
use serde::Serialize;

use crate::bivariate::{DtaData, DtaStudy};
use crate::error::{Error, Result};
use crate::network::{contrasts_from_arms, ArmRecord, ContrastStudy, NetworkModel};
use crate::rng::{substream, DOMAIN_DATA};
use crate::univariate::UnivariateData;

/// Average log odds ratio of the univariate experiment.
pub const UNIVARIATE_MU: f64 = -0.8;
/// `(μ_A, μ_B)` of the diagnostic-accuracy experiment.
pub const DTA_MU: [f64; 2] = [1.0, -1.0];
/// Average log odds ratios of B, C, D versus A in the network experiment.
pub const NETWORK_MU: [f64; 3] = [0.4, 0.7, 1.0];

const CONTROL_RATE: (f64, f64) = (0.095, 0.65);
const ARM_SIZE: (u64, u64) = (20, 200);
const DTA_VARIANCE_RANGE: (f64, f64) = (0.009, 0.6);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorTag {
    Uni,
    Dta,
    Nma,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub mean: Vec<f64>,
    pub tau2: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum SimDataset {
    Uni(UnivariateData),
    Dta(DtaData),
    Nma(Vec<ContrastStudy>),
}

/// One simulated meta-analysis together with its latent effects and truth.
#[derive(Debug, Clone, Serialize)]
pub struct SimReplicate {
    pub tag: GeneratorTag,
    /// Latent study effects; one row per study.
    pub theta: Vec<Vec<f64>>,
    pub data: SimDataset,
    pub truth: Truth,
    pub seed: u64,
    /// Number of studies (univariate/dta) or study tables (nma) that needed
    /// the 0.5 zero-cell correction.
    pub zero_cell_corrections: usize,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn binomial(rng: &mut ChaCha8Rng, n: u64, p: f64) -> u64 {
    Binomial::new(n, p)
        .expect("probability in [0, 1]")
        .sample(rng)
}

/// Treatment-arm event probability with log odds ratio `theta` against a
/// control arm with probability `p0`.
pub fn treated_rate(p0: f64, theta: f64) -> f64 {
    let e = theta.exp();
    p0 * e / (1.0 - p0 + p0 * e)
}

/// Log odds ratio and its variance for a 2×2 table; 0.5 is added to every
/// cell when any cell is zero. Returns `(y, variance, corrected)`.
pub fn log_odds_ratio(events_t: f64, n_t: f64, events_c: f64, n_c: f64) -> (f64, f64, bool) {
    let mut cells = [events_t, n_t - events_t, events_c, n_c - events_c];
    let corrected = cells.contains(&0.0);
    if corrected {
        cells.iter_mut().for_each(|c| *c += 0.5);
    }
    let [a, b, c, d] = cells;
    ((a * d / (b * c)).ln(), 1.0 / a + 1.0 / b + 1.0 / c + 1.0 / d, corrected)
}

/// Univariate log-odds-ratio meta-analysis with binomial arms.
pub fn gen_univariate(k: usize, mu: f64, tau2: f64, seed: u64) -> Result<SimReplicate> {
    if k < 2 {
        return Err(Error::invalid("at least two studies are required"));
    }
    if !(tau2 >= 0.0) {
        return Err(Error::invalid("tau2 must be nonnegative"));
    }
    let mut rng = substream(seed, &[DOMAIN_DATA, 1]);
    let tau = tau2.sqrt();
    let (mut y, mut v, mut theta) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::new());
    let mut corrections = 0;
    for _ in 0..k {
        let th = mu + tau * normal(&mut rng);
        let p0 = rng.gen_range(CONTROL_RATE.0..CONTROL_RATE.1);
        let p1 = treated_rate(p0, th);
        let n = rng.gen_range(ARM_SIZE.0..=ARM_SIZE.1);
        let x0 = binomial(&mut rng, n, p0);
        let x1 = binomial(&mut rng, n, p1);
        let (yi, vi, corrected) = log_odds_ratio(x1 as f64, n as f64, x0 as f64, n as f64);
        corrections += usize::from(corrected);
        y.push(yi);
        v.push(vi);
        theta.push(vec![th]);
    }
    Ok(SimReplicate {
        tag: GeneratorTag::Uni,
        theta,
        data: SimDataset::Uni(UnivariateData::new(y, v)?),
        truth: Truth {
            mean: vec![mu],
            tau2,
            rho: 0.0,
        },
        seed,
        zero_cell_corrections: corrections,
    })
}

/// Draw `0.25·χ²₁` until it falls in `[0.009, 0.6]`.
pub fn within_variance(rng: &mut ChaCha8Rng) -> f64 {
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    loop {
        let v = 0.25 * chi.sample(rng);
        if (DTA_VARIANCE_RANGE.0..=DTA_VARIANCE_RANGE.1).contains(&v) {
            return v;
        }
    }
}

/// Bivariate diagnostic-accuracy meta-analysis with `μ = (1, −1)` and
/// `Σ = τ² [[1, ρ], [ρ, 1]]`.
pub fn gen_bivariate(k: usize, tau2: f64, rho: f64, seed: u64) -> Result<SimReplicate> {
    if k < 2 {
        return Err(Error::invalid("at least two studies are required"));
    }
    if !(tau2 >= 0.0) || !(rho > -1.0 && rho < 1.0) {
        return Err(Error::invalid("need tau2 >= 0 and |rho| < 1"));
    }
    let mut rng = substream(seed, &[DOMAIN_DATA, 2]);
    let va: Vec<f64> = (0..k).map(|_| within_variance(&mut rng)).collect();
    let vb: Vec<f64> = (0..k).map(|_| within_variance(&mut rng)).collect();
    let tau = tau2.sqrt();
    let mut studies = Vec::with_capacity(k);
    let mut theta = Vec::with_capacity(k);
    for i in 0..k {
        let (z1, z2) = (normal(&mut rng), normal(&mut rng));
        let ta = DTA_MU[0] + tau * z1;
        let tb = DTA_MU[1] + tau * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
        let ya = ta + va[i].sqrt() * normal(&mut rng);
        let yb = tb + vb[i].sqrt() * normal(&mut rng);
        theta.push(vec![ta, tb]);
        studies.push(DtaStudy::new(ya, yb, va[i], vb[i])?);
    }
    Ok(SimReplicate {
        tag: GeneratorTag::Dta,
        theta,
        data: SimDataset::Dta(DtaData::new(studies)?),
        truth: Truth {
            mean: DTA_MU.to_vec(),
            tau2,
            rho,
        },
        seed,
        zero_cell_corrections: 0,
    })
}

/// Trial designs of the quadrangular network (A = 0, B = 1, C = 2, D = 3)
/// for `k ∈ {8, 12, 16}`.
pub fn network_designs(k: usize) -> Result<Vec<Vec<usize>>> {
    // (design, count at k = 8, 12, 16)
    const TABLE: [(&[usize], [usize; 3]); 8] = [
        (&[0, 1], [1, 2, 2]),
        (&[0, 2], [3, 4, 6]),
        (&[0, 3], [1, 2, 3]),
        (&[1, 2], [0, 0, 1]),
        (&[1, 3], [0, 1, 1]),
        (&[2, 3], [1, 1, 1]),
        (&[0, 2, 3], [1, 1, 1]),
        (&[1, 2, 3], [1, 1, 1]),
    ];
    let col = match k {
        8 => 0,
        12 => 1,
        16 => 2,
        _ => return Err(Error::invalid("network experiment supports k = 8, 12 or 16")),
    };
    Ok(TABLE
        .iter()
        .flat_map(|(design, counts)| std::iter::repeat_n(design.to_vec(), counts[col]))
        .collect())
}

/// Network meta-analysis of four treatments with binomial arms; latent log
/// odds ratios `θ_i ~ N(μ, τ² P(0.5))`.
pub fn gen_network(k: usize, tau: f64, seed: u64) -> Result<SimReplicate> {
    if !(tau >= 0.0) {
        return Err(Error::invalid("tau must be nonnegative"));
    }
    let designs = network_designs(k)?;
    let mut rng = substream(seed, &[DOMAIN_DATA, 3]);
    // Cholesky factor of P(0.5) for three treatments.
    let l = [
        [1.0, 0.0, 0.0],
        [0.5, 0.75f64.sqrt(), 0.0],
        [0.5, 0.5 / 3f64.sqrt(), (2.0f64 / 3.0).sqrt()],
    ];
    let mut arms = Vec::new();
    let mut theta = Vec::with_capacity(k);
    for (study, design) in designs.iter().enumerate() {
        let z = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        let th: Vec<f64> = (0..3)
            .map(|r| NETWORK_MU[r] + tau * (0..3).map(|c| l[r][c] * z[c]).sum::<f64>())
            .collect();
        let p0 = rng.gen_range(CONTROL_RATE.0..CONTROL_RATE.1);
        let n = rng.gen_range(ARM_SIZE.0..=ARM_SIZE.1);
        for &t in design {
            let p = if t == 0 { p0 } else { treated_rate(p0, th[t - 1]) };
            let events = binomial(&mut rng, n, p);
            arms.push(ArmRecord {
                study: study as u64,
                treatment: t,
                events: events as f64,
                n: n as f64,
            });
        }
        theta.push(th);
    }
    let assembled = contrasts_from_arms(&arms, true)?;
    // Validate connectivity once; the harness rebuilds models as needed.
    NetworkModel::new(assembled.studies.clone(), 3)?;
    Ok(SimReplicate {
        tag: GeneratorTag::Nma,
        theta,
        data: SimDataset::Nma(assembled.studies),
        truth: Truth {
            mean: NETWORK_MU.to_vec(),
            tau2: tau * tau,
            rho: 0.5,
        },
        seed,
        zero_cell_corrections: assembled.zero_cell_corrections,
    })
}
