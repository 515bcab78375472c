//! Coverage experiments: data generators, grid presets and the replication
//! harness.

mod generate;

pub use generate::{
    gen_bivariate, gen_network, gen_univariate, log_odds_ratio, network_designs, treated_rate,
    within_variance, GeneratorTag, SimDataset, SimReplicate, Truth, DTA_MU, NETWORK_MU,
    UNIVARIATE_MU,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::bivariate::{in_approx_region, p_value_bivar};
use crate::comparators::{
    dl_interval, knha_interval, lr_interval_net, lr_interval_uni, reml_interval_uni,
    reml_wald_net, Method, MethodResult,
};
use crate::error::{Error, Result};
use crate::network::{p_value_contrast, NetworkModel};
use crate::rng::{derive_seed, DOMAIN_REPLICATE_SEED};
use crate::univariate::{ci_mu, p_value_mu};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Table1,
    Table2,
    Table3,
}

impl Experiment {
    pub fn methods(&self) -> Vec<Method> {
        match self {
            Experiment::Table1 => vec![Method::Mc, Method::Knha, Method::Lr, Method::Reml, Method::Dl],
            Experiment::Table2 => vec![Method::Mc, Method::Acr],
            Experiment::Table3 => vec![Method::Lr, Method::Reml, Method::Mc],
        }
    }

    /// Default `(replications, Monte Carlo replicates)`.
    pub fn default_scale(&self) -> (usize, usize) {
        match self {
            Experiment::Table1 => (2000, 1000),
            Experiment::Table2 => (1000, 500),
            Experiment::Table3 => (2000, 1000),
        }
    }

    /// Every cell of the experiment's grid.
    pub fn grid(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        match self {
            Experiment::Table1 => {
                for tau2 in [0.10, 0.20] {
                    for k in [3, 5, 7, 9] {
                        out.push(Cell { k, tau2, rho: 0.0 });
                    }
                }
            }
            Experiment::Table2 => {
                for tau2 in [0.5, 0.75, 1.0] {
                    for k in [8, 12, 16] {
                        for rho in [0.0, 0.4, 0.8] {
                            out.push(Cell { k, tau2, rho });
                        }
                    }
                }
            }
            Experiment::Table3 => {
                for k in [8, 12, 16] {
                    for tau in [0.2f64, 0.3, 0.4] {
                        out.push(Cell { k, tau2: tau * tau, rho: 0.5 });
                    }
                }
            }
        }
        out
    }

    fn truth(&self) -> Vec<f64> {
        match self {
            Experiment::Table1 => vec![UNIVARIATE_MU],
            Experiment::Table2 => DTA_MU.to_vec(),
            Experiment::Table3 => NETWORK_MU.to_vec(),
        }
    }

    /// Coverage targets per replication: the DTA region covers the mean pair jointly.
    fn coverage_dims(&self) -> usize {
        match self {
            Experiment::Table2 => 1,
            _ => self.truth().len(),
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Experiment::Table1),
            "table2" => Ok(Experiment::Table2),
            "table3" => Ok(Experiment::Table3),
            _ => Err(Error::invalid(format!("unknown experiment '{s}'"))),
        }
    }
}

/// One grid cell. The network experiment is parametrized by `τ`; its cell
/// stores `τ²` and the fixed correlation 0.5.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub k: usize,
    pub tau2: f64,
    pub rho: f64,
}

impl Cell {
    /// Parse `k=3,tau2=0.10`, `k=8,tau2=0.5,rho=0` or `k=8,tau=0.2`.
    pub fn parse(experiment: Experiment, s: &str) -> Result<Self> {
        let mut k = None;
        let mut tau2 = None;
        let mut rho = match experiment {
            Experiment::Table3 => 0.5,
            _ => 0.0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("cell entry '{part}' is not key=value")))?;
            let num = || {
                value
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("cell value '{value}' is not a number")))
            };
            match key.trim() {
                "k" => {
                    k = Some(value.trim().parse::<usize>().map_err(|_| {
                        Error::invalid(format!("cell value '{value}' is not an integer"))
                    })?)
                }
                "tau2" => tau2 = Some(num()?),
                "tau" => tau2 = Some(num()?.powi(2)),
                "rho" if experiment == Experiment::Table2 => rho = num()?,
                other => return Err(Error::invalid(format!("unknown cell key '{other}'"))),
            }
        }
        let cell = Cell {
            k: k.ok_or_else(|| Error::invalid("cell needs k"))?,
            tau2: tau2.ok_or_else(|| Error::invalid("cell needs tau2 or tau"))?,
            rho,
        };
        if !(cell.tau2 >= 0.0) || !(cell.rho.abs() < 1.0) {
            return Err(Error::invalid("need tau2 >= 0 and |rho| < 1"));
        }
        Ok(cell)
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k={},tau2={},rho={}", self.k, self.tau2, self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageConfig {
    pub experiment: Experiment,
    pub cell: Cell,
    pub methods: Vec<Method>,
    pub replications: usize,
    /// Monte Carlo replicates `B` per p-value.
    pub replicates: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Invert the Monte Carlo test into intervals to report average
    /// lengths (univariate only); otherwise one p-value at the truth per
    /// replication.
    pub mc_lengths: bool,
}

impl CoverageConfig {
    pub fn new(experiment: Experiment, cell: Cell, seed: u64) -> Self {
        let (replications, replicates) = experiment.default_scale();
        CoverageConfig {
            experiment,
            cell,
            methods: experiment.methods(),
            replications,
            replicates,
            seed,
            alpha: 0.05,
            mc_lengths: experiment == Experiment::Table1,
        }
    }
}

/// Coverage of one method in one cell; one entry per target parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Coverage in percent.
    pub coverage: Vec<f64>,
    /// `√(c(1−c)/R)·100` with `R` the number of successful replications.
    pub mc_se: Vec<f64>,
    pub average_length: Option<Vec<f64>>,
    /// Replications that failed for this method and were excluded.
    pub failures: usize,
    /// Mean effective sample size of the Monte Carlo weights.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ess: Option<f64>,
    /// Fraction of degenerate Monte Carlo replicates.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub cell: Cell,
    pub replications: usize,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
    /// Replications whose data generation failed.
    pub generator_failures: usize,
    pub zero_cell_corrections: usize,
    /// Elapsed seconds; kept out of serialized output so that reports are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: f64,
}

impl ExperimentReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// `√(c(1−c)/n)·100` for a coverage `c` given in percent.
pub fn coverage_se(coverage_pct: f64, n: usize) -> f64 {
    let c = coverage_pct / 100.0;
    100.0 * (c * (1.0 - c) / n as f64).sqrt()
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, Default)]
struct Outcome {
    covered: Vec<bool>,
    lengths: Option<Vec<f64>>,
    ess: Option<f64>,
    degenerate: Option<f64>,
}

struct Replication {
    outcomes: Vec<Option<Outcome>>,
    corrections: usize,
}

fn interval_outcome(results: &[MethodResult], truth: &[f64]) -> Outcome {
    Outcome {
        covered: results.iter().zip(truth).map(|(r, &t)| r.contains(t)).collect(),
        lengths: Some(results.iter().map(|r| r.length()).collect()),
        ..Outcome::default()
    }
}

fn generate(config: &CoverageConfig, seed: u64) -> Result<SimReplicate> {
    let c = config.cell;
    match config.experiment {
        Experiment::Table1 => gen_univariate(c.k, UNIVARIATE_MU, c.tau2, seed),
        Experiment::Table2 => gen_bivariate(c.k, c.tau2, c.rho, seed),
        Experiment::Table3 => gen_network(c.k, c.tau2.sqrt(), seed),
    }
}

fn evaluate(config: &CoverageConfig, data: &SimDataset, method: Method, mc_seed: u64) -> Result<Outcome> {
    let alpha = config.alpha;
    let b = config.replicates;
    let truth = config.experiment.truth();
    match (data, method) {
        (SimDataset::Uni(d), Method::Mc) if config.mc_lengths => {
            let ci = ci_mu(d, alpha, b, mc_seed)?;
            Ok(Outcome {
                covered: vec![ci.contains(truth[0])],
                lengths: Some(vec![ci.length()]),
                ..Outcome::default()
            })
        }
        (SimDataset::Uni(d), Method::Mc) => {
            let p = p_value_mu(d, truth[0], b, mc_seed)?;
            Ok(Outcome {
                covered: vec![p.p > alpha],
                ess: Some(p.ess),
                degenerate: Some(p.n_degenerate as f64 / b as f64),
                ..Outcome::default()
            })
        }
        (SimDataset::Uni(d), Method::Dl) => Ok(interval_outcome(&[dl_interval(d, alpha)?], &truth)),
        (SimDataset::Uni(d), Method::Reml) => Ok(interval_outcome(&[reml_interval_uni(d, alpha)?], &truth)),
        (SimDataset::Uni(d), Method::Knha) => Ok(interval_outcome(&[knha_interval(d, alpha)?], &truth)),
        (SimDataset::Uni(d), Method::Lr) => Ok(interval_outcome(&[lr_interval_uni(d, alpha)?], &truth)),
        (SimDataset::Dta(d), Method::Mc) => {
            let p = p_value_bivar(d, [truth[0], truth[1]], b, mc_seed)?;
            Ok(Outcome {
                covered: vec![p.p > alpha],
                ess: Some(p.ess),
                degenerate: Some(p.n_degenerate as f64 / b as f64),
                ..Outcome::default()
            })
        }
        (SimDataset::Dta(d), Method::Acr) => Ok(Outcome {
            covered: vec![in_approx_region(d, alpha, [truth[0], truth[1]])?],
            ..Outcome::default()
        }),
        (SimDataset::Nma(studies), m) => {
            let model = NetworkModel::new(studies.clone(), truth.len())?;
            let unit = |j: usize| -> Vec<f64> { (0..truth.len()).map(|i| f64::from(u8::from(i == j))).collect() };
            match m {
                Method::Mc => {
                    let (mut covered, mut ess, mut degenerate) = (Vec::new(), 0.0, 0.0);
                    for (j, &t) in truth.iter().enumerate() {
                        let p = p_value_contrast(&model, &unit(j), t, b, mc_seed)?;
                        covered.push(p.p > alpha);
                        ess += p.ess;
                        degenerate += p.n_degenerate as f64 / b as f64;
                    }
                    let n = truth.len() as f64;
                    Ok(Outcome {
                        covered,
                        ess: Some(ess / n),
                        degenerate: Some(degenerate / n),
                        ..Outcome::default()
                    })
                }
                Method::Reml => Ok(interval_outcome(&reml_wald_net(&model, alpha)?, &truth)),
                Method::Lr => {
                    let r: Result<Vec<_>> = (0..truth.len())
                        .map(|j| lr_interval_net(&model, &unit(j), alpha))
                        .collect();
                    Ok(interval_outcome(&r?, &truth))
                }
                _ => Err(Error::invalid(format!("{} is not available for network data", m.label()))),
            }
        }
        (_, m) => Err(Error::invalid(format!(
            "{} is not available for this experiment",
            m.label()
        ))),
    }
}

fn replicate(config: &CoverageConfig, r: usize) -> Option<Replication> {
    let data_seed = derive_seed(config.seed, &[r as u64]);
    let mc_seed = derive_seed(config.seed, &[DOMAIN_REPLICATE_SEED, r as u64]);
    let sim = generate(config, data_seed).ok()?;
    let outcomes = config
        .methods
        .iter()
        .map(|&m| evaluate(config, &sim.data, m, mc_seed).ok())
        .collect();
    Some(Replication {
        outcomes,
        corrections: sim.zero_cell_corrections,
    })
}

/// Run one cell of a coverage experiment. Replications run in parallel;
/// each derives its data and Monte Carlo seeds from `(seed, r)` alone.
pub fn run_coverage(config: &CoverageConfig) -> Result<ExperimentReport> {
    if config.replications == 0 || config.replicates == 0 {
        return Err(Error::invalid("replications and replicates must be positive"));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1)"));
    }
    if config.methods.is_empty() {
        return Err(Error::invalid("no methods selected"));
    }
    let dims = config.experiment.coverage_dims();
    // Reject unsupported methods before spending any time.
    if let Ok(sim) = generate(config, derive_seed(config.seed, &[0])) {
        for &m in &config.methods {
            if let Err(e @ Error::InvalidInput(_)) = evaluate(
                &CoverageConfig {
                    replicates: 1,
                    mc_lengths: false,
                    ..config.clone()
                },
                &sim.data,
                m,
                0,
            ) {
                return Err(e);
            }
        }
    }
    let start = Instant::now();
    let reps: Vec<Option<Replication>> = (0..config.replications)
        .into_par_iter()
        .map(|r| replicate(config, r))
        .collect();
    let ok: Vec<&Replication> = reps.iter().flatten().collect();

    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(i, &method)| {
            let outcomes: Vec<&Outcome> = ok.iter().filter_map(|r| r.outcomes[i].as_ref()).collect();
            let n = outcomes.len();
            let coverage: Vec<f64> = (0..dims)
                .map(|j| 100.0 * outcomes.iter().filter(|o| o.covered[j]).count() as f64 / n.max(1) as f64)
                .collect();
            let mc_se = coverage.iter().map(|&c| coverage_se(c, n.max(1))).collect();
            let average_length = if n > 0 && outcomes.iter().all(|o| o.lengths.is_some()) {
                Some(
                    (0..dims)
                        .map(|j| outcomes.iter().map(|o| o.lengths.as_ref().unwrap()[j]).sum::<f64>() / n as f64)
                        .collect(),
                )
            } else {
                None
            };
            let mean = |f: fn(&Outcome) -> Option<f64>| {
                let v: Vec<f64> = outcomes.iter().filter_map(|o| f(o)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            MethodSummary {
                method,
                coverage,
                mc_se,
                average_length,
                failures: ok.len() - n,
                mean_ess: mean(|o| o.ess),
                degenerate_rate: mean(|o| o.degenerate),
            }
        })
        .collect();
    Ok(ExperimentReport {
        experiment: config.experiment,
        cell: config.cell,
        replications: config.replications,
        replicates: config.replicates,
        seed: config.seed,
        methods,
        generator_failures: reps.len() - ok.len(),
        zero_cell_corrections: ok.iter().map(|r| r.corrections).sum(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}
