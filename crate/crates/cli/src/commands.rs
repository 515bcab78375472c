//! Subcommand implementations. Each returns the rendered output text.

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use serde::Serialize;

use exactmeta::bivariate::{
    approx_region, confidence_region, fit_ml_bivar, p_value_bivar, BivarFit, DtaData, RocPoint,
};
use exactmeta::comparators::{
    dl_interval, knha_interval, lr_interval_net, lr_interval_uni, reml_bivar, reml_interval_uni,
    reml_wald_net, Method, MethodResult,
};
use exactmeta::io::{read_dta, read_network, read_univariate, NetworkInput};
use exactmeta::mc::PValueResult;
use exactmeta::network::{
    ci_contrast, contrast_transform, contrasts_from_arms, fit_ml_net, p_value_contrast,
    NetworkModel,
};
use exactmeta::sim::{run_coverage, Cell, CoverageConfig, Experiment, ExperimentReport};
use exactmeta::univariate::{ci_mu, fit_ml, p_value_mu, UnivariateData};
use exactmeta::{Error, Result};

use crate::{DtaArgs, Format, NmaArgs, SimArgs, UniArgs};

fn open_input(path: &Path) -> Result<Box<dyn Read>> {
    if path.as_os_str() == "-" {
        Ok(Box::new(io::stdin()))
    } else {
        let f = File::open(path)
            .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
        Ok(Box::new(f))
    }
}

fn method(s: &str, allowed: &[Method], context: &str) -> Result<Method> {
    let m: Method = s.parse()?;
    if !allowed.contains(&m) {
        return Err(Error::InvalidInput(format!(
            "method {} is not available for {context}",
            m.label()
        )));
    }
    Ok(m)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numerical(format!("serialization failed: {e}")))?;
    s.push('\n');
    Ok(s)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Numerical(format!("serialization failed: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Numerical(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Monte Carlo diagnostics reported with an interval.
#[derive(Debug, Clone, Copy, Default)]
struct Diagnostics {
    ess: Option<f64>,
    n_degenerate: Option<usize>,
}

impl From<&PValueResult> for Diagnostics {
    fn from(p: &PValueResult) -> Self {
        Diagnostics {
            ess: Some(p.ess),
            n_degenerate: Some(p.n_degenerate),
        }
    }
}

#[derive(Debug, Serialize)]
struct IntervalOutput {
    method: Method,
    estimate: f64,
    lower: f64,
    upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_value_at_null: Option<f64>,
    tau2: f64,
    ess: Option<f64>,
    n_degenerate: Option<usize>,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct IntervalRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    method: &'static str,
    estimate: f64,
    lower: f64,
    upper: f64,
    p_value_at_null: String,
    tau2: f64,
    ess: String,
    n_degenerate: String,
    seed: u64,
}

impl IntervalOutput {
    fn row(&self) -> IntervalRow {
        IntervalRow {
            label: None,
            method: self.method.label(),
            estimate: self.estimate,
            lower: self.lower,
            upper: self.upper,
            p_value_at_null: opt(self.p_value_at_null),
            tau2: self.tau2,
            ess: opt(self.ess),
            n_degenerate: self.n_degenerate.map(|n| n.to_string()).unwrap_or_default(),
            seed: self.seed,
        }
    }
}

fn comparator_output(r: MethodResult, seed: u64) -> IntervalOutput {
    IntervalOutput {
        method: r.method,
        estimate: r.estimate,
        lower: r.lower,
        upper: r.upper,
        p_value_at_null: None,
        tau2: r.tau2,
        ess: None,
        n_degenerate: None,
        seed,
    }
}

fn uni_output(a: &UniArgs, data: &UnivariateData) -> Result<IntervalOutput> {
    let c = &a.common;
    let m = method(
        &c.method,
        &[Method::Mc, Method::Dl, Method::Reml, Method::Knha, Method::Lr],
        "univariate data",
    )?;
    let mut out = match m {
        Method::Mc => {
            let fit = fit_ml(data);
            if !fit.converged {
                return Err(Error::Convergence("heterogeneity fit".into()));
            }
            let ci = ci_mu(data, c.alpha, c.b, c.seed)?;
            // Weight diagnostics at the estimate; the weights do not depend
            // on the tested value's statistic.
            let diag = Diagnostics::from(&p_value_mu(data, fit.mu, c.b, c.seed)?);
            IntervalOutput {
                method: m,
                estimate: fit.mu,
                lower: ci.lower,
                upper: ci.upper,
                p_value_at_null: None,
                tau2: fit.tau2,
                ess: diag.ess,
                n_degenerate: diag.n_degenerate,
                seed: c.seed,
            }
        }
        Method::Dl => comparator_output(dl_interval(data, c.alpha)?, c.seed),
        Method::Reml => comparator_output(reml_interval_uni(data, c.alpha)?, c.seed),
        Method::Knha => comparator_output(knha_interval(data, c.alpha)?, c.seed),
        Method::Lr => comparator_output(lr_interval_uni(data, c.alpha)?, c.seed),
        Method::Acr => unreachable!("rejected above"),
    };
    if let Some(mu0) = a.null {
        if m != Method::Mc {
            return Err(Error::InvalidInput("--null needs --method mc".into()));
        }
        let p = p_value_mu(data, mu0, c.b, c.seed)?;
        out.p_value_at_null = Some(p.p);
        out.ess = Some(p.ess);
        out.n_degenerate = Some(p.n_degenerate);
    }
    Ok(out)
}

pub fn uni(a: &UniArgs) -> Result<String> {
    let data = read_univariate(open_input(&a.common.input)?)?;
    let out = uni_output(a, &data)?;
    match a.common.format {
        Format::Json => to_json(&out),
        Format::Csv => to_csv(&[out.row()]),
    }
}

#[derive(Debug, Serialize)]
struct RegionPoint {
    t: f64,
    #[serde(rename = "muA")]
    mu_a: f64,
    #[serde(rename = "muB")]
    mu_b: f64,
    sens: f64,
    fpr: f64,
}

impl From<RocPoint> for RegionPoint {
    fn from(p: RocPoint) -> Self {
        RegionPoint {
            t: p.t,
            mu_a: p.mu_a,
            mu_b: p.mu_b,
            sens: p.sens,
            fpr: p.fpr,
        }
    }
}

#[derive(Debug, Serialize)]
struct DtaOutput {
    method: Method,
    estimate: [f64; 2],
    /// Between-study variances of logit sensitivity and specificity.
    tau2: [f64; 2],
    rho: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_value_at_null: Option<f64>,
    ess: Option<f64>,
    n_degenerate: Option<usize>,
    seed: u64,
    zero_cell_corrections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    region: Option<Vec<RegionPoint>>,
    /// Directions whose boundary search hit the expansion cap.
    #[serde(skip_serializing_if = "Option::is_none")]
    unbounded_directions: Option<usize>,
}

fn parse_pair(s: &str) -> Result<[f64; 2]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("'{s}' is not a pair of numbers")))?;
    match v.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(Error::InvalidInput(format!("'{s}' is not a pair of numbers"))),
    }
}

fn dta_fit(m: Method, data: &DtaData) -> Result<BivarFit> {
    match m {
        Method::Acr => reml_bivar(data),
        _ => fit_ml_bivar(data),
    }
}

pub fn dta(a: &DtaArgs) -> Result<String> {
    let c = &a.common;
    let m = method(&c.method, &[Method::Mc, Method::Acr], "diagnostic accuracy data")?;
    let input = read_dta(open_input(&c.input)?)?;
    let data = &input.data;
    let fit = dta_fit(m, data)?;
    let mut out = DtaOutput {
        method: m,
        estimate: fit.mu,
        tau2: [fit.nuisance.sigma_a2, fit.nuisance.sigma_b2],
        rho: fit.nuisance.rho,
        p_value_at_null: None,
        ess: None,
        n_degenerate: None,
        seed: c.seed,
        zero_cell_corrections: input.zero_cell_corrections,
        region: None,
        unbounded_directions: None,
    };
    if m == Method::Mc {
        let at = match &a.null {
            Some(s) => parse_pair(s)?,
            None => fit.mu,
        };
        let p = p_value_bivar(data, at, c.b, c.seed)?;
        if a.null.is_some() {
            out.p_value_at_null = Some(p.p);
        }
        out.ess = Some(p.ess);
        out.n_degenerate = Some(p.n_degenerate);
    } else if a.null.is_some() {
        return Err(Error::InvalidInput("--null needs --method mc".into()));
    }
    if a.region {
        let region = match m {
            Method::Mc => confidence_region(data, c.alpha, a.m, c.b, c.seed)?,
            _ => approx_region(data, c.alpha, a.m)?,
        };
        out.unbounded_directions = Some(region.unbounded_angles.len());
        out.region = Some(region.roc_points().into_iter().map(RegionPoint::from).collect());
    }
    match c.format {
        Format::Json => to_json(&out),
        Format::Csv => match &out.region {
            Some(points) => to_csv(points),
            None => {
                #[derive(Serialize)]
                struct Row {
                    method: &'static str,
                    #[serde(rename = "muA")]
                    mu_a: f64,
                    #[serde(rename = "muB")]
                    mu_b: f64,
                    tau2_a: f64,
                    tau2_b: f64,
                    rho: f64,
                    p_value_at_null: String,
                    ess: String,
                    n_degenerate: String,
                    seed: u64,
                }
                to_csv(&[Row {
                    method: out.method.label(),
                    mu_a: out.estimate[0],
                    mu_b: out.estimate[1],
                    tau2_a: out.tau2[0],
                    tau2_b: out.tau2[1],
                    rho: out.rho,
                    p_value_at_null: opt(out.p_value_at_null),
                    ess: opt(out.ess),
                    n_degenerate: out.n_degenerate.map(|n| n.to_string()).unwrap_or_default(),
                    seed: out.seed,
                }])
            }
        },
    }
}

#[derive(Debug, Serialize)]
struct NmaRow {
    label: String,
    contrast: Vec<f64>,
    #[serde(flatten)]
    interval: IntervalOutput,
}

#[derive(Debug, Serialize)]
struct NmaOutput {
    method: Method,
    seed: u64,
    treatments: usize,
    zero_cell_corrections: usize,
    augmented_studies: usize,
    results: Vec<NmaRow>,
}

fn parse_contrast(s: &str, p: usize) -> Result<Vec<f64>> {
    let c: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("contrast '{s}' is not a list of numbers")))?;
    if c.len() != p {
        return Err(Error::InvalidInput(format!(
            "contrast has {} coefficients but the network has {p} non-reference treatments",
            c.len()
        )));
    }
    Ok(c)
}

fn contrast_label(c: &[f64]) -> String {
    let nonzero: Vec<(usize, f64)> = c.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
    if let [(j, v)] = nonzero.as_slice() {
        if *v == 1.0 {
            return format!("treatment {}", j + 1);
        }
    }
    c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn nma_interval(
    m: Method,
    model: &NetworkModel,
    c: &[f64],
    a: &NmaArgs,
) -> Result<IntervalOutput> {
    let k = &a.common;
    let mut out = match m {
        Method::Mc => {
            let fit = fit_ml_net(&contrast_transform(model, c)?)?;
            let ci = ci_contrast(model, c, k.alpha, k.b, k.seed)?;
            let diag = Diagnostics::from(&p_value_contrast(model, c, fit.beta[0], k.b, k.seed)?);
            IntervalOutput {
                method: m,
                estimate: fit.beta[0],
                lower: ci.lower,
                upper: ci.upper,
                p_value_at_null: None,
                tau2: fit.tau2,
                ess: diag.ess,
                n_degenerate: diag.n_degenerate,
                seed: k.seed,
            }
        }
        Method::Reml => {
            let t = contrast_transform(model, c)?;
            comparator_output(reml_wald_net(&t, k.alpha)?[0], k.seed)
        }
        Method::Lr => comparator_output(lr_interval_net(model, c, k.alpha)?, k.seed),
        _ => unreachable!("rejected by the caller"),
    };
    if let Some(eta0) = a.null {
        if m != Method::Mc {
            return Err(Error::InvalidInput("--null needs --method mc".into()));
        }
        let p = p_value_contrast(model, c, eta0, k.b, k.seed)?;
        out.p_value_at_null = Some(p.p);
        out.ess = Some(p.ess);
        out.n_degenerate = Some(p.n_degenerate);
    }
    Ok(out)
}

pub fn nma(a: &NmaArgs) -> Result<String> {
    let c = &a.common;
    let m = method(&c.method, &[Method::Mc, Method::Reml, Method::Lr], "network data")?;
    let (studies, zero_cells, augmented) = match read_network(open_input(&c.input)?)? {
        NetworkInput::Arms(arms) => {
            let asm = contrasts_from_arms(&arms, a.augment)?;
            (asm.studies, asm.zero_cell_corrections, asm.augmented)
        }
        NetworkInput::Contrasts(s) => (s, 0, 0),
    };
    let p = studies
        .iter()
        .flat_map(|s| s.treatments.iter().copied())
        .max()
        .unwrap_or(0);
    let model = NetworkModel::new(studies, p)?;
    let contrasts: Vec<Vec<f64>> = match &a.contrast {
        Some(s) => vec![parse_contrast(s, p)?],
        None => (0..p)
            .map(|j| (0..p).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
    };
    let results = contrasts
        .into_iter()
        .map(|cv| {
            Ok(NmaRow {
                label: contrast_label(&cv),
                interval: nma_interval(m, &model, &cv, a)?,
                contrast: cv,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = NmaOutput {
        method: m,
        seed: c.seed,
        treatments: p,
        zero_cell_corrections: zero_cells,
        augmented_studies: augmented,
        results,
    };
    match c.format {
        Format::Json => to_json(&out),
        Format::Csv => {
            let rows: Vec<IntervalRow> = out
                .results
                .iter()
                .map(|r| IntervalRow {
                    label: Some(r.label.clone()),
                    ..r.interval.row()
                })
                .collect();
            to_csv(&rows)
        }
    }
}

#[derive(Debug, Serialize)]
struct CoverageRow {
    experiment: Experiment,
    k: usize,
    tau2: f64,
    rho: f64,
    method: &'static str,
    parameter: usize,
    coverage: f64,
    mc_se: f64,
    average_length: String,
    failures: usize,
    replications: usize,
    replicates: usize,
    seed: u64,
}

fn coverage_rows(r: &ExperimentReport) -> Vec<CoverageRow> {
    let mut rows = Vec::new();
    for m in &r.methods {
        for (j, (&cov, &se)) in m.coverage.iter().zip(&m.mc_se).enumerate() {
            rows.push(CoverageRow {
                experiment: r.experiment,
                k: r.cell.k,
                tau2: r.cell.tau2,
                rho: r.cell.rho,
                method: m.method.label(),
                parameter: j + 1,
                coverage: cov,
                mc_se: se,
                average_length: m
                    .average_length
                    .as_ref()
                    .map(|l| l[j].to_string())
                    .unwrap_or_default(),
                failures: m.failures,
                replications: r.replications,
                replicates: r.replicates,
                seed: r.seed,
            });
        }
    }
    rows
}

pub fn simulate(a: &SimArgs) -> Result<String> {
    let experiment: Experiment = a.experiment.parse()?;
    let cells = match &a.cell {
        Some(s) => vec![Cell::parse(experiment, s)?],
        None => experiment.grid(),
    };
    let methods = match &a.method {
        Some(s) => s.split(',').map(str::parse).collect::<Result<Vec<Method>>>()?,
        None => experiment.methods(),
    };
    let mut reports = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut config = CoverageConfig::new(experiment, cell, a.seed);
        config.methods = methods.clone();
        config.alpha = a.alpha;
        if let Some(r) = a.r {
            config.replications = r;
        }
        if let Some(b) = a.b {
            config.replicates = b;
        }
        if a.p_value_only {
            config.mc_lengths = false;
        }
        let report = run_coverage(&config)?;
        eprintln!("{} {}: {:.1}s", a.experiment, cell, report.wall_time);
        reports.push(report);
    }
    match a.format {
        Format::Json => to_json(&reports),
        Format::Csv => to_csv(&reports.iter().flat_map(coverage_rows).collect::<Vec<_>>()),
    }
}
