//! Command-line frontend: interval estimation for univariate, diagnostic
//! accuracy and network meta-analyses, and the coverage simulations.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use exactmeta::Error;

#[derive(Parser, Debug)]
#[command(name = "exactmeta", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Univariate random-effects meta-analysis (CSV columns y,variance).
    Uni(UniArgs),
    /// Bivariate meta-analysis of diagnostic accuracy (tp,fp,fn,tn or yA,yB,vA,vB).
    Dta(DtaArgs),
    /// Contrast-based network meta-analysis (study,treatment,events,n or study,treatments,y,S).
    Nma(NmaArgs),
    /// Coverage experiments.
    Simulate(SimArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Input CSV; `-` reads standard input.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Monte Carlo replicates per p-value.
    #[arg(long = "B", default_value_t = 1000)]
    pub b: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// mc, dl, reml, knha, lr or acr.
    #[arg(long, default_value = "mc")]
    pub method: String,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct UniArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also report the p-value of H0: mu = NULL.
    #[arg(long)]
    pub null: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DtaArgs {
    #[command(flatten)]
    pub common: Common,
    /// Compute the confidence region boundary.
    #[arg(long)]
    pub region: bool,
    /// Number of boundary directions.
    #[arg(long = "M", default_value_t = 200)]
    pub m: usize,
    /// Also report the p-value of H0: (muA, muB) = NULL, given as "a,b".
    #[arg(long)]
    pub null: Option<String>,
}

#[derive(Args, Debug)]
pub struct NmaArgs {
    #[command(flatten)]
    pub common: Common,
    /// Contrast coefficients "c1,c2,...,cp"; every treatment effect when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub contrast: Option<String>,
    /// Add a pseudo reference arm to studies that lack one.
    #[arg(long)]
    pub augment: bool,
    /// Also report the p-value of H0: contrast = NULL.
    #[arg(long, allow_hyphen_values = true)]
    pub null: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    /// table1, table2 or table3.
    #[arg(long)]
    pub experiment: String,
    /// Grid cell such as "k=3,tau2=0.10" or "k=8,tau=0.2"; the whole grid when absent.
    #[arg(long)]
    pub cell: Option<String>,
    /// Simulated datasets per cell.
    #[arg(long = "R")]
    pub r: Option<usize>,
    /// Monte Carlo replicates per p-value.
    #[arg(long = "B")]
    pub b: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Comma-separated methods; the experiment's full set when absent.
    #[arg(long)]
    pub method: Option<String>,
    /// Skip Monte Carlo interval inversion (no average lengths).
    #[arg(long)]
    pub p_value_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("EXACTMETA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidInput(format!("EXACTMETA_THREADS='{v}' is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    Ok(())
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    let (text, out) = match &cli.command {
        Command::Uni(a) => (commands::uni(a)?, &a.common.out),
        Command::Dta(a) => (commands::dta(a)?, &a.common.out),
        Command::Nma(a) => (commands::nma(a)?, &a.common.out),
        Command::Simulate(a) => (commands::simulate(a)?, &a.out),
    };
    emit(out, &text)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
