//! Command-line front end.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::canonical::{identity_report, transform, Design, IdentityReport};
use crate::error::{Error, Result};
use crate::model::{group, GroupedData, StudySet, DEFAULT_GROUPING_TOLERANCE};
use crate::mu::{estimate_mu, estimate_mu_grouped, MuEstimate, WeightRule};
use crate::risk::{self, log_grid, EqualRule};
use crate::tau::{estimate_tau, i_squared, TauEstimate, TauMethod};

#[derive(Debug, Parser)]
#[command(name = "remeta", version, about = "Random-effects meta-analysis: estimators and R-risk")]
pub struct Cli {
    /// Worker threads for Monte Carlo (default: all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate τ² and μ from a CSV of studies
    Analyze(AnalyzeArgs),
    /// Dump the canonical transform and identity residuals
    Canonical(CanonicalArgs),
    /// R-risk curve of a rule over a τ² grid
    RiskCurve(RiskCurveArgs),
    /// Equal-uncertainty risk curves for n = 5 and n = 15
    Figure1(Figure1Args),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// CSV with columns effect,std_error[,group_id]
    #[arg(long)]
    pub input: PathBuf,
    /// Comma separated τ² methods
    #[arg(long, default_value = "dl,hedges,mp,reml")]
    pub tau_method: String,
    /// Comma separated μ rules (default adds shrinkage rules when n > 3)
    #[arg(long)]
    pub mu_method: Option<String>,
    /// Relative tolerance for pooling equal variances
    #[arg(long, default_value_t = DEFAULT_GROUPING_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CanonicalArgs {
    #[arg(long, conflicts_with = "design", required_unless_present = "design")]
    pub input: Option<PathBuf>,
    /// Inline design, e.g. `s2=1:2:4,nu=1:1:2`
    #[arg(long)]
    pub design: Option<String>,
    /// τ² at which the τ²-dependent identities are checked (default: mean variance)
    #[arg(long)]
    pub tau2: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_GROUPING_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RiskCurveArgs {
    /// Inline design, e.g. `s2=1:2:4,nu=1:1:2`
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub design: Option<String>,
    /// Take the design (variances and multiplicities) from a study CSV
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Weight rule, e.g. `delta1`, `dl`, `mh`, `bayes`, `stein:q=unit,r=inv,alpha=2`
    #[arg(long)]
    pub rule: String,
    /// `default`, `log:LO:HI:COUNT` (multiples of the mean variance, plus 0) or `v1,v2,...`
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Monte Carlo draws per grid point
    #[arg(long, env = "REMETA_SAMPLES", default_value_t = risk::DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Seed for the Monte Carlo streams
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct Figure1Args {
    /// Directory for figure1_n5.csv and figure1_n15.csv
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// `default` or `log:LO:HI:COUNT` / `v1,v2,...` in units of s² = 1
    #[arg(long, default_value = "0,0.01:50:200")]
    pub grid: String,
}

/// Parses `s2=1:2:4,nu=1:1:2`; `nu` defaults to all ones.
pub fn parse_design(text: &str) -> Result<Design> {
    let mut s2: Option<Vec<f64>> = None;
    let mut nu: Option<Vec<usize>> = None;
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("design expects key=value, got `{part}`")))?;
        let list = |v: &str| v.split(':').map(|x| x.trim().to_string()).collect::<Vec<_>>();
        match k.trim() {
            "s2" => {
                s2 = Some(
                    list(v)
                        .iter()
                        .map(|x| x.parse().map_err(|_| Error::InvalidInput(format!("bad variance `{x}`"))))
                        .collect::<Result<_>>()?,
                )
            }
            "nu" => {
                nu = Some(
                    list(v)
                        .iter()
                        .map(|x| x.parse().map_err(|_| Error::InvalidInput(format!("bad multiplicity `{x}`"))))
                        .collect::<Result<_>>()?,
                )
            }
            other => return Err(Error::InvalidInput(format!("unknown design key `{other}` (use s2, nu)"))),
        }
    }
    let s2 = s2.ok_or_else(|| Error::InvalidInput("design needs s2=...".into()))?;
    let nu = nu.unwrap_or_else(|| vec![1; s2.len()]);
    if s2.len() != nu.len() {
        return Err(Error::InvalidInput("s2 and nu lists differ in length".into()));
    }
    let mut pairs: Vec<(f64, usize)> = s2.into_iter().zip(nu).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (s2, nu): (Vec<f64>, Vec<usize>) = pairs.into_iter().unzip();
    Design::new(&s2, &nu)
}

/// Parses a τ² grid; `scale` multiplies the `log:` form and `default`.
pub fn parse_grid(text: &str, scale: f64) -> Result<Vec<f64>> {
    let text = text.trim();
    if text == "default" {
        return Ok(log_grid(scale, 1e-3, 1e3, 40));
    }
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let fields: Vec<&str> = part.strip_prefix("log:").unwrap_or(part).split(':').collect();
        if part.starts_with("log:") || fields.len() == 3 {
            if fields.len() != 3 {
                return Err(Error::InvalidInput(format!("log grid is log:LO:HI:COUNT, got `{part}`")));
            }
            let lo: f64 = fields[0].parse().map_err(|_| Error::InvalidInput(format!("bad grid lo `{}`", fields[0])))?;
            let hi: f64 = fields[1].parse().map_err(|_| Error::InvalidInput(format!("bad grid hi `{}`", fields[1])))?;
            let count: usize =
                fields[2].parse().map_err(|_| Error::InvalidInput(format!("bad grid count `{}`", fields[2])))?;
            if !(lo > 0.0 && hi > lo) || count == 0 {
                return Err(Error::InvalidInput(format!("log grid needs 0 < lo < hi, count > 0: `{part}`")));
            }
            out.extend(log_grid(scale, lo, hi, count).into_iter().skip(1));
        } else {
            let v: f64 = part.parse().map_err(|_| Error::InvalidInput(format!("bad grid value `{part}`")))?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("grid values must be >= 0, got {v}")));
            }
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput("empty grid".into()));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

fn split_list(text: &str) -> Vec<String> {
    // commas separate entries except inside a `stein:` / `moment:` option list
    let mut out: Vec<String> = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let continues = part.starts_with("q=") || part.starts_with("r=") || part.starts_with("alpha=");
        match out.last_mut() {
            Some(last) if continues && (last.starts_with("stein") || last.starts_with("moment")) => {
                last.push(',');
                last.push_str(part);
            }
            _ => out.push(part.to_string()),
        }
    }
    out
}

fn load_grouped(path: &Path, tolerance: f64) -> Result<GroupedData> {
    let set = StudySet::from_csv_path(path)?.with_tolerance(tolerance);
    group(&set)
}

#[derive(Debug, Serialize)]
struct GroupSummary<'a> {
    n: usize,
    p: usize,
    group_variances: &'a [f64],
    multiplicities: &'a [usize],
    group_means: &'a [f64],
    within_variances: &'a [f64],
    grand_mean: f64,
}

#[derive(Debug, Serialize)]
struct AnalyzeReport<'a> {
    grouped: GroupSummary<'a>,
    tau: Vec<TauEstimate>,
    mu: Vec<MuEstimate>,
    i_squared: Option<f64>,
    canonical_max_residual: Option<f64>,
    warnings: Vec<String>,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<String> {
    let g = load_grouped(&args.input, args.tolerance)?;
    let mut warnings = Vec::new();
    let summary = GroupSummary {
        n: g.n(),
        p: g.p(),
        group_variances: &g.group_variances,
        multiplicities: &g.multiplicities,
        group_means: &g.group_means,
        within_variances: &g.within_variances,
        grand_mean: g.grand_mean(),
    };
    let report = if g.p() == 1 {
        warnings.push("all studies share one reported variance: only the sample mean is available".into());
        AnalyzeReport {
            grouped: summary,
            tau: vec![],
            mu: vec![estimate_mu_grouped(&g, &WeightRule::SampleMean)?],
            i_squared: None,
            canonical_max_residual: None,
            warnings,
        }
    } else {
        let cf = transform(&g)?;
        let taus = split_list(&args.tau_method)
            .iter()
            .map(|m| m.parse::<TauMethod>().and_then(|m| estimate_tau(cf.sufficient(), &m)))
            .collect::<Result<Vec<_>>>()?;
        let rules = match &args.mu_method {
            Some(list) => split_list(list),
            None => {
                let mut v: Vec<String> = ["mean", "gd", "dl", "hedges", "mp", "reml"].map(String::from).to_vec();
                if g.n() > 3 {
                    v.extend(["delta1", "delta0", "mh"].map(String::from));
                }
                v
            }
        };
        let mus = rules
            .iter()
            .map(|r| r.parse::<WeightRule>().and_then(|r| estimate_mu(&cf, &r)))
            .collect::<Result<Vec<_>>>()?;
        let residual = identity_report(cf.design(), cf.design().mean_variance())
            .max()
            .max(cf.quadratic_form_identity_check(cf.design().mean_variance()));
        AnalyzeReport {
            grouped: summary,
            tau: taus,
            mu: mus,
            i_squared: Some(i_squared(cf.sufficient())),
            canonical_max_residual: Some(residual),
            warnings,
        }
    };
    match args.format {
        Format::Json => Ok(serde_json::to_string_pretty(&report).map_err(json_err)? + "\n"),
        Format::Csv => {
            let mut out = String::from("kind,method,value,raw_value\n");
            for t in &report.tau {
                out.push_str(&format!("tau2,{},{},{}\n", t.method, t.value, t.raw_value));
            }
            for m in &report.mu {
                out.push_str(&format!("mu,{},{},\n", m.rule, m.value));
            }
            Ok(out)
        }
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::InvalidInput(format!("json encoding failed: {e}"))
}

#[derive(Debug, Serialize)]
struct ResidualSummary {
    design: IdentityReport,
    quadratic_form: Option<f64>,
    representation: Option<f64>,
}

#[derive(Debug, Serialize)]
struct CanonicalReport<'a> {
    group_variances: &'a [f64],
    multiplicities: &'a [usize],
    t2: &'a [f64],
    b: &'a [f64],
    a: &'a [Vec<f64>],
    y: Option<&'a [f64]>,
    u2: Option<&'a [f64]>,
    residuals: ResidualSummary,
}

pub fn cmd_canonical(args: &CanonicalArgs) -> Result<String> {
    let grouped = match &args.input {
        Some(path) => Some(load_grouped(path, args.tolerance)?),
        None => None,
    };
    if let Some(g) = &grouped {
        if g.p() < 2 {
            return Err(Error::Unsupported("canonical form needs at least two distinct variances".into()));
        }
    }
    let cf = grouped.as_ref().map(transform).transpose()?;
    let design = match (&cf, &args.design) {
        (Some(cf), _) => cf.design().clone(),
        (None, Some(text)) => parse_design(text)?,
        (None, None) => return Err(Error::InvalidInput("need --input or --design".into())),
    };
    let tau2 = args.tau2.unwrap_or(design.mean_variance());
    let report = CanonicalReport {
        group_variances: design.group_variances(),
        multiplicities: design.multiplicities(),
        t2: design.t2(),
        b: design.b(),
        a: design.a(),
        y: cf.as_ref().map(|c| c.y()),
        u2: cf.as_ref().map(|c| c.u2()),
        residuals: ResidualSummary {
            design: identity_report(&design, tau2),
            quadratic_form: cf.as_ref().map(|c| c.quadratic_form_identity_check(tau2)),
            representation: cf.as_ref().map(|c| c.weighted_mean_decomposition(tau2).residual()),
        },
    };
    Ok(serde_json::to_string_pretty(&report).map_err(json_err)? + "\n")
}

pub fn cmd_risk_curve(args: &RiskCurveArgs) -> Result<String> {
    let design = match (&args.design, &args.input) {
        (Some(text), _) => parse_design(text)?,
        (None, Some(path)) => {
            let g = load_grouped(path, DEFAULT_GROUPING_TOLERANCE)?;
            Design::from_grouped(&g)?
        }
        (None, None) => return Err(Error::InvalidInput("need --design or --input".into())),
    };
    let rule: WeightRule = args.rule.parse()?;
    if rule.requires_n_above_3() && design.n() <= 3 {
        return Err(Error::InvalidForN { rule: rule.to_string(), n: design.n() });
    }
    let grid = parse_grid(&args.grid, design.mean_variance())?;
    let curve = risk::risk_curve(&design, &rule, &grid, args.samples, args.seed)?;
    match args.format {
        Format::Csv => {
            let mut buf = Vec::new();
            curve.write_csv(&mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::InvalidInput(e.to_string()))
        }
        Format::Json => Ok(serde_json::to_string_pretty(&curve).map_err(json_err)? + "\n"),
    }
}

/// Equal-uncertainty risks of DerSimonian–Laird, modified Hedges and `δ₁` at `s² = 1`.
pub fn figure1_table(n: usize, grid: &[f64]) -> Result<String> {
    let nf = n as f64;
    let bound = risk::minimax_bound(n)?;
    let mut out = String::from("tau2,dl,mh,delta1,minimax_bound\n");
    for &t in grid {
        let dl = risk::equal_uncertainty_rule_risk(n, 1.0, t, EqualRule::Plugin { c: nf - 1.0 })?;
        let mh = risk::equal_uncertainty_rule_risk(n, 1.0, t, EqualRule::Plugin { c: nf - 3.0 })?;
        let d1 = risk::equal_uncertainty_risk(n, 1.0, t, nf - 3.0)?;
        out.push_str(&format!("{t},{dl},{mh},{d1},{bound}\n"));
    }
    Ok(out)
}

pub fn cmd_figure1(args: &Figure1Args) -> Result<Vec<PathBuf>> {
    let grid = parse_grid(&args.grid, 1.0)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let mut written = Vec::new();
    for n in [5usize, 15] {
        let path = args.out_dir.join(format!("figure1_n{n}.csv"));
        std::fs::write(&path, figure1_table(n, &grid)?)?;
        written.push(path);
    }
    Ok(written)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path)?);
            f.write_all(text.as_bytes())?;
            f.flush()?;
        }
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => emit(&cmd_analyze(a)?, a.out.as_deref()),
        Command::Canonical(a) => emit(&cmd_canonical(a)?, a.out.as_deref()),
        Command::RiskCurve(a) => emit(&cmd_risk_curve(a)?, a.out.as_deref()),
        Command::Figure1(a) => {
            for p in cmd_figure1(a)? {
                eprintln!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::InvalidInput(format!("thread pool: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
