mod config;
mod report;
mod svg;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use clustersim::allocation::AcceptanceRule;
use clustersim::census::{self, CensusSpec, CensusSummary, CensusTable, Group, Village};
use clustersim::estimators::Method;
use clustersim::glmfit::{self, icc_from_tau2, standardize, ModelFrame, Response};
use clustersim::harness::{self, Grid};
use clustersim::nalgebra::DMatrix;
use clustersim::sensitivity::{self, AdjustmentVariant};
use clustersim::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "clustersim", version, about = "Simulation engine for constrained-randomization cluster trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic village census and print its summary.
    SynthCensus {
        /// Census spec (TOML); the built-in spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the baseline logistic model and the random-intercept GLMM.
    FitBaseline {
        #[arg(long)]
        census: PathBuf,
        /// Gauss-Hermite nodes for the GLMM.
        #[arg(long, default_value_t = glmfit::DEFAULT_QUADRATURE_NODES)]
        nodes: usize,
    },
    /// Run a simulation grid.
    Simulate(SimulateArgs),
    /// Build tables and figures from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Census file for the baseline histogram.
        #[arg(long)]
        census: Option<PathBuf>,
    },
    /// E-value and bias-adjusted estimate for an odds ratio.
    Evalue {
        #[arg(long = "or")]
        odds_ratio: f64,
        #[arg(long, requires = "rco")]
        rct: Option<f64>,
        #[arg(long, requires = "rct")]
        rco: Option<f64>,
        /// Use the unsquared bounding factor.
        #[arg(long)]
        unsquared: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Base case over the default n and effect sizes.
    Base,
    /// Base case, n = 50, null only, 200 replicates.
    Smoke,
    /// The full factorial grid.
    Full,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "census_spec")]
    census: Option<PathBuf>,
    #[arg(long)]
    census_spec: Option<PathBuf>,
    /// Output directory; reused directories resume.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, alias = "scenarios", value_enum)]
    scenario: Option<Preset>,
    #[arg(long, value_delimiter = ',')]
    delta: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pi0: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    coef_set: Vec<u8>,
    #[arg(long, value_delimiter = ',')]
    icc: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// Replicates per cell (null and power alike).
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "CLUSTERSIM_WORKERS")]
    workers: Option<usize>,
    /// Allocation draws per pool.
    #[arg(long)]
    pool_draws: Option<u64>,
    #[arg(long)]
    acceptance_rule: Option<AcceptanceRule>,
    /// Minimum pool size before the SMD threshold is relaxed (0 = never).
    #[arg(long)]
    min_pool_size: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthCensus { spec, seed, out } => synth_census(spec.as_deref(), seed, &out),
        Command::FitBaseline { census, nodes } => fit_baseline(&census, nodes),
        Command::Simulate(args) => simulate(args),
        Command::Report { results, out, census } => report_cmd(&results, &out, census.as_deref()),
        Command::Evalue { odds_ratio, rct, rco, unsquared } => evalue(odds_ratio, rct.zip(rco), unsquared),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse(_) | Error::Schema(_) | Error::Spec(_) | Error::Argument(_)) => 2,
        _ => 1,
    }
}

fn load_spec(path: Option<&Path>) -> anyhow::Result<CensusSpec> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(CensusSpec::from_toml(&text).with_context(|| format!("in {}", p.display()))?)
        }
        None => Ok(CensusSpec::default()),
    }
}

fn print_summary(summary: &CensusSummary) {
    println!("{:<34}{:>24}{:>24}", "", "Group 1 (control)", "Group 2 (intervention)");
    let cell = |g: Group, f: &dyn Fn(&census::GroupSummary) -> String| summary.group(g).map(f).unwrap_or_else(|| "-".into());
    let line = |label: &str, f: &dyn Fn(&census::GroupSummary) -> String| {
        println!("{label:<34}{:>24}{:>24}", cell(Group::Control, f), cell(Group::Intervention, f));
    };
    line("Villages", &|s| s.village_count.to_string());
    line("Distance to HF, km (mean, SD)", &|s| format!("{:.2} ({:.2})", s.distance_mean, s.distance_sd));
    line("Population (mean, SD)", &|s| format!("{:.0} ({:.0})", s.population_mean, s.population_sd));
    line("Children 12-24 mo (mean, SD)", &|s| format!("{:.1} ({:.1})", s.children_mean, s.children_sd));
    line("Penta0 rate (mean, SD)", &|s| format!("{:.3} ({:.3})", s.penta0_rate_mean, s.penta0_rate_sd));
    line("Penta0 rate (median, IQR)", &|s| format!("{:.3} ({:.3}-{:.3})", s.penta0_rate_median, s.penta0_rate_q1, s.penta0_rate_q3));
    line("Penta0 children / all children", &|s| format!("{}/{} ({:.3})", s.total_penta0, s.total_children, s.penta0_proportion));
}

fn synth_census(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> anyhow::Result<ExitCode> {
    let mut spec = load_spec(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let villages = census::synthesize_census(&spec)?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    census::write_census(&villages, &mut w)?;
    w.flush()?;
    println!("wrote {} villages to {} (seed {})", villages.len(), out.display(), spec.seed);
    print_summary(&census::summarize(&villages)?);
    println!(
        "note: children are drawn from log-population through a Gaussian copula (correlation {}), not as a fixed share of population",
        spec.log_population_children_correlation
    );
    Ok(ExitCode::SUCCESS)
}

fn load_villages(path: &Path) -> anyhow::Result<Vec<Village>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let raw = census::read_census(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    let imputed = census::impute_populations(&raw)?;
    let eligible = census::filter_eligible(&imputed);
    if eligible.len() < imputed.len() {
        log::info!("dropped {} villages with fewer than {} children", imputed.len() - eligible.len(), census::ELIGIBILITY_MIN_CHILDREN);
    }
    Ok(eligible)
}

/// Adds columns after the intercept one at a time, dropping any that is
/// linearly dependent on those already kept.
fn full_rank_columns(cols: &mut Vec<(String, Vec<f64>)>, n: usize) -> anyhow::Result<()> {
    let mut kept = vec![cols.remove(0)];
    for c in cols.drain(..) {
        kept.push(c);
        let x = DMatrix::from_fn(n, kept.len(), |i, j| kept[j].1[i]);
        let names: Vec<String> = kept.iter().map(|c| c.0.clone()).collect();
        match glmfit::linalg::check_full_rank(&x, &names) {
            Ok(()) => {}
            Err(Error::RankDeficient { .. }) => {
                let last = kept.len() - 1;
                println!("dropping column: {}", Error::RankDeficient { index: last, name: kept[last].0.clone() });
                kept.pop();
            }
            Err(e) => return Err(e.into()),
        }
    }
    *cols = kept;
    Ok(())
}

fn fit_baseline(path: &Path, nodes: usize) -> anyhow::Result<ExitCode> {
    let villages = load_villages(path)?;
    let n = villages.len();
    if n == 0 {
        bail!(Error::Argument("census has no eligible villages".into()));
    }
    let response = Response::Counts {
        successes: villages.iter().map(|v| v.penta0_count).collect(),
        trials: villages.iter().map(|v| v.children_12_24).collect(),
    };
    let pop: Vec<f64> = villages.iter().map(|v| v.population.unwrap_or(f64::NAN)).collect();
    let dist: Vec<f64> = villages.iter().map(|v| v.distance_km).collect();
    let mut cols = vec![("intercept".to_string(), vec![1.0; n]), ("population".to_string(), pop), ("distance_km".to_string(), dist)];
    full_rank_columns(&mut cols, n)?;
    let names: Vec<String> = cols.iter().map(|c| c.0.clone()).collect();
    let mut failed = false;

    println!("Baseline logistic regression of Penta0 on village covariates ({n} villages)");
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j].1[i]);
    match ModelFrame::new(response.clone(), x, names.clone()).and_then(|f| glmfit::fit_binomial_logistic(&f)) {
        Ok(fit) => {
            let se = fit.std_errors();
            let z = harness::Z_95;
            println!("{:<14}{:>14}{:>14}{:>14}{:>14}", "term", "estimate", "std error", "lower 95%", "upper 95%");
            for (j, name) in names.iter().enumerate() {
                let b = fit.coefficients[j];
                println!("{name:<14}{b:>14.6}{:>14.6}{:>14.6}{:>14.6}", se[j], b - z * se[j], b + z * se[j]);
            }
            if !fit.converged {
                println!("warning: IRLS did not converge");
            }
            println!();
            println!("Coefficient sets for the simulation grid");
            println!("{:<26}{:>14}{:>14}", "set", "population", "distance_km");
            let coef = |name: &str, k: f64| {
                names.iter().position(|c| c == name).map(|j| format!("{:.6}", fit.coefficients[j] + k * z * se[j])).unwrap_or_else(|| "dropped".into())
            };
            for (label, k) in [("1 (point estimate)", 0.0), ("2 (lower 95% limit)", -1.0), ("3 (upper 95% limit)", 1.0)] {
                println!("{label:<26}{:>14}{:>14}", coef("population", k), coef("distance_km", k));
            }
        }
        Err(e) => {
            println!("logistic fit failed: {e}");
            failed = true;
        }
    }

    println!();
    println!("Random-intercept logistic model (standardized covariates, {nodes}-node adaptive quadrature)");
    let glmm = (|| -> Result<_, Error> {
        let mut z_cols = vec![vec![1.0; n]];
        for c in cols.iter().skip(1) {
            z_cols.push(standardize(&c.1)?);
        }
        let x = DMatrix::from_fn(n, z_cols.len(), |i, j| z_cols[j][i]);
        let frame = ModelFrame::new(response.clone(), x, names.clone())?;
        glmfit::fit_glmm_random_intercept(&frame, nodes)
    })();
    match glmm {
        Ok(fit) => {
            let tau2 = fit.tau2.unwrap_or(0.0);
            for (j, name) in names.iter().enumerate() {
                println!("{name:<14}{:>14.6}", fit.coefficients[j]);
            }
            println!("tau2 {tau2:.6}{}", if fit.tau2_at_boundary { " (at boundary)" } else { "" });
            println!("ICC {:.6}", icc_from_tau2(tau2)?);
            if !fit.converged {
                println!("warning: GLMM optimizer did not converge");
            }
        }
        Err(e) => {
            println!("GLMM fit failed: {e}");
            failed = true;
        }
    }
    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn simulate(a: SimulateArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if a.census.is_some() || a.census_spec.is_some() {
        cfg.census.path = a.census.clone();
        cfg.census.spec = a.census_spec.clone();
    }
    if let Some(p) = a.out.clone() {
        cfg.output_dir = Some(p);
    }
    if let Some(w) = a.workers {
        cfg.workers = Some(w);
    }
    cfg.check_paths()?;

    match a.scenario {
        Some(Preset::Full) => cfg.grid = Grid::default(),
        Some(Preset::Base) => {
            let d = Grid::default();
            cfg.grid = Grid::base_case(d.n, d.delta_r);
        }
        Some(Preset::Smoke) => {
            cfg.grid = Grid::base_case(vec![50], vec![0.0]);
            cfg.grid.reps_null = 200;
            cfg.grid.reps_power = 200;
        }
        None => {}
    }
    let g = &mut cfg.grid;
    let set = |dst: &mut Vec<f64>, src: &[f64]| {
        if !src.is_empty() {
            *dst = src.to_vec();
        }
    };
    set(&mut g.delta_r, &a.delta);
    set(&mut g.pi0, &a.pi0);
    set(&mut g.icc, &a.icc);
    if !a.n.is_empty() {
        g.n = a.n.clone();
    }
    if !a.coef_set.is_empty() {
        g.coef_set = a.coef_set.clone();
    }
    if !a.methods.is_empty() {
        g.methods = a.methods.clone();
    }
    if let Some(r) = a.reps {
        g.reps_null = r;
        g.reps_power = r;
    }
    let s = &mut cfg.settings;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(d) = a.pool_draws {
        s.pool.max_draws = d;
    }
    if let Some(r) = a.acceptance_rule {
        s.pool.acceptance_rule = r;
    }
    if let Some(m) = a.min_pool_size {
        s.pool.min_pool_size = m;
    }
    cfg.grid.validate()?;

    let villages = match (&cfg.census.path, &cfg.census.spec) {
        (Some(p), _) => load_villages(p)?,
        (None, spec) => census::filter_eligible(&census::synthesize_census(&load_spec(spec.as_deref())?)?),
    };
    let table = CensusTable::new(&villages)?;
    let out = cfg.output_dir.clone();
    if let Some(d) = &out {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        if w == 0 {
            bail!(Error::Argument("workers must be at least 1".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build()?;
    let outcome = pool.install(|| harness::run_grid(&cfg.grid, &table, &cfg.settings, out.as_deref()))?;

    println!("{:<40}{:<14}{:>8}{:>28}", "scenario", "method", "reps", "rejection rate (95% CI)");
    for c in &outcome.cells {
        println!("{:<40}{:<14}{:>8}{:>28}", c.scenario_id, c.method.as_str(), c.n_rep, format!("{:.4} ({:.4}, {:.4})", c.rejection_rate, c.ci_low, c.ci_high));
    }
    for p in &outcome.manifest.pools {
        println!("pool {p}");
    }
    if outcome.resumed_cells > 0 {
        println!("{} cells resumed from earlier output", outcome.resumed_cells);
    }
    if out.is_none() {
        let stdout = std::io::stdout();
        harness::write_results(&outcome.cells, stdout.lock())?;
    }
    if outcome.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &outcome.failures {
        eprintln!("failed: {} {}: {}", f.scenario_id, f.method.map(|m| m.as_str()).unwrap_or("*"), f.message);
    }
    eprintln!("{} of {} cells failed", outcome.failures.len(), outcome.failures.len() + outcome.cells.len());
    Ok(ExitCode::from(if outcome.cells.is_empty() { 3 } else { 1 }))
}

fn report_cmd(results: &Path, out: &Path, census: Option<&Path>) -> anyhow::Result<ExitCode> {
    let f = File::open(results).with_context(|| format!("opening {}", results.display()))?;
    let rows = harness::read_results(BufReader::new(f)).with_context(|| format!("reading {}", results.display()))?;
    let villages = census.map(load_villages).transpose()?;
    for p in report::write_report(&rows, villages.as_deref(), out)? {
        println!("wrote {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn evalue(or_hat: f64, ratios: Option<(f64, f64)>, unsquared: bool) -> anyhow::Result<ExitCode> {
    let r = sensitivity::evalue_from_or(or_hat)?;
    println!("odds ratio {}", r.input_or);
    println!("E-value {:.6}", r.evalue);
    if let Some((rct, rco)) = ratios {
        let variant = if unsquared { AdjustmentVariant::Unsquared } else { AdjustmentVariant::Squared };
        let adj = sensitivity::bias_adjusted_estimate_with(or_hat, rct, rco, variant)?;
        println!("adjustment factor {:.6} ({} bounding factor)", adj.factor, adj.variant.as_str());
        println!("adjusted estimate {:.6}", adj.adjusted);
    }
    Ok(ExitCode::SUCCESS)
}
