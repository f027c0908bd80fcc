//! Command implementations behind the `riskstop` binary.
//!
//! Each command reads a JSON config (unknown fields rejected), writes CSV
//! and JSON files into the output directory and returns the lines it
//! prints. Exit codes: 0 success, 2 config error, 3 numerical failure.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::amput::{self, GridSpec};
use crate::error::{Error, Result};
use crate::lab::{self, LabConfig};
use crate::lattice::{self, discretize, DiscretizationMode, ModelSpec, PathSource};
use crate::risk::RiskSpec;
use crate::sddp::{self, OuterLoopConfig, PayoffKind, SddpConfig, StoppingProblem};

#[derive(Debug, Parser)]
#[command(name = "riskstop", version, about = "Risk-averse optimal stopping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Price an American put on a state grid and extract exercise regions.
    Price(RunArgs),
    /// Solve an arithmetic or basket stopping problem by cutting planes.
    Sddp(RunArgs),
    /// Run the randomized property suite on finite trees.
    Lab(RunArgs),
    /// Sample scenario paths.
    Simulate(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

fn default_n() -> usize {
    100
}

fn default_mode() -> DiscretizationMode {
    DiscretizationMode::MonteCarlo
}

/// How the increments are discretized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    #[serde(default = "default_mode")]
    pub mode: DiscretizationMode,
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            n: default_n(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceConfig {
    pub model: ModelSpec,
    /// One value table and region file per entry.
    pub risks: Vec<RiskSpec>,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_scenarios() -> usize {
    2000
}

fn default_bins() -> usize {
    40
}

/// Concave objective `(1 - lambda) E(Z) - lambda AVaR_alpha(-Z)` solved by reweighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcaveConfig {
    pub lambda: f64,
    pub alpha: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_max_outer() -> usize {
    OuterLoopConfig::default().max_outer
}

fn default_tolerance() -> f64 {
    OuterLoopConfig::default().tolerance
}

fn default_solver() -> SddpConfig {
    SddpConfig::new(1, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SddpRunConfig {
    pub model: ModelSpec,
    /// Required unless `concave` is given.
    #[serde(default)]
    pub risk: Option<RiskSpec>,
    #[serde(rename = "N", default = "default_n")]
    pub n: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_upper_cadence")]
    pub upper_cadence: usize,
    #[serde(default = "default_forward_paths")]
    pub forward_paths: usize,
    #[serde(default = "default_upper_points")]
    pub upper_points: usize,
    #[serde(default = "default_true")]
    pub audit: bool,
    #[serde(default)]
    pub record_timing: bool,
    /// Defaults to the put for arithmetic walks and the call for baskets.
    #[serde(default)]
    pub payoff: Option<PayoffKind>,
    /// Policy evaluation paths per law (also the frequency sample of the concave loop).
    #[serde(default = "default_scenarios")]
    pub scenarios: usize,
    #[serde(default = "default_bins")]
    pub profit_bins: usize,
    #[serde(default)]
    pub concave: Option<ConcaveConfig>,
}

fn default_upper_cadence() -> usize {
    default_solver().upper_cadence
}

fn default_forward_paths() -> usize {
    default_solver().forward_paths
}

fn default_upper_points() -> usize {
    default_solver().upper_points
}

fn default_true() -> bool {
    true
}

impl SddpRunConfig {
    pub fn solver(&self) -> SddpConfig {
        SddpConfig {
            iterations: self.iterations,
            forward_paths: self.forward_paths,
            seed: self.seed,
            upper_cadence: self.upper_cadence,
            upper_points: self.upper_points,
            audit: self.audit,
            record_timing: self.record_timing,
        }
    }
}

fn default_paths() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: ModelSpec,
    /// Sample from this discretization instead of the true law.
    #[serde(default)]
    pub discretization: Option<DiscretizationConfig>,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::InvalidArgument(format!("{}: {e}", path.display()))
    })
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(out, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PriceSummary<'a> {
    seed: u64,
    risks: &'a [RiskSpec],
    root_values: Vec<f64>,
}

/// Grid pricing for each risk spec: `values_{i}.csv`, `regions_{i}.csv`, `price.json`.
pub fn cmd_price(config: &PriceConfig, out: &Path) -> Result<Vec<String>> {
    if config.risks.is_empty() {
        return Err(Error::InvalidArgument("risks must not be empty".into()));
    }
    let disc = discretize(&config.model, config.discretization.n, config.seed, config.discretization.mode)?;
    let mut lines = vec![format!("seed: {}", config.seed)];
    let mut roots = Vec::new();
    for (i, spec) in config.risks.iter().enumerate() {
        let values = amput::price_put(&config.model, &disc, spec, &config.grid)?;
        amput::write_values_csv(&values, create(out, &format!("values_{i}.csv"))?)?;
        amput::write_regions_csv(&amput::extract_regions(&values), create(out, &format!("regions_{i}.csv"))?)?;
        let root = amput::root_value(&values);
        lines.push(format!("risk {i} {}: root value {root}", serde_json::to_string(spec)?));
        roots.push(root);
    }
    write_json(
        out,
        "price.json",
        &PriceSummary {
            seed: config.seed,
            risks: &config.risks,
            root_values: roots,
        },
    )?;
    Ok(lines)
}

#[derive(Debug, Serialize)]
struct SddpSummary {
    seed: u64,
    lower: f64,
    upper: Option<f64>,
    gap: Option<f64>,
    audit: Option<sddp::AuditReport>,
    empirical_mean_profit: f64,
    true_mean_profit: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    concave_status: Option<sddp::LoopStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    concave_history: Option<Vec<sddp::OuterIterate>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_probabilities: Option<Vec<Vec<f64>>>,
}

fn mean_profit(o: &[sddp::PolicyOutcome]) -> f64 {
    o.iter().map(|x| x.profit).sum::<f64>() / o.len().max(1) as f64
}

/// Cutting-plane solve (or the concave reweighting loop), then policy
/// evaluation on empirical-law and true-law scenarios.
pub fn cmd_sddp(config: &SddpRunConfig, out: &Path) -> Result<Vec<String>> {
    let problem = StoppingProblem::new(&config.model, config.payoff)?;
    let seed = config.seed;
    let solver = config.solver();
    let disc = discretize(&config.model, config.n, seed, DiscretizationMode::MonteCarlo)?;
    let mut lines = vec![format!("seed: {seed}")];
    let (solution, law, status, history) = match (&config.concave, &config.risk) {
        (Some(c), _) => {
            let outer = OuterLoopConfig {
                max_outer: c.max_outer,
                sample_paths: config.scenarios,
                tolerance: c.tolerance,
                seed,
            };
            let r = sddp::concave_outer_loop(&problem, c.lambda, c.alpha, &disc, &solver, &outer)?;
            lines.push(format!("concave loop: {:?} after {} iterations", r.status, r.history.len()));
            (r.solution, r.disc, Some(r.status), Some(r.history))
        }
        (None, Some(spec)) => (sddp::solve(&problem, spec, &disc, &solver)?, disc.clone(), None, None),
        (None, None) => return Err(Error::InvalidArgument("risk or concave must be given".into())),
    };
    sddp::write_trace_csv(&solution.trace, create(out, "trace.csv")?)?;
    write_json(out, "cuts.json", &solution.approx.all_cuts())?;

    let empirical_paths = lattice::sample_paths(&config.model, PathSource::Discretization(&disc), config.scenarios, seed)?;
    let true_paths = lattice::sample_paths(&config.model, PathSource::TrueLaw, config.scenarios, seed)?;
    let empirical = sddp::simulate_policy(&problem, &solution.approx, &empirical_paths);
    let truth = sddp::simulate_policy(&problem, &solution.approx, &true_paths);

    let horizon = problem.horizon();
    let (he, ht) = (
        sddp::stopping_histogram(&empirical, horizon),
        sddp::stopping_histogram(&truth, horizon),
    );
    let mut w = csv::Writer::from_writer(create(out, "stopping_hist.csv")?);
    w.write_record(["stage", "empirical", "true"])?;
    for t in 0..=horizon {
        w.write_record([t.to_string(), he[t].to_string(), ht[t].to_string()])?;
    }
    w.flush()?;
    for (name, o) in [("profit_hist_empirical.csv", &empirical), ("profit_hist_true.csv", &truth)] {
        let mut w = csv::Writer::from_writer(create(out, name)?);
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (lo, hi, c) in sddp::profit_histogram(o, config.profit_bins) {
            w.write_record([lo.to_string(), hi.to_string(), c.to_string()])?;
        }
        w.flush()?;
    }

    let summary = SddpSummary {
        seed,
        lower: solution.lower_bound(),
        upper: solution.upper_bound,
        gap: solution.gap(),
        audit: solution.audit.clone(),
        empirical_mean_profit: mean_profit(&empirical),
        true_mean_profit: mean_profit(&truth),
        concave_status: status,
        concave_history: history,
        final_probabilities: status.map(|_| law.laws.iter().map(|l| l.probs.clone()).collect()),
    };
    lines.push(format!("lower bound: {}", summary.lower));
    if let Some(u) = summary.upper {
        lines.push(format!("upper bound: {u}"));
        lines.push(format!("relative gap: {}", summary.gap.unwrap_or(f64::NAN)));
    }
    if let Some(a) = &summary.audit {
        lines.push(format!("cut audit: {} checks, {} violations", a.checked, a.violations));
    }
    lines.push(format!(
        "mean profit: empirical {}, true {}",
        summary.empirical_mean_profit, summary.true_mean_profit
    ));
    write_json(out, "report.json", &summary)?;
    Ok(lines)
}

/// Property suite; a property failing as predicted is not an error.
pub fn cmd_lab(config: &LabConfig, out: &Path) -> Result<Vec<String>> {
    let reports = lab::run_lab_suite(config)?;
    let mut lines = vec![format!("seed: {}", config.seed)];
    for r in &reports {
        let verdict = if r.holds { "PASS" } else { "FAIL" };
        let note = if r.as_expected() { "as predicted" } else { "UNEXPECTED" };
        lines.push(format!("{verdict} {} ({} trials, {note})", r.property, r.trials));
    }
    write_json(out, "report.json", &reports)?;
    Ok(lines)
}

/// Writes `paths.csv`.
pub fn cmd_simulate(config: &SimulateConfig, out: &Path) -> Result<Vec<String>> {
    let paths = match &config.discretization {
        Some(d) => {
            let disc = discretize(&config.model, d.n, config.seed, d.mode)?;
            lattice::sample_paths(&config.model, PathSource::Discretization(&disc), config.paths, config.seed)?
        }
        None => lattice::sample_paths(&config.model, PathSource::TrueLaw, config.paths, config.seed)?,
    };
    lattice::write_paths_csv(&paths, create(out, "paths.csv")?)?;
    Ok(vec![
        format!("seed: {}", config.seed),
        format!("wrote {} paths", paths.len()),
    ])
}

/// Parses the config of `command`, applies `--seed`, runs it.
pub fn run(command: &Command) -> Result<Vec<String>> {
    let args = match command {
        Command::Price(a) | Command::Sddp(a) | Command::Lab(a) | Command::Simulate(a) => a,
    };
    fs::create_dir_all(&args.out)?;
    let work = || -> Result<Vec<String>> {
        match command {
            Command::Price(a) => {
                let mut c: PriceConfig = read_config(&a.config)?;
                c.seed = a.seed.unwrap_or(c.seed);
                cmd_price(&c, &a.out)
            }
            Command::Sddp(a) => {
                let mut c: SddpRunConfig = read_config(&a.config)?;
                c.seed = a.seed.unwrap_or(c.seed);
                cmd_sddp(&c, &a.out)
            }
            Command::Lab(a) => {
                let mut c: LabConfig = read_config(&a.config)?;
                c.seed = a.seed.unwrap_or(c.seed);
                cmd_lab(&c, &a.out)
            }
            Command::Simulate(a) => {
                let mut c: SimulateConfig = read_config(&a.config)?;
                c.seed = a.seed.unwrap_or(c.seed);
                cmd_simulate(&c, &a.out)
            }
        }
    };
    match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    }
}

/// Runs the parsed command line, printing results or the error; returns the exit status.
pub fn main_with(cli: Cli) -> i32 {
    match run(&cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
