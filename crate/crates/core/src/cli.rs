//! Command-line experiment harness.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or suite failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use crate::comms::MAX_RANKS;
use crate::error::{Error, Result};
use crate::pf::PfConfig;
use crate::pmcmc::{run_pmcmc, write_chain, PmcmcConfig, PmcmcOutput};
use crate::smc2::{run_smc2_parallel, write_diagnostics, LKernel, PfTarget, Smc2Config, Smc2Output, Target};
use crate::ssm::{lg_model, simulate, simulate_sir, Dataset, InfectionRate, LinearGaussian, SirConfig, SirModel};
use crate::validate::{run_suite, Fault, ValidateOptions, SUITES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Parameter values used to simulate data when no `--data` is given.
pub const SIR_TRUE_THETA: [f64; 2] = [0.85, 0.2];
pub const LG_TRUE_THETA: [f64; 1] = [0.9];

#[derive(Debug, Parser)]
#[command(name = "smc2", version, about = "Parallel SMC² and particle-MCMC experiments", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset from the model at its reference parameters.
    Simulate(SimulateArgs),
    /// Run the SMC² sampler once.
    Smc2(RunArgs),
    /// Run the particle-MCMC baseline once.
    Pmcmc(RunArgs),
    /// Sweep (N, P) with repeats and write timing/accuracy reports.
    Benchmark(BenchmarkArgs),
    /// Write per-iteration estimate traces of both samplers.
    Convergence(RunArgs),
    /// Run the built-in oracle and invariant suites.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Sir,
    LinearGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// N=128, K=10, N_x=200, 5 repeats.
    Desk,
    /// N=1024, K=10, N_x=500, 10 repeats.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LKernelArg {
    Forward,
    Optimal,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "sir")]
    pub model: ModelKind,
    /// Use the per-susceptible Reed–Frost infection probability.
    #[arg(long)]
    pub reed_frost_standard: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Number of observations when simulating.
    #[arg(long)]
    pub t: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Dataset CSV; simulated from `--seed` when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub p: usize,
    /// Chain length for p-MCMC (default K·N).
    #[arg(long)]
    pub m: Option<usize>,
    /// Proposal covariance is `sigma_scale · I`.
    #[arg(long, default_value_t = 0.1)]
    pub sigma_scale: f64,
    #[arg(long, value_enum, default_value = "optimal")]
    pub lkernel: LKernelArg,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated population sizes.
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub nx: Option<usize>,
    /// Comma-separated rank counts.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub p: Vec<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_scale: f64,
    #[arg(long, value_enum, default_value = "optimal")]
    pub lkernel: LKernelArg,
    #[arg(long, value_enum, default_value = "desk")]
    pub profile: Profile,
    /// Also run p-MCMC with M = K·N for every N.
    #[arg(long)]
    pub with_pmcmc: bool,
    /// Per-repeat CSV; the aggregate goes next to it with an `_aggregate` suffix.
    #[arg(long, default_value = "benchmark.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    /// One of comms, choice, redistribution, pf, smc2, pmcmc, or all.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Corrupt an intermediate result to check that the suite notices.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Problem sizes after applying the profile and explicit flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub reed_frost_standard: bool,
    pub seed: u64,
    pub t: Option<usize>,
    pub data: Option<PathBuf>,
    pub n: Vec<usize>,
    pub k: usize,
    pub nx: usize,
    pub p: Vec<usize>,
    pub m: Option<usize>,
    pub sigma_scale: f64,
    pub lkernel: LKernel,
    pub repeats: usize,
    pub out: Option<PathBuf>,
    pub with_pmcmc: bool,
}

struct ProfileDefaults {
    n: usize,
    k: usize,
    nx: usize,
    repeats: usize,
}

fn defaults(profile: Profile) -> ProfileDefaults {
    match profile {
        Profile::Desk => ProfileDefaults { n: 128, k: 10, nx: 200, repeats: 5 },
        Profile::Paper => ProfileDefaults { n: 1024, k: 10, nx: 500, repeats: 10 },
    }
}

fn power_of_two(name: &str, v: usize) -> CliResult<()> {
    if v == 0 || !v.is_power_of_two() {
        return Err(usage(format!("--{name} must be a power of two, got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    fn validate(&self) -> CliResult<()> {
        for &n in &self.n {
            power_of_two("n", n)?;
        }
        for &p in &self.p {
            power_of_two("p", p)?;
            if p > MAX_RANKS {
                return Err(usage(format!("--p {p} exceeds the {MAX_RANKS} available workers")));
            }
            if let Some(&n) = self.n.iter().find(|&&n| n < p) {
                return Err(usage(format!("--n {n} is smaller than --p {p}")));
            }
        }
        if self.k == 0 {
            return Err(usage("--k must be at least 1"));
        }
        if self.nx < 2 {
            return Err(usage("--nx must be at least 2"));
        }
        if self.repeats == 0 {
            return Err(usage("--repeats must be at least 1"));
        }
        if matches!(self.m, Some(m) if m < 2) {
            return Err(usage("--m must be at least 2"));
        }
        if !(self.sigma_scale > 0.0 && self.sigma_scale.is_finite()) {
            return Err(usage(format!("--sigma-scale must be positive, got {}", self.sigma_scale)));
        }
        if let Some(path) = &self.data {
            if !path.is_file() {
                return Err(usage(format!("dataset {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    fn from_run(args: &RunArgs) -> CliResult<Self> {
        let d = defaults(args.profile);
        let cfg = ExperimentConfig {
            model: args.model.model,
            reed_frost_standard: args.model.reed_frost_standard,
            seed: args.model.seed,
            t: args.model.t,
            data: args.data.clone(),
            n: vec![args.n.unwrap_or(d.n)],
            k: args.k.unwrap_or(d.k),
            nx: args.nx.unwrap_or(d.nx),
            p: vec![args.p],
            m: args.m,
            sigma_scale: args.sigma_scale,
            lkernel: lkernel(args.lkernel),
            repeats: 1,
            out: args.out.clone(),
            with_pmcmc: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_benchmark(args: &BenchmarkArgs) -> CliResult<Self> {
        let d = defaults(args.profile);
        if args.p.is_empty() {
            return Err(usage("--p needs at least one value"));
        }
        let cfg = ExperimentConfig {
            model: args.model.model,
            reed_frost_standard: args.model.reed_frost_standard,
            seed: args.model.seed,
            t: args.model.t,
            data: args.data.clone(),
            n: if args.n.is_empty() { vec![d.n] } else { args.n.clone() },
            k: args.k.unwrap_or(d.k),
            nx: args.nx.unwrap_or(d.nx),
            p: args.p.clone(),
            m: None,
            sigma_scale: args.sigma_scale,
            lkernel: lkernel(args.lkernel),
            repeats: args.repeats.unwrap_or(d.repeats),
            out: Some(args.out.clone()),
            with_pmcmc: args.with_pmcmc,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn chain_length(&self, n: usize) -> usize {
        self.m.unwrap_or(self.k * n)
    }
}

fn lkernel(arg: LKernelArg) -> LKernel {
    match arg {
        LKernelArg::Forward => LKernel::ForwardSymmetric,
        LKernelArg::Optimal => LKernel::ApproxOptimalGaussian,
    }
}

/// Parses arguments (program name first) into a subcommand.
pub fn parse_args<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(args)
}

/// A model together with its data and the parameters the data came from.
pub enum Problem {
    Sir { model: SirModel, data: Dataset },
    LinearGaussian { model: LinearGaussian, data: Dataset },
}

impl Problem {
    pub fn load(model: ModelKind, reed_frost_standard: bool, data: Option<&Path>, seed: u64, t: Option<usize>) -> Result<Self> {
        let loaded = data.map(Dataset::read).transpose()?;
        match model {
            ModelKind::Sir => {
                let mut config = SirConfig::default();
                if let Some(d) = &loaded {
                    if let Some(n_pop) = d.meta.get("n_pop") {
                        config.n_pop = parse_meta(n_pop, "n_pop")?;
                    }
                    if let Some(i0) = d.meta.get("i0") {
                        config.i0 = parse_meta(i0, "i0")?;
                    }
                    config.t = d.len();
                } else if let Some(t) = t {
                    config.t = t;
                }
                let rate = if reed_frost_standard { InfectionRate::ReedFrost } else { InfectionRate::SusceptibleScaled };
                let model = SirModel::new(config, rate)?;
                let data = match loaded {
                    Some(d) => d,
                    None => simulate_sir(&model, &SIR_TRUE_THETA, seed)?,
                };
                Ok(Problem::Sir { model, data })
            }
            ModelKind::LinearGaussian => {
                let model = lg_model(LG_TRUE_THETA[0], 1.0, 1.0)?;
                let data = match loaded {
                    Some(d) => d,
                    None => {
                        let mut d = simulate(&model, &LG_TRUE_THETA, t.unwrap_or(20), seed)?;
                        d.meta.insert("model".into(), "linear-gaussian".into());
                        d
                    }
                };
                Ok(Problem::LinearGaussian { model, data })
            }
        }
    }

    pub fn data(&self) -> &Dataset {
        match self {
            Problem::Sir { data, .. } | Problem::LinearGaussian { data, .. } => data,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Sir { .. } => 2,
            Problem::LinearGaussian { .. } => 1,
        }
    }

    pub fn target(&self, nx: usize) -> Result<Box<dyn Target + '_>> {
        let pf = PfConfig::new(nx)?;
        Ok(match self {
            Problem::Sir { model, data } => Box::new(PfTarget::new(model, data, pf)?),
            Problem::LinearGaussian { model, data } => Box::new(PfTarget::new(model, data, pf)?),
        })
    }
}

fn parse_meta<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("dataset metadata {key}={value} is not a valid number")))
}

/// Mean squared error over parameter components; `NaN` without a reference.
pub fn mse(estimate: &[f64], truth: Option<&[f64]>) -> f64 {
    match truth {
        Some(t) if t.len() == estimate.len() && !t.is_empty() => {
            estimate.iter().zip(t).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / t.len() as f64
        }
        _ => f64::NAN,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    File::create(path).map(BufWriter::new).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn smc2_config(cfg: &ExperimentConfig, n: usize, dim: usize) -> Smc2Config {
    Smc2Config {
        proposal_cov: DMatrix::identity(dim, dim) * cfg.sigma_scale,
        lkernel: cfg.lkernel,
        ..Smc2Config::new(n, cfg.k, dim)
    }
}

fn pmcmc_config(cfg: &ExperimentConfig, n: usize, dim: usize) -> PmcmcConfig {
    PmcmcConfig {
        proposal_cov: DMatrix::identity(dim, dim) * cfg.sigma_scale,
        ..PmcmcConfig::new(cfg.chain_length(n), dim)
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(", ")
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> CliResult<()> {
    let problem = Problem::load(args.model.model, args.model.reed_frost_standard, None, args.model.seed, args.model.t)?;
    problem.data().write(&args.out)?;
    writeln!(out, "wrote {} observations to {}", problem.data().len(), args.out.display()).map_err(io_err(&args.out))?;
    Ok(())
}

fn load(cfg: &ExperimentConfig) -> Result<Problem> {
    Problem::load(cfg.model, cfg.reed_frost_standard, cfg.data.as_deref(), cfg.seed, cfg.t)
}

fn cmd_smc2(args: &RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = ExperimentConfig::from_run(args)?;
    let problem = load(&cfg)?;
    let target = problem.target(cfg.nx)?;
    let result = run_smc2_parallel(&smc2_config(&cfg, cfg.n[0], problem.dim()), target.as_ref(), cfg.p[0], cfg.seed)?;
    let stdout = Path::new("<stdout>");
    let w = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(io_err(stdout));
    w(out, format!("parameters: {}", result.param_names.join(", ")))?;
    w(out, format!("recycled estimate: {}", fmt_vec(&result.recycled)))?;
    w(out, format!("final-iteration estimate: {}", fmt_vec(&result.final_estimate)))?;
    w(out, format!("mse: {}", mse(&result.recycled, problem.data().true_theta.as_deref())))?;
    w(out, format!("sampler seconds: {:.3}, message rounds: {}", result.seconds, result.rounds))?;
    if let Some(path) = &cfg.out {
        write_diagnostics(&result, create(path)?)?;
        w(out, format!("diagnostics: {}", path.display()))?;
    }
    Ok(())
}

fn cmd_pmcmc(args: &RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = ExperimentConfig::from_run(args)?;
    let problem = load(&cfg)?;
    let target = problem.target(cfg.nx)?;
    let result = run_pmcmc(&pmcmc_config(&cfg, cfg.n[0], problem.dim()), target.as_ref(), cfg.seed)?;
    let stdout = Path::new("<stdout>");
    let w = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(io_err(stdout));
    w(out, format!("parameters: {}", result.param_names.join(", ")))?;
    w(out, format!("posterior mean: {}", fmt_vec(&result.estimate)))?;
    w(out, format!("mse: {}", mse(&result.estimate, problem.data().true_theta.as_deref())))?;
    w(out, format!("acceptance rate: {:.4}, chain length: {}", result.chain.acceptance_rate(), result.chain.len()))?;
    w(out, format!("sampler seconds: {:.3}", result.seconds))?;
    if let Some(path) = &cfg.out {
        write_chain(&result, create(path)?)?;
        w(out, format!("chain: {}", path.display()))?;
    }
    Ok(())
}

/// One row of the per-repeat benchmark report.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub n: usize,
    pub k: usize,
    pub nx: usize,
    pub p: usize,
    pub seed: u64,
    pub estimate: Vec<f64>,
    pub mse: f64,
    pub seconds: f64,
    pub rounds: u64,
}

fn bench_header(names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["method", "N", "K", "N_x", "P", "seed"].iter().map(|s| s.to_string()).collect();
    h.extend(names.iter().map(|n| format!("estimate_{n}")));
    h.extend(["mse".to_string(), "seconds_sampler_loop".to_string(), "rounds".to_string()]);
    h
}

fn aggregate_header(names: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["method", "N", "K", "N_x", "P", "repeats"].iter().map(|s| s.to_string()).collect();
    h.extend(names.iter().map(|n| format!("mean_estimate_{n}")));
    h.extend(["mean_mse", "mean_seconds_sampler_loop", "mean_rounds", "speedup"].iter().map(|s| s.to_string()));
    h
}

/// Path of the aggregate report that accompanies `per_repeat`.
pub fn aggregate_path(per_repeat: &Path) -> PathBuf {
    let stem = per_repeat.file_stem().map_or_else(|| "benchmark".into(), |s| s.to_string_lossy().into_owned());
    per_repeat.with_file_name(format!("{stem}_aggregate.csv"))
}

/// Means over the repeats of one (method, N, P) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub n: usize,
    pub k: usize,
    pub nx: usize,
    pub p: usize,
    pub repeats: usize,
    pub estimate: Vec<f64>,
    pub mse: f64,
    pub seconds: f64,
    pub rounds: f64,
    /// Mean time at P = 1 (same method and N) over mean time here; `NaN`
    /// when the sweep has no P = 1 cell.
    pub speedup: f64,
}

pub fn aggregate(rows: &[BenchRow]) -> Vec<AggregateRow> {
    let mut cells: Vec<(&str, usize, usize)> = Vec::new();
    for r in rows {
        let key = (r.method.as_str(), r.n, r.p);
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    let mut out: Vec<AggregateRow> = cells
        .iter()
        .map(|&(method, n, p)| {
            let members: Vec<&BenchRow> = rows.iter().filter(|r| (r.method.as_str(), r.n, r.p) == (method, n, p)).collect();
            let count = members.len() as f64;
            let mean = |f: &dyn Fn(&BenchRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / count;
            AggregateRow {
                method: method.to_string(),
                n,
                k: members[0].k,
                nx: members[0].nx,
                p,
                repeats: members.len(),
                estimate: (0..members[0].estimate.len()).map(|d| mean(&|r| r.estimate[d])).collect(),
                mse: mean(&|r| r.mse),
                seconds: mean(&|r| r.seconds),
                rounds: mean(&|r| r.rounds as f64),
                speedup: f64::NAN,
            }
        })
        .collect();
    let base: Vec<Option<f64>> = out
        .iter()
        .map(|row| out.iter().find(|b| b.method == row.method && b.n == row.n && b.p == 1).map(|b| b.seconds))
        .collect();
    for (row, base) in out.iter_mut().zip(base) {
        row.speedup = base.map_or(f64::NAN, |b| b / row.seconds);
    }
    out
}

fn cmd_benchmark(args: &BenchmarkArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = ExperimentConfig::from_benchmark(args)?;
    let problem = load(&cfg)?;
    let target = problem.target(cfg.nx)?;
    let truth = problem.data().true_theta.clone();
    let names = target.param_names();
    let per_repeat = cfg.out.clone().expect("benchmark always has an output path");
    let agg_path = aggregate_path(&per_repeat);
    let stdout = Path::new("<stdout>");

    let mut rows = Vec::new();
    for &n in &cfg.n {
        for &p in &cfg.p {
            for r in 0..cfg.repeats as u64 {
                let seed = cfg.seed + r;
                let res = run_smc2_parallel(&smc2_config(&cfg, n, problem.dim()), target.as_ref(), p, seed)?;
                rows.push(BenchRow {
                    method: "smc2".into(),
                    n,
                    k: cfg.k,
                    nx: cfg.nx,
                    p,
                    seed,
                    mse: mse(&res.recycled, truth.as_deref()),
                    estimate: res.recycled,
                    seconds: res.seconds,
                    rounds: res.rounds,
                });
            }
        }
        if cfg.with_pmcmc {
            for r in 0..cfg.repeats as u64 {
                let seed = cfg.seed + r;
                let res: PmcmcOutput = run_pmcmc(&pmcmc_config(&cfg, n, problem.dim()), target.as_ref(), seed)?;
                rows.push(BenchRow {
                    method: "pmcmc".into(),
                    n,
                    k: cfg.k,
                    nx: cfg.nx,
                    p: 1,
                    seed,
                    mse: mse(&res.estimate, truth.as_deref()),
                    estimate: res.estimate,
                    seconds: res.seconds,
                    rounds: 0,
                });
            }
        }
    }

    let mut w = csv::Writer::from_writer(create(&per_repeat)?);
    w.write_record(bench_header(&names)).map_err(csv_err(&per_repeat))?;
    for r in &rows {
        let mut rec = vec![r.method.clone(), r.n.to_string(), r.k.to_string(), r.nx.to_string(), r.p.to_string(), r.seed.to_string()];
        rec.extend(r.estimate.iter().map(f64::to_string));
        rec.extend([r.mse.to_string(), r.seconds.to_string(), r.rounds.to_string()]);
        w.write_record(&rec).map_err(csv_err(&per_repeat))?;
    }
    w.flush().map_err(io_err(&per_repeat))?;

    let mut w = csv::Writer::from_writer(create(&agg_path)?);
    w.write_record(aggregate_header(&names)).map_err(csv_err(&agg_path))?;
    for r in aggregate(&rows) {
        let mut rec = vec![r.method.clone(), r.n.to_string(), r.k.to_string(), r.nx.to_string(), r.p.to_string(), r.repeats.to_string()];
        rec.extend(r.estimate.iter().map(f64::to_string));
        rec.extend([r.mse.to_string(), r.seconds.to_string(), r.rounds.to_string(), r.speedup.to_string()]);
        w.write_record(&rec).map_err(csv_err(&agg_path))?;
        writeln!(
            out,
            "{:<6} N={:<5} P={:<3} mean mse {:.3e}  mean time {:.3}s  speed-up {:.2}",
            r.method, r.n, r.p, r.mse, r.seconds, r.speedup
        )
        .map_err(io_err(stdout))?;
    }
    w.flush().map_err(io_err(&agg_path))?;
    writeln!(out, "timings cover the sampler loop only (no simulation or I/O)").map_err(io_err(stdout))?;
    writeln!(out, "per-repeat: {}\naggregate: {}", per_repeat.display(), agg_path.display()).map_err(io_err(stdout))?;
    Ok(())
}

/// `(smc2 trace path, pmcmc trace path)` for a convergence output prefix.
pub fn convergence_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let stem = prefix.file_stem().map_or_else(|| "convergence".into(), |s| s.to_string_lossy().into_owned());
    (
        prefix.with_file_name(format!("{stem}_smc2.csv")),
        prefix.with_file_name(format!("{stem}_pmcmc.csv")),
    )
}

/// SMC² trace: `k,recycled_<name>...,estimate_<name>...,ess,l_k`, one row per iteration.
pub fn write_smc2_trace<W: Write>(res: &Smc2Output, writer: W, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["k".to_string()];
    header.extend(res.param_names.iter().map(|n| format!("recycled_{n}")));
    header.extend(res.param_names.iter().map(|n| format!("estimate_{n}")));
    header.extend(["ess".to_string(), "l_k".to_string()]);
    w.write_record(&header).map_err(csv_err(path))?;
    for r in &res.iterations {
        let mut rec = vec![r.k.to_string()];
        rec.extend(r.recycled.iter().map(f64::to_string));
        rec.extend(r.estimate.iter().map(f64::to_string));
        rec.extend([r.ess.to_string(), r.l.to_string()]);
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// p-MCMC trace: `m,mean_<name>...`, the running post-burn-in mean per step.
pub fn write_pmcmc_trace<W: Write>(res: &PmcmcOutput, writer: W, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["m".to_string()];
    header.extend(res.param_names.iter().map(|n| format!("mean_{n}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for (m, mean) in res.chain.running_means().iter().enumerate() {
        let mut rec = vec![m.to_string()];
        rec.extend(mean.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn cmd_convergence(args: &RunArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = ExperimentConfig::from_run(args)?;
    let problem = load(&cfg)?;
    let target = problem.target(cfg.nx)?;
    let n = cfg.n[0];
    let smc = run_smc2_parallel(&smc2_config(&cfg, n, problem.dim()), target.as_ref(), cfg.p[0], cfg.seed)?;
    let chain = run_pmcmc(&pmcmc_config(&cfg, n, problem.dim()), target.as_ref(), cfg.seed)?;
    let prefix = cfg.out.clone().unwrap_or_else(|| PathBuf::from("convergence"));
    let (smc_path, chain_path) = convergence_paths(&prefix);
    write_smc2_trace(&smc, create(&smc_path)?, &smc_path)?;
    write_pmcmc_trace(&chain, create(&chain_path)?, &chain_path)?;
    let stdout = Path::new("<stdout>");
    writeln!(out, "smc2 trace ({} rows): {}", smc.iterations.len(), smc_path.display()).map_err(io_err(stdout))?;
    writeln!(out, "pmcmc trace ({} rows): {}", chain.chain.len(), chain_path.display()).map_err(io_err(stdout))?;
    Ok(())
}

fn cmd_validate(args: &ValidateArgs, out: &mut dyn Write) -> CliResult<()> {
    let fault = args.inject_fault.as_deref().map(Fault::parse).transpose().map_err(|e| usage(e.to_string()))?;
    let suites: Vec<&str> = if args.suite == "all" {
        SUITES.to_vec()
    } else if SUITES.contains(&args.suite.as_str()) {
        vec![args.suite.as_str()]
    } else {
        return Err(usage(format!("unknown suite '{}' (expected all or one of {})", args.suite, SUITES.join(", "))));
    };
    if args.cases == 0 {
        return Err(usage("--cases must be at least 1"));
    }
    let opts = ValidateOptions { cases: args.cases, seed: args.seed, fault };
    let stdout = Path::new("<stdout>");
    let mut failed = Vec::new();
    for name in suites {
        let report = run_suite(name, &opts)?;
        writeln!(out, "suite {}: {}/{} cases passed", report.name, report.passed, report.cases).map_err(io_err(stdout))?;
        if let Some((seed, n, p, msg)) = &report.first_failure {
            writeln!(out, "  first counterexample (seed={seed}, N={n}, P={p}): {msg}").map_err(io_err(stdout))?;
            failed.push(report.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(Error::Contract(format!("failing suites: {}", failed.join(", ")))))
    }
}

/// Runs a parsed command, writing human-readable progress to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> std::result::Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Smc2(a) => cmd_smc2(a, out),
        Command::Pmcmc(a) => cmd_pmcmc(a, out),
        Command::Benchmark(a) => cmd_benchmark(a, out),
        Command::Convergence(a) => cmd_convergence(a, out),
        Command::Validate(a) => cmd_validate(a, out),
    }
}

/// Full entry point: parse, run, report, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse_args(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
