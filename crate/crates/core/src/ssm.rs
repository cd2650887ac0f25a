//! State-space models: a generic interface, the stochastic SIR epidemic model
//! and a linear-Gaussian model with its exact Kalman likelihood.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{normal_log_pdf, LN_2PI};
use crate::rng::{keyed, Purpose};

/// A latent Markov process observed through a noisy channel, plus the prior
/// over its static parameters.
///
/// Observations are real numbers; count models store integer values.
pub trait StateSpaceModel: Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn param_names(&self) -> Vec<String> {
        (0..self.param_dim()).map(|d| format!("theta{d}")).collect()
    }

    fn sample_initial<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Self::State;
    fn sample_transition<R: Rng + ?Sized>(&self, prev: &Self::State, theta: &[f64], rng: &mut R) -> Self::State;
    /// Finite or `-inf`, never NaN.
    fn observation_log_density(&self, y: f64, x: &Self::State, theta: &[f64]) -> f64;
    fn sample_observation<R: Rng + ?Sized>(&self, x: &Self::State, theta: &[f64], rng: &mut R) -> f64;

    /// `-inf` outside the prior's support.
    fn log_prior(&self, theta: &[f64]) -> f64;
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>;
}

// ---------------------------------------------------------------------------
// SIR

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SirConfig {
    pub n_pop: u64,
    pub i0: u64,
    pub t: usize,
}

impl Default for SirConfig {
    fn default() -> Self {
        SirConfig {
            n_pop: 10_000,
            i0: 3,
            t: 30,
        }
    }
}

impl SirConfig {
    pub fn validate(&self) -> Result<()> {
        if self.i0 == 0 || self.i0 >= self.n_pop {
            return Err(Error::Config(format!(
                "need 0 < I0 < N_pop, got I0={} N_pop={}",
                self.i0, self.n_pop
            )));
        }
        if self.t == 0 {
            return Err(Error::Config("need at least one observation".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SirState {
    pub s: u64,
    pub i: u64,
    pub r: u64,
}

impl SirState {
    pub fn total(&self) -> u64 {
        self.s + self.i + self.r
    }
}

/// Which infection probability to use for S → I.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InfectionRate {
    /// `1 - exp(-β I S / N)`, with the susceptible count inside the exponent.
    #[default]
    SusceptibleScaled,
    /// Conventional Reed–Frost per-susceptible form `1 - exp(-β I / N)`.
    ReedFrost,
}

/// Probabilities of leaving S and I during one step.
pub fn sir_leave_probabilities(
    s: u64,
    i: u64,
    beta: f64,
    gamma: f64,
    n_pop: u64,
    form: InfectionRate,
) -> Result<(f64, f64)> {
    if !(beta >= 0.0 && gamma >= 0.0) {
        return Err(Error::Domain(format!(
            "rates must be non-negative, got beta={beta} gamma={gamma}"
        )));
    }
    if n_pop == 0 || s > n_pop || i > n_pop {
        return Err(Error::Domain(format!(
            "counts S={s} I={i} outside [0, N_pop={n_pop}]"
        )));
    }
    let pressure = match form {
        InfectionRate::SusceptibleScaled => beta * i as f64 * s as f64 / n_pop as f64,
        InfectionRate::ReedFrost => beta * i as f64 / n_pop as f64,
    };
    Ok((-(-pressure).exp_m1(), -(-gamma).exp_m1()))
}

fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("p in (0,1)").sample(rng)
}

/// One binomial-chain step of the epidemic.
pub fn sir_transition<R: Rng + ?Sized>(
    prev: &SirState,
    beta: f64,
    gamma: f64,
    n_pop: u64,
    form: InfectionRate,
    rng: &mut R,
) -> Result<SirState> {
    let (p_si, p_ir) = sir_leave_probabilities(prev.s, prev.i, beta, gamma, n_pop, form)?;
    let n_si = binomial(prev.s, p_si, rng);
    let n_ir = binomial(prev.i, p_ir, rng);
    let s = prev.s - n_si;
    let i = prev.i + n_si - n_ir;
    Ok(SirState { s, i, r: n_pop - s - i })
}

/// Poisson log-pmf. A zero rate puts all mass on zero.
pub fn poisson_log_pmf(y: f64, rate: f64) -> Result<f64> {
    if !(y >= 0.0) || y.fract() != 0.0 {
        return Err(Error::Domain(format!("observation {y} is not a count")));
    }
    if !(rate >= 0.0) {
        return Err(Error::Domain(format!("negative Poisson rate {rate}")));
    }
    if rate == 0.0 {
        return Ok(if y == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    Ok(y * rate.ln() - rate - ln_gamma(y + 1.0))
}

/// Log-probability of `y` infected cases reported given the state.
pub fn sir_observation_logpdf(y: f64, x: &SirState) -> Result<f64> {
    poisson_log_pmf(y, x.i as f64)
}

/// Stochastic SIR model with Poisson-observed infections and a
/// `U[0,1]²` prior over `(β, γ)`.
#[derive(Debug, Clone, Copy)]
pub struct SirModel {
    pub config: SirConfig,
    pub infection_rate: InfectionRate,
}

impl SirModel {
    pub fn new(config: SirConfig, infection_rate: InfectionRate) -> Result<Self> {
        config.validate()?;
        Ok(SirModel {
            config,
            infection_rate,
        })
    }

    pub fn initial_state(&self) -> SirState {
        SirState {
            s: self.config.n_pop - self.config.i0,
            i: self.config.i0,
            r: 0,
        }
    }
}

fn rate(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.max(0.0)
    }
}

impl StateSpaceModel for SirModel {
    type State = SirState;

    fn state_dim(&self) -> usize {
        3
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        vec!["beta".into(), "gamma".into()]
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _theta: &[f64], _rng: &mut R) -> SirState {
        self.initial_state()
    }

    fn sample_transition<R: Rng + ?Sized>(&self, prev: &SirState, theta: &[f64], rng: &mut R) -> SirState {
        sir_transition(
            prev,
            rate(theta[0]),
            rate(theta[1]),
            self.config.n_pop,
            self.infection_rate,
            rng,
        )
        .expect("state counts stay within the population")
    }

    fn observation_log_density(&self, y: f64, x: &SirState, _theta: &[f64]) -> f64 {
        sir_observation_logpdf(y, x).unwrap_or(f64::NEG_INFINITY)
    }

    fn sample_observation<R: Rng + ?Sized>(&self, x: &SirState, _theta: &[f64], rng: &mut R) -> f64 {
        if x.i == 0 {
            return 0.0;
        }
        Poisson::new(x.i as f64).expect("positive rate").sample(rng)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        if theta.len() == 2 && theta.iter().all(|v| (0.0..=1.0).contains(v)) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        vec![rng.gen::<f64>(), rng.gen::<f64>()]
    }
}

// ---------------------------------------------------------------------------
// Linear-Gaussian

/// `x_1 ~ N(0, q)`, `x_t = a x_{t-1} + N(0, q)`, `y_t = x_t + N(0, r)`.
///
/// The parameter vector is `[a]` with a `U[-1, 1]` prior; `a` passed to
/// [`lg_model`] is the nominal value used for simulation.
#[derive(Debug, Clone, Copy)]
pub struct LinearGaussian {
    pub a: f64,
    pub q: f64,
    pub r: f64,
}

pub fn lg_model(a: f64, q: f64, r: f64) -> Result<LinearGaussian> {
    if !(q > 0.0 && r > 0.0) {
        return Err(Error::Domain(format!(
            "variances must be positive, got q={q} r={r}"
        )));
    }
    if !(a.abs() <= 1.0) {
        return Err(Error::Domain(format!("need |a| <= 1, got {a}")));
    }
    Ok(LinearGaussian { a, q, r })
}

impl LinearGaussian {
    pub fn nominal_theta(&self) -> Vec<f64> {
        vec![self.a]
    }
}

impl StateSpaceModel for LinearGaussian {
    type State = f64;

    fn state_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        vec!["a".into()]
    }

    fn sample_initial<R: Rng + ?Sized>(&self, _theta: &[f64], rng: &mut R) -> f64 {
        Normal::new(0.0, self.q.sqrt()).expect("q > 0").sample(rng)
    }

    fn sample_transition<R: Rng + ?Sized>(&self, prev: &f64, theta: &[f64], rng: &mut R) -> f64 {
        theta[0] * prev + Normal::new(0.0, self.q.sqrt()).expect("q > 0").sample(rng)
    }

    fn observation_log_density(&self, y: f64, x: &f64, _theta: &[f64]) -> f64 {
        let v = normal_log_pdf(y, *x, self.r);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn sample_observation<R: Rng + ?Sized>(&self, x: &f64, _theta: &[f64], rng: &mut R) -> f64 {
        x + Normal::new(0.0, self.r.sqrt()).expect("r > 0").sample(rng)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        match theta {
            [a] if (-1.0..=1.0).contains(a) => -std::f64::consts::LN_2,
            _ => f64::NEG_INFINITY,
        }
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        vec![rng.gen_range(-1.0..=1.0)]
    }
}

/// Exact `ln p(y_1:T)` for the linear-Gaussian model.
pub fn kalman_loglik(a: f64, q: f64, r: f64, y: &[f64]) -> f64 {
    let mut mean = 0.0;
    let mut var = q;
    let mut total = 0.0;
    for (t, &obs) in y.iter().enumerate() {
        if t > 0 {
            mean *= a;
            var = a * a * var + q;
        }
        let s = var + r;
        let innovation = obs - mean;
        total += -0.5 * (LN_2PI + s.ln() + innovation * innovation / s);
        let gain = var / s;
        mean += gain * innovation;
        var *= 1.0 - gain;
    }
    total
}

// ---------------------------------------------------------------------------
// Data

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub true_theta: Option<Vec<f64>>,
    pub seed: Option<u64>,
    /// Extra `key=value` pairs written to the sidecar.
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn from_observations(y: Vec<f64>) -> Self {
        Dataset {
            y,
            true_theta: None,
            seed: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Sidecar path: same stem, `.meta` extension.
    pub fn meta_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("meta")
    }

    /// Writes `t,y` rows (t starts at 1) and the `.meta` sidecar.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let io = |source| Error::Io {
            path: csv_path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
        w.write_record(["t", "y"]).map_err(|e| csv_error(csv_path, e))?;
        for (t, y) in self.y.iter().enumerate() {
            w.write_record([(t + 1).to_string(), format_value(*y)])
                .map_err(|e| csv_error(csv_path, e))?;
        }
        w.flush().map_err(io)?;

        let mut meta = String::new();
        let mut entries = self.meta.clone();
        if let Some(seed) = self.seed {
            entries.insert("seed".into(), seed.to_string());
        }
        if let Some(theta) = &self.true_theta {
            let joined: Vec<String> = theta.iter().map(|v| format_value(*v)).collect();
            entries.insert("theta_true".into(), joined.join(","));
        }
        entries.insert("t".into(), self.y.len().to_string());
        for (k, v) in &entries {
            let _ = writeln!(meta, "{k}={v}");
        }
        let meta_path = Self::meta_path(csv_path);
        std::fs::write(&meta_path, meta).map_err(|source| Error::Io {
            path: meta_path.display().to_string(),
            source,
        })
    }

    /// Reads a dataset; the sidecar is optional.
    pub fn read(csv_path: &Path) -> Result<Self> {
        let path_str = csv_path.display().to_string();
        let parse_err = |message: String| Error::Parse {
            path: path_str.clone(),
            message,
        };
        let mut reader = csv::Reader::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(csv_path, e))?.clone();
        if headers.len() != 2 || &headers[0] != "t" || &headers[1] != "y" {
            return Err(parse_err(format!("expected header t,y, found {:?}", headers)));
        }
        let mut y = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| csv_error(csv_path, e))?;
            let t: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {}: bad t {:?}", row + 1, &record[0])))?;
            if t != row + 1 {
                return Err(parse_err(format!("row {}: expected t={}, found {t}", row + 1, row + 1)));
            }
            let v: f64 = record[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {}: bad y {:?}", row + 1, &record[1])))?;
            if !v.is_finite() {
                return Err(parse_err(format!("row {}: non-finite y", row + 1)));
            }
            y.push(v);
        }
        if y.is_empty() {
            return Err(parse_err("no observations".into()));
        }

        let mut data = Dataset::from_observations(y);
        let meta_path = Self::meta_path(csv_path);
        if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|source| Error::Io {
                path: meta_path.display().to_string(),
                source,
            })?;
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
                let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                    path: meta_path.display().to_string(),
                    message: format!("expected key=value, found {line:?}"),
                })?;
                let (k, v) = (k.trim(), v.trim());
                let bad = |what: &str| Error::Parse {
                    path: meta_path.display().to_string(),
                    message: format!("bad {what} {v:?}"),
                };
                match k {
                    "seed" => data.seed = Some(v.parse().map_err(|_| bad("seed"))?),
                    "theta_true" => {
                        let theta: std::result::Result<Vec<f64>, _> =
                            v.split(',').map(|s| s.trim().parse::<f64>()).collect();
                        data.true_theta = Some(theta.map_err(|_| bad("theta_true"))?);
                    }
                    "t" => {
                        let t: usize = v.parse().map_err(|_| bad("t"))?;
                        if t != data.y.len() {
                            return Err(bad("t (does not match the row count)"));
                        }
                    }
                    _ => {
                        data.meta.insert(k.to_string(), v.to_string());
                    }
                }
            }
        }
        Ok(data)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_value(v: f64) -> String {
    format!("{v:?}")
        .trim_end_matches(".0")
        .to_string()
}

/// Simulates `t` observations at `theta` from the stream keyed by `seed`.
pub fn simulate<M: StateSpaceModel>(model: &M, theta: &[f64], t: usize, seed: u64) -> Result<Dataset> {
    let (_, y) = simulate_path(model, theta, t, seed)?;
    Ok(Dataset {
        y,
        true_theta: Some(theta.to_vec()),
        seed: Some(seed),
        meta: BTreeMap::new(),
    })
}

/// Like [`simulate`] but also returns the latent path.
pub fn simulate_path<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    t: usize,
    seed: u64,
) -> Result<(Vec<M::State>, Vec<f64>)> {
    if t == 0 {
        return Err(Error::Config("need T >= 1".into()));
    }
    if theta.len() != model.param_dim() {
        return Err(Error::Config(format!(
            "theta has {} entries, model expects {}",
            theta.len(),
            model.param_dim()
        )));
    }
    let mut rng = keyed(seed, Purpose::Simulation, 0, 0);
    let mut states = Vec::with_capacity(t);
    let mut y = Vec::with_capacity(t);
    let mut x = model.sample_initial(theta, &mut rng);
    for step in 0..t {
        if step > 0 {
            x = model.sample_transition(&x, theta, &mut rng);
        }
        y.push(model.sample_observation(&x, theta, &mut rng));
        states.push(x.clone());
    }
    Ok((states, y))
}

/// SIR dataset with the metadata the experiment harness expects.
pub fn simulate_sir(model: &SirModel, theta: &[f64], seed: u64) -> Result<Dataset> {
    let mut data = simulate(model, theta, model.config.t, seed)?;
    data.meta.insert("model".into(), "sir".into());
    data.meta.insert("n_pop".into(), model.config.n_pop.to_string());
    data.meta.insert("i0".into(), model.config.i0.to_string());
    Ok(data)
}
