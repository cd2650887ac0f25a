//! Outer SMC sampler over static parameters.
//!
//! Each of the `N` samples carries a parameter vector and a cached estimate of
//! its log target. Iteration 1 draws from the prior; later iterations move
//! every sample with a Gaussian random walk, re-weight with an L-kernel,
//! and resample when the effective sample size falls below `N/2`.
//! Per-iteration estimates are combined with ESS-proportional constants
//! (recycling).
//!
//! Every draw comes from a stream keyed by `(seed, purpose, k, global index)`
//! and every reduction runs over the same fixed tree, so the reported numbers
//! do not depend on how many ranks share the work.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::comms::{spawn_group, Communicator};
use crate::error::{Error, Result};
use crate::numerics::{normal_log_pdf, Gaussian};
use crate::pf::{run_pf, PfConfig};
use crate::resample::{parallel_redistribute, reset_log_weight, systematic_choice};
use crate::rng::{keyed, Purpose, StreamRng};
use crate::ssm::{Dataset, StateSpaceModel};
use crate::wire::Wire;

/// A posterior known up to its normalizing constant.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("theta{i}")).collect()
    }

    fn log_prior(&self, theta: &[f64]) -> f64;
    fn sample_prior(&self, rng: &mut StreamRng) -> Vec<f64>;
    /// (Estimate of) `ln p(y | θ)`. Only called for `θ` inside the prior support.
    fn log_likelihood(&self, theta: &[f64], rng: &mut StreamRng) -> f64;
}

/// A state-space model scored by a fresh bootstrap particle filter.
pub struct PfTarget<'a, M> {
    pub model: &'a M,
    pub data: &'a Dataset,
    pub pf: PfConfig,
}

impl<'a, M: StateSpaceModel> PfTarget<'a, M> {
    pub fn new(model: &'a M, data: &'a Dataset, pf: PfConfig) -> Result<Self> {
        pf.validate()?;
        if data.is_empty() {
            return Err(Error::Config("dataset has no observations".into()));
        }
        Ok(PfTarget { model, data, pf })
    }
}

impl<M: StateSpaceModel> Target for PfTarget<'_, M> {
    fn dim(&self) -> usize {
        self.model.param_dim()
    }
    fn param_names(&self) -> Vec<String> {
        self.model.param_names()
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.model.log_prior(theta)
    }
    fn sample_prior(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.model.sample_prior(rng)
    }
    fn log_likelihood(&self, theta: &[f64], rng: &mut StreamRng) -> f64 {
        run_pf(self.model, self.data, theta, &self.pf, rng)
    }
}

/// Conjugate toy posterior with an exact likelihood.
///
/// Prior `θ ~ N(m0, s0² I)`, observations `y_t ~ N(θ, σ² I)` in `D` dimensions.
#[derive(Debug, Clone)]
pub struct ConjugateGaussian {
    pub prior_mean: Vec<f64>,
    pub prior_sd: f64,
    pub noise_sd: f64,
    pub observations: Vec<Vec<f64>>,
}

impl ConjugateGaussian {
    pub fn posterior_mean(&self) -> Vec<f64> {
        let t = self.observations.len() as f64;
        let prec = 1.0 / self.prior_sd.powi(2) + t / self.noise_sd.powi(2);
        (0..self.prior_mean.len())
            .map(|d| {
                let sum: f64 = self.observations.iter().map(|y| y[d]).sum();
                (self.prior_mean[d] / self.prior_sd.powi(2) + sum / self.noise_sd.powi(2)) / prec
            })
            .collect()
    }

    pub fn posterior_sd(&self) -> f64 {
        let t = self.observations.len() as f64;
        (1.0 / (1.0 / self.prior_sd.powi(2) + t / self.noise_sd.powi(2))).sqrt()
    }
}

impl Target for ConjugateGaussian {
    fn dim(&self) -> usize {
        self.prior_mean.len()
    }
    fn log_prior(&self, theta: &[f64]) -> f64 {
        theta
            .iter()
            .zip(&self.prior_mean)
            .map(|(x, m)| normal_log_pdf(*x, *m, self.prior_sd.powi(2)))
            .sum()
    }
    fn sample_prior(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.prior_mean
            .iter()
            .map(|m| m + self.prior_sd * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
    fn log_likelihood(&self, theta: &[f64], _rng: &mut StreamRng) -> f64 {
        let var = self.noise_sd.powi(2);
        self.observations
            .iter()
            .map(|y| y.iter().zip(theta).map(|(y, x)| normal_log_pdf(*y, *x, var)).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LKernel {
    /// `L = q`; the weight increment is the target ratio.
    ForwardSymmetric,
    /// Gaussian conditional of a joint fit to the `(θ_{k−1}, θ_k)` pairs.
    #[default]
    ApproxOptimalGaussian,
}

impl LKernel {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "forward" => Ok(LKernel::ForwardSymmetric),
            "optimal" => Ok(LKernel::ApproxOptimalGaussian),
            other => Err(Error::Config(format!(
                "unknown L-kernel '{other}' (expected forward or optimal)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LKernel::ForwardSymmetric => "forward",
            LKernel::ApproxOptimalGaussian => "optimal",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Smc2Config {
    pub n: usize,
    pub k: usize,
    pub proposal_cov: DMatrix<f64>,
    pub lkernel: LKernel,
    /// Resample when `ESS < resample_fraction · N`.
    pub resample_fraction: f64,
    /// Weight the joint fit by the previous normalized weights.
    pub weighted_lkernel_fit: bool,
}

impl Smc2Config {
    /// Defaults for a `dim`-dimensional problem: `Σ = 0.1 I`, optimal L-kernel.
    pub fn new(n: usize, k: usize, dim: usize) -> Self {
        Smc2Config {
            n,
            k,
            proposal_cov: DMatrix::identity(dim, dim) * 0.1,
            lkernel: LKernel::default(),
            resample_fraction: 0.5,
            weighted_lkernel_fit: false,
        }
    }

    pub fn validate(&self, dim: usize, ranks: usize) -> Result<()> {
        if self.n == 0 || !self.n.is_power_of_two() {
            return Err(Error::Config(format!("N must be a power of two, got {}", self.n)));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if ranks == 0 || !self.n.is_multiple_of(ranks) || self.n < ranks {
            return Err(Error::Config(format!(
                "N = {} cannot be split evenly over {ranks} ranks",
                self.n
            )));
        }
        if self.proposal_cov.nrows() != dim {
            return Err(Error::Config(format!(
                "proposal covariance is {}x{}, parameters have dimension {dim}",
                self.proposal_cov.nrows(),
                self.proposal_cov.ncols()
            )));
        }
        Gaussian::new(DVector::zeros(dim), self.proposal_cov.clone())
            .map_err(|e| Error::Config(format!("proposal covariance: {e}")))?;
        if !(self.resample_fraction > 0.0 && self.resample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "resample fraction must lie in (0, 1], got {}",
                self.resample_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSample {
    pub theta: Vec<f64>,
    pub log_prior: f64,
    pub log_lik: f64,
    pub theta_prev: Vec<f64>,
    pub log_target_prev: f64,
}

impl ThetaSample {
    pub fn log_target(&self) -> f64 {
        if self.log_prior == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.log_prior + self.log_lik
        }
    }
}

impl Wire for ThetaSample {
    fn encode(&self, out: &mut Vec<u8>) {
        self.theta.encode(out);
        self.log_prior.encode(out);
        self.log_lik.encode(out);
        self.theta_prev.encode(out);
        self.log_target_prev.encode(out);
    }
    fn decode(input: &mut &[u8]) -> Result<Self> {
        Ok(ThetaSample {
            theta: Vec::decode(input)?,
            log_prior: f64::decode(input)?,
            log_lik: f64::decode(input)?,
            theta_prev: Vec::decode(input)?,
            log_target_prev: f64::decode(input)?,
        })
    }
}

/// `(log_prior, log_lik)`; the likelihood is skipped outside the prior support.
pub fn evaluate_target<T: Target + ?Sized>(target: &T, theta: &[f64], rng: &mut StreamRng) -> (f64, f64) {
    let log_prior = target.log_prior(theta);
    if log_prior == f64::NEG_INFINITY {
        return (log_prior, f64::NEG_INFINITY);
    }
    (log_prior, target.log_likelihood(theta, rng))
}

/// Random-walk move `θ + L z`, `L Lᵀ = Σ`.
pub fn propose(theta: &[f64], proposal: &Gaussian, rng: &mut StreamRng) -> Vec<f64> {
    let z = DVector::from_iterator(theta.len(), (0..theta.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let step = proposal.cholesky_factor() * z;
    theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect()
}

/// Moments of the stacked pairs `[θ_{k−1}; θ_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFit {
    pub mean_prev: DVector<f64>,
    pub mean_cur: DVector<f64>,
    /// `2D × 2D`, previous block first.
    pub cov: DMatrix<f64>,
}

impl JointFit {
    pub fn dim(&self) -> usize {
        self.mean_prev.len()
    }
}

/// Population moments of the `(θ_{k−1}, θ_k)` pairs held by every rank.
///
/// Collective: one sum for the means, one for the centered outer products.
/// With `weights`, each pair counts in proportion to its (globally normalized)
/// weight instead of `1/N`.
pub fn fit_gaussian_joint(
    comm: &mut Communicator,
    pairs: &[(&[f64], &[f64])],
    weights: Option<&[f64]>,
) -> Result<JointFit> {
    let dim = pairs.first().map_or(0, |(p, _)| p.len());
    let n_total = pairs.len() * comm.size();
    if n_total < 2 {
        return Err(Error::Degenerate(format!("joint fit needs at least 2 pairs, got {n_total}")));
    }
    let w = |i: usize| weights.map_or(1.0 / n_total as f64, |w| w[i]);
    let stacked = |i: usize| pairs[i].0.iter().chain(pairs[i].1).copied();
    let width = 2 * dim;

    let mut local = vec![0.0; width];
    for i in 0..pairs.len() {
        for (acc, z) in local.iter_mut().zip(stacked(i)) {
            *acc += w(i) * z;
        }
    }
    let mean = comm.all_reduce_sum(&local)?;

    let mut local = vec![0.0; width * (width + 1) / 2];
    for i in 0..pairs.len() {
        let c: Vec<f64> = stacked(i).zip(&mean).map(|(z, m)| z - m).collect();
        let mut idx = 0;
        for a in 0..width {
            for b in a..width {
                local[idx] += w(i) * c[a] * c[b];
                idx += 1;
            }
        }
    }
    let upper = comm.all_reduce_sum(&local)?;
    let mut cov = DMatrix::zeros(width, width);
    let mut idx = 0;
    for a in 0..width {
        for b in a..width {
            cov[(a, b)] = upper[idx];
            cov[(b, a)] = upper[idx];
            idx += 1;
        }
    }
    Ok(JointFit {
        mean_prev: DVector::from_column_slice(&mean[..dim]),
        mean_cur: DVector::from_column_slice(&mean[dim..]),
        cov,
    })
}

/// `S + εI` with `ε = 1e-8 · trace(S)/D`, at least `1e-12`.
pub fn regularize(s: &DMatrix<f64>) -> DMatrix<f64> {
    let d = s.nrows();
    let eps = (1e-8 * s.trace() / d as f64).max(1e-12);
    s + DMatrix::identity(d, d) * eps
}

/// Conditional `N(θ_{k−1}; μ_{k−1|k}, Σ_{k−1|k})` of a joint Gaussian fit.
#[derive(Debug, Clone)]
pub struct ConditionalKernel {
    mean_prev: DVector<f64>,
    mean_cur: DVector<f64>,
    /// `Σ_{k−1,k} Σ_{k,k}⁻¹`.
    gain: DMatrix<f64>,
    conditional: Gaussian,
}

impl ConditionalKernel {
    pub fn from_fit(fit: &JointFit) -> Result<Self> {
        let d = fit.dim();
        let s_pp = fit.cov.view((0, 0), (d, d)).into_owned();
        let s_pc = fit.cov.view((0, d), (d, d)).into_owned();
        let s_cc = regularize(&fit.cov.view((d, d), (d, d)).into_owned());
        let chol = s_cc
            .cholesky()
            .ok_or_else(|| Error::Numerical("current-iteration covariance block is not positive definite".into()))?;
        // gain = S_pc S_cc⁻¹  ⇔  S_cc gainᵀ = S_cp
        let gain = chol.solve(&s_pc.transpose()).transpose();
        let cond = &s_pp - &gain * s_pc.transpose();
        let cond = regularize(&((&cond + cond.transpose()) * 0.5));
        let conditional = Gaussian::new(DVector::zeros(d), cond)
            .map_err(|e| Error::Numerical(format!("L-kernel conditional covariance: {e}")))?;
        Ok(ConditionalKernel {
            mean_prev: fit.mean_prev.clone(),
            mean_cur: fit.mean_cur.clone(),
            gain,
            conditional,
        })
    }

    pub fn conditional_mean(&self, cur: &[f64]) -> DVector<f64> {
        &self.mean_prev + &self.gain * (DVector::from_column_slice(cur) - &self.mean_cur)
    }

    pub fn conditional_cov(&self) -> DMatrix<f64> {
        let l = self.conditional.cholesky_factor();
        l * l.transpose()
    }

    /// `ln L(θ_{k−1} | θ_k)`.
    pub fn log_density(&self, prev: &[f64], cur: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(prev) - self.conditional_mean(cur);
        self.conditional.log_pdf_centered(&diff)
    }
}

/// Log-weight increment of one moved sample.
///
/// `log_l_minus_q` is `ln L(θ_{k−1}|θ_k) − ln q(θ_k|θ_{k−1})`, zero for the
/// forward kernel.
pub fn weight_increment(log_target_new: f64, log_target_prev: f64, log_l_minus_q: f64) -> Result<f64> {
    if log_target_new == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if !log_target_prev.is_finite() {
        return Err(Error::Contract(format!(
            "previous sample has log target {log_target_prev} but a finite weight"
        )));
    }
    Ok(log_target_new - log_target_prev + log_l_minus_q)
}

/// Result of a collective weight normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    /// This rank's normalized weights.
    pub weights: Vec<f64>,
    /// `ln Σ w` over all ranks.
    pub log_total: f64,
    /// `1 / Σ w̃²`.
    pub ess: f64,
    /// `(Σw)² / Σw²`, evaluated in the log domain.
    pub l: f64,
}

/// Global log-sum-exp normalization plus ESS. Collective.
pub fn normalize(comm: &mut Communicator, log_weights: &[f64]) -> Result<Normalized> {
    let local_max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max = comm.all_reduce_max(&[local_max])?[0];
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate(format!(
            "all {} sample weights are zero; no sample explains the data",
            log_weights.len() * comm.size()
        )));
    }
    if !max.is_finite() {
        return Err(Error::Numerical(format!("log weight {max} is not finite")));
    }
    let shifted: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let sums = comm.all_reduce_sum(&[shifted.iter().sum(), shifted.iter().map(|s| s * s).sum()])?;
    let (s1, s2) = (sums[0], sums[1]);
    let log_total = max + s1.ln();
    let weights: Vec<f64> = shifted.iter().map(|s| s / s1).collect();
    let sq = comm.all_reduce_sum(&[weights.iter().map(|w| w * w).sum()])?[0];
    let l = (2.0 * s1.ln() - s2.ln()).exp();
    Ok(Normalized {
        weights,
        log_total,
        ess: 1.0 / sq,
        l,
    })
}

/// Recycling constants `c_k = l_k / Σ l`.
pub fn recycling_constants(l: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = l.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("every iteration has zero effective sample size".into()));
    }
    Ok(l.iter().map(|x| x / total).collect())
}

/// `Σ c_k f̃_k`.
pub fn recycle(l: &[f64], estimates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let c = recycling_constants(l)?;
    let dim = estimates.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (ck, f) in c.iter().zip(estimates) {
        for (o, x) in out.iter_mut().zip(f) {
            *o += ck * x;
        }
    }
    Ok(out)
}

/// Shared offset for the `k`-th resampling: drawn on rank 0, then broadcast.
pub fn resampling_offset(comm: &mut Communicator, k: usize) -> Result<f64> {
    let u = if comm.rank() == 0 {
        keyed(comm.root_seed(), Purpose::ResampleOffset, k as u64, 0).gen::<f64>()
    } else {
        0.0
    };
    comm.broadcast(0, u)
}

/// Systematic resampling of this rank's items followed by the weight reset.
/// Returns the new items and the common log weight. Collective.
pub fn resample_step<T: Wire + Clone>(
    comm: &mut Communicator,
    items: Vec<T>,
    normalized: &Normalized,
    k: usize,
) -> Result<(Vec<T>, f64)> {
    let u = resampling_offset(comm, k)?;
    let ncopies = systematic_choice(comm, &normalized.weights, u)?;
    let n_total = normalized.weights.len() * comm.size();
    let items = parallel_redistribute(comm, items, ncopies)?;
    Ok((items, reset_log_weight(normalized.log_total, n_total)))
}

/// Diagnostics of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub ess: f64,
    pub l: f64,
    pub resampled: bool,
    /// `Σ w̃_k θ_k`.
    pub estimate: Vec<f64>,
    /// Recycled estimate over iterations `1..=k`.
    pub recycled: Vec<f64>,
    /// `ln Σ w_k − ln Σ w_{k−1}` (with `Σ w_0 = N`).
    pub log_z_increment: f64,
    pub log_total: f64,
    /// Log total weight after the reset (equal to `log_total` when not resampled).
    pub log_total_after: f64,
    /// ESS after the reset (equal to `ess` when not resampled).
    pub ess_after: f64,
}

#[derive(Debug, Clone)]
pub struct Smc2Output {
    pub param_names: Vec<String>,
    pub recycled: Vec<f64>,
    pub final_estimate: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    /// Sampler-loop wall clock on this rank.
    pub seconds: f64,
    /// Message rounds issued by this rank.
    pub rounds: u64,
}

impl Smc2Output {
    pub fn log_evidence(&self) -> f64 {
        self.iterations.iter().map(|r| r.log_z_increment).sum()
    }
}

/// Runs the sampler on this rank's share of the population. Collective; the
/// output is identical on every rank.
pub fn run_smc2<T: Target + ?Sized>(config: &Smc2Config, target: &T, comm: &mut Communicator) -> Result<Smc2Output> {
    let dim = target.dim();
    config.validate(dim, comm.size())?;
    let proposal = Gaussian::new(DVector::zeros(dim), config.proposal_cov.clone())?;
    let seed = comm.root_seed();
    let n_local = config.n / comm.size();
    let offset = comm.rank() * n_local;
    let ln_n = (config.n as f64).ln();
    let start = Instant::now();
    let rounds_start = comm.rounds();

    // k = 1: importance sampling from the prior.
    let mut samples = Vec::with_capacity(n_local);
    let mut log_weights = Vec::with_capacity(n_local);
    for j in 0..n_local {
        let gi = (offset + j) as u64;
        let theta = target.sample_prior(&mut keyed(seed, Purpose::Prior, 1, gi));
        let (log_prior, log_lik) = evaluate_target(target, &theta, &mut keyed(seed, Purpose::Likelihood, 1, gi));
        if !log_prior.is_finite() || theta.len() != dim {
            return Err(Error::Config(format!(
                "prior draw {theta:?} for sample {gi} has log prior {log_prior}"
            ))
            .at_iteration(1));
        }
        // prior terms cancel against q_1 = prior
        log_weights.push(log_lik);
        samples.push(ThetaSample {
            theta_prev: theta.clone(),
            theta,
            log_prior,
            log_lik,
            log_target_prev: f64::NEG_INFINITY,
        });
    }

    let mut records: Vec<IterationRecord> = Vec::with_capacity(config.k);
    let mut prev_log_total = ln_n;
    let mut prev_weights: Option<Vec<f64>> = None;
    for k in 1..=config.k {
        let step = (|| -> Result<IterationRecord> {
            if k > 1 {
                move_samples(config, target, comm, &proposal, &mut samples, &mut log_weights, prev_weights.as_deref(), k, offset)?;
            }
            let norm = normalize(comm, &log_weights)?;
            let mut local = vec![0.0; dim];
            for (s, w) in samples.iter().zip(&norm.weights) {
                if *w > 0.0 {
                    for (acc, x) in local.iter_mut().zip(&s.theta) {
                        *acc += w * x;
                    }
                }
            }
            let estimate = comm.all_reduce_sum(&local)?;
            let mut l_seq: Vec<f64> = records.iter().map(|r| r.l).collect();
            l_seq.push(norm.l);
            let mut f_seq: Vec<Vec<f64>> = records.iter().map(|r| r.estimate.clone()).collect();
            f_seq.push(estimate.clone());
            let recycled = recycle(&l_seq, &f_seq)?;

            let mut record = IterationRecord {
                k,
                ess: norm.ess,
                l: norm.l,
                resampled: false,
                estimate,
                recycled,
                log_z_increment: norm.log_total - prev_log_total,
                log_total: norm.log_total,
                log_total_after: norm.log_total,
                ess_after: norm.ess,
            };
            prev_log_total = norm.log_total;

            if norm.ess < config.resample_fraction * config.n as f64 {
                let (resampled, reset) = resample_step(comm, std::mem::take(&mut samples), &norm, k)?;
                samples = resampled;
                log_weights = vec![reset; n_local];
                let after = normalize(comm, &log_weights)?;
                record.resampled = true;
                record.log_total_after = after.log_total;
                record.ess_after = after.ess;
                prev_weights = Some(after.weights);
            } else {
                prev_weights = Some(norm.weights);
            }
            Ok(record)
        })();
        records.push(step.map_err(|e| e.at_iteration(k))?);
    }

    let last = records.last().expect("K >= 1");
    Ok(Smc2Output {
        param_names: target.param_names(),
        recycled: last.recycled.clone(),
        final_estimate: last.estimate.clone(),
        seconds: start.elapsed().as_secs_f64(),
        rounds: comm.rounds() - rounds_start,
        iterations: records,
    })
}

#[allow(clippy::too_many_arguments)]
fn move_samples<T: Target + ?Sized>(
    config: &Smc2Config,
    target: &T,
    comm: &mut Communicator,
    proposal: &Gaussian,
    samples: &mut [ThetaSample],
    log_weights: &mut [f64],
    prev_weights: Option<&[f64]>,
    k: usize,
    offset: usize,
) -> Result<()> {
    let seed = comm.root_seed();
    for (j, s) in samples.iter_mut().enumerate() {
        let gi = (offset + j) as u64;
        let theta = propose(&s.theta, proposal, &mut keyed(seed, Purpose::Proposal, k as u64, gi));
        let (log_prior, log_lik) = evaluate_target(target, &theta, &mut keyed(seed, Purpose::Likelihood, k as u64, gi));
        s.log_target_prev = s.log_target();
        s.theta_prev = std::mem::replace(&mut s.theta, theta);
        s.log_prior = log_prior;
        s.log_lik = log_lik;
    }

    let kernel = match config.lkernel {
        LKernel::ForwardSymmetric => None,
        LKernel::ApproxOptimalGaussian => {
            let pairs: Vec<(&[f64], &[f64])> = samples.iter().map(|s| (s.theta_prev.as_slice(), s.theta.as_slice())).collect();
            let weights = if config.weighted_lkernel_fit { prev_weights } else { None };
            Some(ConditionalKernel::from_fit(&fit_gaussian_joint(comm, &pairs, weights)?)?)
        }
    };

    for (s, lw) in samples.iter().zip(log_weights.iter_mut()) {
        if *lw == f64::NEG_INFINITY {
            continue;
        }
        let correction = match &kernel {
            None => 0.0,
            Some(kernel) => {
                let step: Vec<f64> = s.theta.iter().zip(&s.theta_prev).map(|(a, b)| a - b).collect();
                kernel.log_density(&s.theta_prev, &s.theta) - proposal.log_pdf(&step)
            }
        };
        *lw += weight_increment(s.log_target(), s.log_target_prev, correction)?;
    }
    Ok(())
}

/// Runs the sampler on `ranks` in-process workers and returns rank 0's output.
pub fn run_smc2_parallel<T: Target + ?Sized>(config: &Smc2Config, target: &T, ranks: usize, seed: u64) -> Result<Smc2Output> {
    config.validate(target.dim(), ranks)?;
    let mut outputs = spawn_group(ranks, seed, |comm| run_smc2(config, target, comm))?;
    Ok(outputs.swap_remove(0))
}

/// Convenience wrapper for a state-space model with a particle-filter target.
pub fn run_smc2_model<M: StateSpaceModel>(
    config: &Smc2Config,
    model: &M,
    data: &Dataset,
    pf: PfConfig,
    ranks: usize,
    seed: u64,
) -> Result<Smc2Output> {
    let target = PfTarget::new(model, data, pf)?;
    run_smc2_parallel(config, &target, ranks, seed)
}

/// Writes `k,ess,l_k,resampled,estimate_<name>...,logZ_increment`.
pub fn write_diagnostics<W: std::io::Write>(out: &Smc2Output, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["k".to_string(), "ess".into(), "l_k".into(), "resampled".into()];
    header.extend(out.param_names.iter().map(|n| format!("estimate_{n}")));
    header.push("logZ_increment".into());
    let csv_err = |e: csv::Error| Error::Numerical(format!("diagnostics CSV: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in &out.iterations {
        let mut row = vec![
            r.k.to_string(),
            r.ess.to_string(),
            r.l.to_string(),
            (r.resampled as u8).to_string(),
        ];
        row.extend(r.estimate.iter().map(f64::to_string));
        row.push(r.log_z_increment.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Numerical(format!("diagnostics CSV: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comms::spawn_group;
    use approx::assert_relative_eq;

    fn single<R: Send>(f: impl Fn(&mut Communicator) -> Result<R> + Sync) -> R {
        spawn_group(1, 0, f).unwrap().remove(0)
    }

    fn toy() -> ConjugateGaussian {
        ConjugateGaussian {
            prior_mean: vec![0.0, 1.0],
            prior_sd: 1.0,
            noise_sd: 1.0,
            observations: vec![vec![0.5, 0.2], vec![0.9, 0.4], vec![0.1, 0.7]],
        }
    }

    #[test]
    fn out_of_support_skips_likelihood() {
        struct Counting(std::sync::atomic::AtomicUsize);
        impl Target for Counting {
            fn dim(&self) -> usize {
                2
            }
            fn log_prior(&self, t: &[f64]) -> f64 {
                if t.iter().all(|x| (0.0..=1.0).contains(x)) { 0.0 } else { f64::NEG_INFINITY }
            }
            fn sample_prior(&self, rng: &mut StreamRng) -> Vec<f64> {
                vec![rng.gen(), rng.gen()]
            }
            fn log_likelihood(&self, _: &[f64], _: &mut StreamRng) -> f64 {
                self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                -1.0
            }
        }
        let t = Counting(Default::default());
        let mut rng = keyed(0, Purpose::Likelihood, 1, 0);
        assert_eq!(evaluate_target(&t, &[1.2, 0.3], &mut rng), (f64::NEG_INFINITY, f64::NEG_INFINITY));
        assert_eq!(t.0.load(std::sync::atomic::Ordering::SeqCst), 0);
        assert_eq!(evaluate_target(&t, &[0.2, 0.3], &mut rng), (0.0, -1.0));
    }

    #[test]
    fn proposal_marginal_sd() {
        let g = Gaussian::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.1).unwrap();
        let mut rng = keyed(1, Purpose::Proposal, 2, 0);
        let draws = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..draws {
            let x = propose(&[0.0, 0.0], &g, &mut rng);
            sq[0] += x[0] * x[0];
            sq[1] += x[1] * x[1];
        }
        for s in sq {
            let sd = (s / draws as f64).sqrt();
            // sd of the sample sd ≈ σ / √(2n)
            assert!((sd - 0.1f64.sqrt()).abs() < 4.0 * 0.1f64.sqrt() / (2.0 * draws as f64).sqrt(), "{sd}");
        }
        let tiny = Gaussian::new(DVector::zeros(2), DMatrix::identity(2, 2) * 1e-300).unwrap();
        let x = propose(&[0.3, 0.6], &tiny, &mut rng);
        assert_relative_eq!(x[0], 0.3, epsilon = 1e-140);
        assert_relative_eq!(x[1], 0.6, epsilon = 1e-140);
    }

    #[test]
    fn increment_examples() {
        assert_relative_eq!(weight_increment(2f64.ln() - 3.0, -3.0, 0.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(weight_increment(-4.0, -4.0, 0.0).unwrap(), 0.0);
        assert_eq!(weight_increment(f64::NEG_INFINITY, -4.0, 0.0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(weight_increment(-1.0, f64::NEG_INFINITY, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn two_point_fit_uses_population_moments() {
        let fit = single(|c| fit_gaussian_joint(c, &[(&[0.0], &[0.0]), (&[2.0], &[2.0])], None));
        assert_eq!(fit.mean_prev[0], 1.0);
        assert_eq!(fit.mean_cur[0], 1.0);
        assert!(fit.cov.iter().all(|&x| x == 1.0));

        let degenerate = single(|c| fit_gaussian_joint(c, &[(&[0.5], &[0.5]), (&[0.5], &[0.5])], None));
        assert!(degenerate.cov.iter().all(|&x| x == 0.0));
        assert!(ConditionalKernel::from_fit(&degenerate).is_ok());
        assert!(single(|c| Ok(fit_gaussian_joint(c, &[(&[0.5], &[0.5])], None).is_err())));
    }

    #[test]
    fn fit_is_rank_invariant() {
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..16)
            .map(|i| {
                let x = (i as f64 * 0.37).sin();
                (vec![x, x * x], vec![x + 0.1 * (i as f64).cos(), 0.3 * x])
            })
            .collect();
        let fits: Vec<JointFit> = [1usize, 2, 4]
            .iter()
            .map(|&p| {
                let n = 16 / p;
                spawn_group(p, 0, |c| {
                    let r = c.rank();
                    let mine: Vec<(&[f64], &[f64])> = pairs[r * n..(r + 1) * n].iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
                    fit_gaussian_joint(c, &mine, None)
                })
                .unwrap()
                .remove(0)
            })
            .collect();
        for f in &fits[1..] {
            assert!((&f.cov - &fits[0].cov).abs().max() < 1e-12);
            assert!((&f.mean_prev - &fits[0].mean_prev).abs().max() < 1e-12);
        }
    }

    fn fit_1d(cov: [[f64; 2]; 2]) -> JointFit {
        JointFit {
            mean_prev: DVector::from_element(1, 0.0),
            mean_cur: DVector::from_element(1, 0.0),
            cov: DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]]),
        }
    }

    #[test]
    fn scalar_conditioning_example() {
        let kernel = ConditionalKernel::from_fit(&fit_1d([[1.0, 0.5], [0.5, 1.0]])).unwrap();
        assert_relative_eq!(kernel.conditional_mean(&[1.0])[0], 0.5, epsilon = 1e-7);
        assert_relative_eq!(kernel.conditional_cov()[(0, 0)], 0.75, epsilon = 1e-7);
        // oracle: textbook scalar formula with the same regularization
        let s_cc = 1.0 + 1e-8;
        let var: f64 = 1.0 - 0.25 / s_cc;
        let var = var + (1e-8 * var).max(1e-12);
        let mean = 0.5 / s_cc;
        assert_relative_eq!(kernel.log_density(&[0.2], &[1.0]), normal_log_pdf(0.2, mean, var), epsilon = 1e-12);
        let mode = kernel.conditional_mean(&[1.0])[0];
        assert_relative_eq!(
            kernel.log_density(&[mode], &[1.0]),
            -0.5 * crate::numerics::LN_2PI - 0.5 * var.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn uncorrelated_blocks_give_the_marginal() {
        let kernel = ConditionalKernel::from_fit(&fit_1d([[2.0, 0.0], [0.0, 3.0]])).unwrap();
        let var = 2.0 + 2e-8;
        for (prev, cur) in [(0.3, -5.0), (0.3, 7.0), (-1.0, 0.0)] {
            assert_eq!(kernel.log_density(&[prev], &[cur]), kernel.log_density(&[prev], &[0.0]));
            assert_relative_eq!(kernel.log_density(&[prev], &[cur]), normal_log_pdf(prev, 0.0, var), epsilon = 1e-14);
        }
    }

    #[test]
    fn kernel_integrates_to_one() {
        let kernel = ConditionalKernel::from_fit(&fit_1d([[1.0, 0.6], [0.6, 2.0]])).unwrap();
        let (lo, hi, steps) = (-12.0, 12.0, 200_000);
        let h = (hi - lo) / steps as f64;
        // composite Simpson
        let f = |x: f64| kernel.log_density(&[x], &[0.7]).exp();
        let mut acc = f(lo) + f(hi);
        for i in 1..steps {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
        }
        assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_examples() {
        let n = single(|c| normalize(c, &[0.0; 4]));
        assert_eq!(n.weights, vec![0.25; 4]);
        assert_eq!(n.ess, 4.0);
        assert_relative_eq!(n.l, 4.0, epsilon = 1e-12);
        let n = single(|c| normalize(c, &[2f64.ln(), 0.0, 0.0]));
        for (w, e) in n.weights.iter().zip([0.5, 0.25, 0.25]) {
            assert_relative_eq!(*w, e, epsilon = 1e-15);
        }
        let shifted = single(|c| normalize(c, &[2f64.ln() + 700.0, 700.0, 700.0]));
        for (a, b) in shifted.weights.iter().zip(&n.weights) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12);
        }
        let ws = [0.5f64, 0.25, 0.125, 0.125];
        let n = single(|c| normalize(c, &ws.map(f64::ln)));
        assert_relative_eq!(n.ess, 32.0 / 11.0, epsilon = 1e-12);
        assert_relative_eq!(n.l, 32.0 / 11.0, epsilon = 1e-12);
        let one_hot = single(|c| normalize(c, &[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert_eq!((one_hot.ess, one_hot.l), (1.0, 1.0));
        let err = spawn_group(1, 0, |c| normalize(c, &[f64::NEG_INFINITY; 3])).unwrap_err();
        assert!(matches!(err.root_cause(), Error::Degenerate(_)));
    }

    #[test]
    fn recycling_examples() {
        assert_eq!(recycling_constants(&[1.0, 3.0]).unwrap(), vec![0.25, 0.75]);
        assert_eq!(recycle(&[4.0, 4.0], &[vec![0.0, 1.0], vec![1.0, 3.0]]).unwrap(), vec![0.5, 2.0]);
        assert_eq!(recycle(&[2.5], &[vec![0.3]]).unwrap(), vec![0.3]);
        assert!(recycle(&[0.0, 0.0], &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn single_iteration_is_self_normalized_importance_sampling() {
        let t = toy();
        let cfg = Smc2Config { lkernel: LKernel::ForwardSymmetric, ..Smc2Config::new(64, 1, 2) };
        let out = run_smc2_parallel(&cfg, &t, 1, 5).unwrap();
        // oracle: redraw the same prior samples and weight them directly
        let thetas: Vec<Vec<f64>> = (0..64).map(|i| t.sample_prior(&mut keyed(5, Purpose::Prior, 1, i))).collect();
        let lw: Vec<f64> = thetas.iter().map(|th| t.log_likelihood(th, &mut keyed(5, Purpose::Likelihood, 1, 0))).collect();
        let w = crate::numerics::normalize_log_weights(&lw).unwrap();
        for d in 0..2 {
            let expected: f64 = thetas.iter().zip(&w).map(|(th, w)| w * th[d]).sum();
            assert_relative_eq!(out.recycled[d], expected, epsilon = 1e-12);
            assert_eq!(out.recycled[d], out.final_estimate[d]);
        }
        assert_eq!(out.iterations.len(), 1);
    }

    #[test]
    fn resampling_preserves_total_and_resets_ess() {
        let t = toy();
        for lkernel in [LKernel::ForwardSymmetric, LKernel::ApproxOptimalGaussian] {
            let cfg = Smc2Config { lkernel, ..Smc2Config::new(64, 6, 2) };
            let out = run_smc2_parallel(&cfg, &t, 2, 11).unwrap();
            assert!(out.iterations.iter().any(|r| r.resampled));
            for r in &out.iterations {
                assert!((r.log_total_after - r.log_total).abs() < 1e-12, "{r:?}");
                if r.resampled {
                    assert_eq!(r.ess_after, 64.0);
                }
                assert!(r.l >= 1.0 - 1e-9 && r.l <= 64.0 + 1e-9);
            }
            let c = recycling_constants(&out.iterations.iter().map(|r| r.l).collect::<Vec<_>>()).unwrap();
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_kernel_increment_is_target_ratio() {
        // with a vanishing step every target ratio is 1
        let t = toy();
        let cfg = Smc2Config {
            lkernel: LKernel::ForwardSymmetric,
            proposal_cov: DMatrix::identity(2, 2) * 1e-300,
            resample_fraction: 1e-9,
            ..Smc2Config::new(16, 3, 2)
        };
        let out = run_smc2_parallel(&cfg, &t, 1, 3).unwrap();
        for r in &out.iterations[1..] {
            assert!(r.log_z_increment.abs() < 1e-12);
            for (a, b) in r.estimate.iter().zip(&out.iterations[0].estimate) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rank_count_does_not_change_results() {
        let t = toy();
        let cfg = Smc2Config::new(32, 5, 2);
        let base = run_smc2_parallel(&cfg, &t, 1, 9).unwrap();
        for p in [2, 4] {
            let out = run_smc2_parallel(&cfg, &t, p, 9).unwrap();
            for (a, b) in out.iterations.iter().zip(&base.iterations) {
                assert!((a.ess - b.ess).abs() < 1e-12 && (a.l - b.l).abs() < 1e-12);
                assert_eq!(a.resampled, b.resampled);
            }
            for (a, b) in out.recycled.iter().zip(&base.recycled) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagnostics_csv_layout() {
        let out = run_smc2_parallel(&Smc2Config::new(8, 2, 2), &toy(), 1, 1).unwrap();
        let mut buf = Vec::new();
        write_diagnostics(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "k,ess,l_k,resampled,estimate_theta0,estimate_theta1,logZ_increment");
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn config_validation() {
        let t = toy();
        assert!(run_smc2_parallel(&Smc2Config::new(12, 2, 2), &t, 1, 0).is_err());
        assert!(run_smc2_parallel(&Smc2Config::new(8, 0, 2), &t, 1, 0).is_err());
        assert!(run_smc2_parallel(&Smc2Config::new(8, 1, 3), &t, 1, 0).is_err());
        let bad = Smc2Config { proposal_cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), ..Smc2Config::new(8, 1, 2) };
        assert!(matches!(run_smc2_parallel(&bad, &t, 1, 0), Err(Error::Config(_))));
        assert!(LKernel::parse("backward").is_err());
        assert_eq!(LKernel::parse("forward").unwrap(), LKernel::ForwardSymmetric);
    }
}
