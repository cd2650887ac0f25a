//! Particle-marginal Metropolis-Hastings baseline.
//!
//! A single random-walk chain over θ. The proposed state is scored with a
//! fresh likelihood estimate; the current state's estimate is cached and
//! reused until a proposal is accepted.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Gaussian;
use crate::rng::{keyed, Purpose};
use crate::smc2::{evaluate_target, propose, Target};

#[derive(Debug, Clone)]
pub struct PmcmcConfig {
    /// Chain length, including the initial state.
    pub m: usize,
    pub proposal_cov: DMatrix<f64>,
    pub max_init_attempts: usize,
}

impl PmcmcConfig {
    pub fn new(m: usize, dim: usize) -> Self {
        PmcmcConfig {
            m,
            proposal_cov: DMatrix::identity(dim, dim) * 0.1,
            max_init_attempts: 50,
        }
    }
}

/// Metropolis-Hastings acceptance with probability
/// `min(1, exp(new − old + log_q_ratio))`.
pub fn mh_accept<R: Rng + ?Sized>(log_target_new: f64, log_target_old: f64, log_q_ratio: f64, rng: &mut R) -> bool {
    if log_target_new == f64::NEG_INFINITY {
        return false;
    }
    let log_alpha = log_target_new - log_target_old + log_q_ratio;
    let u: f64 = rng.gen();
    log_alpha >= 0.0 || u.ln() < log_alpha
}

#[derive(Debug, Clone, Default)]
pub struct Chain {
    pub draws: Vec<Vec<f64>>,
    pub log_targets: Vec<f64>,
    pub accepted: Vec<bool>,
    pub accept_count: usize,
    pub burn_in: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accept_count as f64 / (self.len().max(2) - 1) as f64
    }

    /// Mean of the draws after burn-in.
    pub fn estimate(&self) -> Vec<f64> {
        mean_of(&self.draws[self.burn_in..])
    }

    /// Row `m` is the mean of the trailing `⌈(m+1)/2⌉` draws of `0..=m`,
    /// i.e. the estimate a chain stopped at `m` would report.
    pub fn running_means(&self) -> Vec<Vec<f64>> {
        let dim = self.draws.first().map_or(0, Vec::len);
        let mut prefix = vec![vec![0.0; dim]];
        for d in &self.draws {
            let last = prefix.last().expect("non-empty");
            prefix.push(last.iter().zip(d).map(|(a, b)| a + b).collect());
        }
        (0..self.len())
            .map(|m| {
                let from = m.div_ceil(2);
                let count = (m + 1 - from) as f64;
                prefix[m + 1].iter().zip(&prefix[from]).map(|(hi, lo)| (hi - lo) / count).collect()
            })
            .collect()
    }
}

fn mean_of(draws: &[Vec<f64>]) -> Vec<f64> {
    let dim = draws.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; dim];
    for d in draws {
        for (a, x) in acc.iter_mut().zip(d) {
            *a += x;
        }
    }
    acc.iter().map(|a| a / draws.len() as f64).collect()
}

#[derive(Debug, Clone)]
pub struct PmcmcOutput {
    pub param_names: Vec<String>,
    pub estimate: Vec<f64>,
    pub chain: Chain,
    /// Sampler wall clock.
    pub seconds: f64,
    /// Likelihood estimates computed, initialization included.
    pub likelihood_evaluations: usize,
}

/// Runs one chain of length `config.m`.
pub fn run_pmcmc<T: Target + ?Sized>(config: &PmcmcConfig, target: &T, seed: u64) -> Result<PmcmcOutput> {
    let dim = target.dim();
    if config.m < 2 {
        return Err(Error::Config(format!("chain length must be at least 2, got {}", config.m)));
    }
    if config.proposal_cov.nrows() != dim {
        return Err(Error::Config(format!(
            "proposal covariance is {}x{}, parameters have dimension {dim}",
            config.proposal_cov.nrows(),
            config.proposal_cov.ncols()
        )));
    }
    let proposal = Gaussian::new(DVector::zeros(dim), config.proposal_cov.clone())
        .map_err(|e| Error::Config(format!("proposal covariance: {e}")))?;
    let start = Instant::now();
    let mut evaluations = 0;

    let mut current = None;
    for attempt in 0..config.max_init_attempts as u64 {
        let theta = target.sample_prior(&mut keyed(seed, Purpose::Prior, 0, attempt));
        let (log_prior, log_lik) = evaluate_target(target, &theta, &mut keyed(seed, Purpose::Likelihood, 0, attempt));
        if log_prior.is_finite() {
            evaluations += 1;
        }
        let log_target = log_prior + log_lik;
        if log_target.is_finite() {
            current = Some((theta, log_target));
            break;
        }
    }
    let (mut theta, mut log_target) = current.ok_or_else(|| {
        Error::Degenerate(format!(
            "no prior draw with a finite target in {} attempts",
            config.max_init_attempts
        ))
    })?;

    let mut chain = Chain {
        draws: Vec::with_capacity(config.m),
        log_targets: Vec::with_capacity(config.m),
        accepted: Vec::with_capacity(config.m),
        accept_count: 0,
        burn_in: config.m / 2,
    };
    chain.draws.push(theta.clone());
    chain.log_targets.push(log_target);
    chain.accepted.push(true);

    for m in 1..config.m as u64 {
        let candidate = propose(&theta, &proposal, &mut keyed(seed, Purpose::Chain, m, 0));
        let (log_prior, log_lik) = evaluate_target(target, &candidate, &mut keyed(seed, Purpose::Likelihood, m, 0));
        if log_prior.is_finite() {
            evaluations += 1;
        }
        let candidate_target = if log_prior.is_finite() { log_prior + log_lik } else { f64::NEG_INFINITY };
        let accept = mh_accept(candidate_target, log_target, 0.0, &mut keyed(seed, Purpose::Chain, m, 1));
        if accept {
            theta = candidate;
            log_target = candidate_target;
            chain.accept_count += 1;
        }
        chain.draws.push(theta.clone());
        chain.log_targets.push(log_target);
        chain.accepted.push(accept);
    }

    Ok(PmcmcOutput {
        param_names: target.param_names(),
        estimate: chain.estimate(),
        chain,
        seconds: start.elapsed().as_secs_f64(),
        likelihood_evaluations: evaluations,
    })
}

/// Writes `m,<name>...,log_target,accepted`, one row per chain state.
pub fn write_chain<W: std::io::Write>(out: &PmcmcOutput, writer: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Numerical(format!("chain CSV: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["m".to_string()];
    header.extend(out.param_names.iter().cloned());
    header.extend(["log_target".to_string(), "accepted".to_string()]);
    w.write_record(&header).map_err(csv_err)?;
    let c = &out.chain;
    for m in 0..c.len() {
        let mut row = vec![m.to_string()];
        row.extend(c.draws[m].iter().map(f64::to_string));
        row.push(c.log_targets[m].to_string());
        row.push((c.accepted[m] as u8).to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Numerical(format!("chain CSV: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use crate::smc2::ConjugateGaussian;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn acceptance_examples() {
        let mut rng = keyed(0, Purpose::Validation, 0, 0);
        assert!((0..1000).all(|_| mh_accept(-3.0, -3.0, 0.0, &mut rng)));
        assert!((0..1000).all(|_| !mh_accept(f64::NEG_INFINITY, -3.0, 0.0, &mut rng)));
        let trials = 100_000;
        let hits = (0..trials).filter(|_| mh_accept(0.5f64.ln(), 0.0, 0.0, &mut rng)).count() as f64;
        let sd = (0.25 / trials as f64).sqrt();
        assert!((hits / trials as f64 - 0.5).abs() < 4.0 * sd);
    }

    struct Counted<T> {
        inner: T,
        calls: AtomicUsize,
    }

    impl<T: Target> Target for Counted<T> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn log_prior(&self, t: &[f64]) -> f64 {
            self.inner.log_prior(t)
        }
        fn sample_prior(&self, rng: &mut StreamRng) -> Vec<f64> {
            self.inner.sample_prior(rng)
        }
        fn log_likelihood(&self, t: &[f64], rng: &mut StreamRng) -> f64 {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.log_likelihood(t, rng)
        }
    }

    fn toy() -> ConjugateGaussian {
        ConjugateGaussian {
            prior_mean: vec![0.0],
            prior_sd: 2.0,
            noise_sd: 1.0,
            observations: vec![vec![1.0], vec![1.4], vec![0.6], vec![1.2]],
        }
    }

    #[test]
    fn one_likelihood_per_proposal() {
        let t = Counted { inner: toy(), calls: AtomicUsize::new(0) };
        let out = run_pmcmc(&PmcmcConfig::new(500, 1), &t, 3).unwrap();
        // never re-evaluated on rejection: one call for the start, one per proposal
        assert_eq!(t.calls.load(Ordering::SeqCst), 500);
        assert_eq!(out.likelihood_evaluations, 500);
        assert!(out.chain.accept_count > 0 && out.chain.accept_count < 499);
        for m in 1..out.chain.len() {
            if !out.chain.accepted[m] {
                assert_eq!(out.chain.log_targets[m], out.chain.log_targets[m - 1]);
                assert_eq!(out.chain.draws[m], out.chain.draws[m - 1]);
            }
        }
    }

    #[test]
    fn burn_in_arithmetic() {
        for m in [2usize, 3, 10, 11] {
            let out = run_pmcmc(&PmcmcConfig::new(m, 1), &toy(), 1).unwrap();
            let kept = &out.chain.draws[m - m.div_ceil(2)..];
            assert_eq!(kept.len(), m.div_ceil(2));
            let mean = kept.iter().map(|d| d[0]).sum::<f64>() / kept.len() as f64;
            assert!((out.estimate[0] - mean).abs() < 1e-15);
            let trace = out.chain.running_means();
            assert_eq!(trace.len(), m);
            assert!((trace[m - 1][0] - out.estimate[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_step_never_moves() {
        let cfg = PmcmcConfig { proposal_cov: DMatrix::identity(1, 1) * 1e-300, ..PmcmcConfig::new(50, 1) };
        let out = run_pmcmc(&cfg, &toy(), 4).unwrap();
        assert!((out.estimate[0] - out.chain.draws[0][0]).abs() < 1e-140);
    }

    #[test]
    fn same_seed_same_chain() {
        let a = run_pmcmc(&PmcmcConfig::new(200, 1), &toy(), 8).unwrap();
        let b = run_pmcmc(&PmcmcConfig::new(200, 1), &toy(), 8).unwrap();
        assert_eq!(a.chain.draws, b.chain.draws);
        let c = run_pmcmc(&PmcmcConfig::new(200, 1), &toy(), 9).unwrap();
        assert_ne!(a.chain.draws, c.chain.draws);
    }

    #[test]
    fn recovers_conjugate_posterior_mean() {
        let t = toy();
        let cfg = PmcmcConfig { proposal_cov: DMatrix::identity(1, 1) * 0.5, ..PmcmcConfig::new(40_000, 1) };
        let out = run_pmcmc(&cfg, &t, 12).unwrap();
        let truth = t.posterior_mean()[0];
        // random-walk chains are correlated; allow an effective size of M/20
        let m_eff = 40_000.0 / 2.0 / 20.0;
        assert!((out.estimate[0] - truth).abs() < 3.0 * t.posterior_sd() / f64::sqrt(m_eff));
        assert!(out.chain.acceptance_rate() > 0.0 && out.chain.acceptance_rate() < 1.0);
    }

    #[test]
    fn unreachable_support_fails_initialization() {
        struct Nowhere;
        impl Target for Nowhere {
            fn dim(&self) -> usize {
                1
            }
            fn log_prior(&self, _: &[f64]) -> f64 {
                0.0
            }
            fn sample_prior(&self, _: &mut StreamRng) -> Vec<f64> {
                vec![0.0]
            }
            fn log_likelihood(&self, _: &[f64], _: &mut StreamRng) -> f64 {
                f64::NEG_INFINITY
            }
        }
        assert!(matches!(run_pmcmc(&PmcmcConfig::new(10, 1), &Nowhere, 0), Err(Error::Degenerate(_))));
        assert!(run_pmcmc(&PmcmcConfig::new(1, 1), &toy(), 0).is_err());
    }

    #[test]
    fn chain_csv_has_one_row_per_state() {
        let out = run_pmcmc(&PmcmcConfig::new(7, 1), &toy(), 2).unwrap();
        let mut buf = Vec::new();
        write_chain(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "m,theta0,log_target,accepted");
        assert_eq!(text.lines().count(), 8);
    }
}
