//! Self-check suites run by `smc2 validate`.
//!
//! Each suite draws randomized cases from a seeded stream, compares the
//! implementation against an independent oracle or invariant, and reports the
//! first counterexample it finds.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::comms::spawn_group;
use crate::error::{Error, Result};
use crate::pf::{run_pf, PfConfig};
use crate::pmcmc::{run_pmcmc, PmcmcConfig};
use crate::resample::{check_workload, parallel_redistribute, sequential_redistribute, systematic_choice};
use crate::rng::{keyed, Purpose, StreamRng};
use crate::smc2::{recycling_constants, run_smc2_parallel, ConjugateGaussian, Smc2Config};
use crate::ssm::{kalman_loglik, lg_model, simulate};

pub const SUITES: &[&str] = &["comms", "choice", "redistribution", "pf", "smc2", "pmcmc"];

/// Deliberate corruption used to check that a suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Drop one copy after the choice step, so `Σ ncopies = N − 1`.
    NcopiesSum,
}

impl Fault {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ncopies-sum" => Ok(Fault::NcopiesSum),
            other => Err(Error::Config(format!("unknown fault '{other}' (expected ncopies-sum)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub passed: usize,
    /// `(seed, N, P, message)` of the first failing case.
    pub first_failure: Option<(u64, usize, usize, String)>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport {
            name: name.into(),
            cases: 0,
            passed: 0,
            first_failure: None,
        }
    }

    fn record(&mut self, seed: u64, n: usize, p: usize, outcome: Result<()>) {
        self.cases += 1;
        match outcome {
            Ok(()) => self.passed += 1,
            Err(e) => {
                if self.first_failure.is_none() {
                    self.first_failure = Some((seed, n, p, e.to_string()));
                }
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.passed == self.cases
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValidateOptions {
    pub cases: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

pub fn run_suite(name: &str, opts: &ValidateOptions) -> Result<SuiteReport> {
    match name {
        "comms" => Ok(comms_suite(opts)),
        "choice" => Ok(choice_suite(opts)),
        "redistribution" => Ok(redistribution_suite(opts)),
        "pf" => Ok(pf_suite(opts)),
        "smc2" => Ok(smc2_suite(opts)),
        "pmcmc" => Ok(pmcmc_suite(opts)),
        other => Err(Error::Config(format!(
            "unknown suite '{other}' (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

fn case_rng(opts: &ValidateOptions, case: usize) -> StreamRng {
    keyed(opts.seed, Purpose::Validation, case as u64, 0)
}

/// Random `(N, P)` with `N ∈ {8, …, 1024}` and `P ∈ {1, 2, 4, 8}`.
fn random_shape(rng: &mut StreamRng) -> (usize, usize) {
    (1usize << rng.gen_range(3..=10), 1usize << rng.gen_range(0..=3))
}

/// Heavy-tailed normalized weights: many tiny, a few dominant.
pub fn random_weights(n: usize, rng: &mut StreamRng) -> Vec<f64> {
    let spread: f64 = rng.gen_range(0.0..4.0);
    let raw: Vec<f64> = (0..n).map(|_| (spread * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

fn choice_on(weights: &[f64], u: f64, p: usize) -> Result<Vec<usize>> {
    let n = weights.len() / p;
    Ok(spawn_group(p, 0, |c| {
        let r = c.rank();
        systematic_choice(c, &weights[r * n..(r + 1) * n], u)
    })?
    .concat())
}

fn comms_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut report = SuiteReport::new("comms");
    for case in 0..opts.cases.min(64) {
        let mut rng = case_rng(opts, case);
        let p = 1usize << rng.gen_range(0..=3);
        let values: Vec<u64> = (0..p).map(|_| rng.gen_range(0..1000)).collect();
        let outcome = (|| -> Result<()> {
            let out = spawn_group(p, 0, |c| {
                let mine = values[c.rank()];
                let sum = c.all_reduce_sum(&[mine as f64])?[0];
                let (prefix, total) = c.exclusive_scan_with_total(mine)?;
                let root = c.broadcast(p - 1, mine)?;
                let all = c.all_gather(mine)?;
                Ok((sum, prefix, total, root, all))
            })?;
            let total: u64 = values.iter().sum();
            for (r, (sum, prefix, t, root, all)) in out.into_iter().enumerate() {
                let expected_prefix: u64 = values[..r].iter().sum();
                if sum != total as f64 || t != total || prefix != expected_prefix || root != values[p - 1] || all != values {
                    return Err(Error::Collective(format!("rank {r} disagrees with the sequential reference")));
                }
            }
            Ok(())
        })();
        report.record(opts.seed + case as u64, 0, p, outcome);
    }
    report
}

fn choice_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut report = SuiteReport::new("choice");
    for case in 0..opts.cases {
        let mut rng = case_rng(opts, case);
        let (n, p) = random_shape(&mut rng);
        let w = random_weights(n, &mut rng);
        let u: f64 = rng.gen();
        let outcome = (|| -> Result<()> {
            let mut ncopies = choice_on(&w, u, p)?;
            if opts.fault == Some(Fault::NcopiesSum) {
                if let Some(c) = ncopies.iter_mut().find(|c| **c > 0) {
                    *c -= 1;
                }
            }
            check_workload(&ncopies)?;
            // each count is the floor or ceiling of N w̃ shifted by u
            for (i, (&c, wi)) in ncopies.iter().zip(&w).enumerate() {
                let expected = n as f64 * wi;
                if (c as f64 - expected).abs() >= 1.0 + 1e-9 {
                    return Err(Error::Contract(format!(
                        "ncopies[{i}] = {c} is more than one away from N·w = {expected}"
                    )));
                }
            }
            if p > 1 && choice_on(&w, u, 1)? != ncopies {
                return Err(Error::Contract("choice depends on the number of ranks".into()));
            }
            Ok(())
        })();
        report.record(opts.seed + case as u64, n, p, outcome);
    }
    report
}

fn redistribution_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut report = SuiteReport::new("redistribution");
    for case in 0..opts.cases {
        let mut rng = case_rng(opts, case);
        let (n, p) = random_shape(&mut rng);
        let w = random_weights(n, &mut rng);
        let u: f64 = rng.gen();
        let outcome = (|| -> Result<()> {
            let ncopies = choice_on(&w, u, 1)?;
            let items: Vec<u64> = (0..n as u64).collect();
            let expected = sequential_redistribute(&items, &ncopies)?;
            let local = n / p;
            let got = spawn_group(p, 0, |c| {
                let r = c.rank();
                parallel_redistribute(c, items[r * local..(r + 1) * local].to_vec(), ncopies[r * local..(r + 1) * local].to_vec())
            })?
            .concat();
            match got.iter().zip(&expected).position(|(a, b)| a != b) {
                None if got.len() == expected.len() => Ok(()),
                None => Err(Error::Contract(format!("output has {} items, expected {}", got.len(), expected.len()))),
                Some(i) => Err(Error::Contract(format!(
                    "slot {i} holds item {} but the sequential oracle has {}",
                    got[i], expected[i]
                ))),
            }
        })();
        report.record(opts.seed + case as u64, n, p, outcome);
    }
    report
}

fn pf_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut report = SuiteReport::new("pf");
    let model = lg_model(0.9, 1.0, 1.0).expect("valid parameters");
    for case in 0..opts.cases.clamp(1, 5) {
        let seed = opts.seed + case as u64;
        let outcome = (|| -> Result<()> {
            let data = simulate(&model, &[0.9], 20, seed)?;
            let exact = kalman_loglik(0.9, 1.0, 1.0, &data.y);
            let cfg = PfConfig::new(1000)?;
            let runs = 20;
            let mean = (0..runs)
                .map(|r| run_pf(&model, &data, &[0.9], &cfg, &mut keyed(seed, Purpose::Likelihood, case as u64, r)))
                .sum::<f64>()
                / runs as f64;
            if (mean - exact).abs() > 0.01 * exact.abs() {
                return Err(Error::Numerical(format!("mean PF log-likelihood {mean} vs Kalman {exact}")));
            }
            Ok(())
        })();
        report.record(seed, 1000, 1, outcome);
    }
    report
}

fn toy_target(rng: &mut StreamRng) -> ConjugateGaussian {
    ConjugateGaussian {
        prior_mean: vec![0.0, 0.5],
        prior_sd: 1.0,
        noise_sd: 0.5,
        observations: (0..5).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(),
    }
}

fn smc2_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut report = SuiteReport::new("smc2");
    for case in 0..opts.cases.clamp(1, 5) {
        let seed = opts.seed + case as u64;
        let target = toy_target(&mut case_rng(opts, case));
        let cfg = Smc2Config::new(64, 5, 2);
        let outcome = (|| -> Result<()> {
            let base = run_smc2_parallel(&cfg, &target, 1, seed)?;
            for p in [2, 4] {
                let other = run_smc2_parallel(&cfg, &target, p, seed)?;
                let drift = base
                    .recycled
                    .iter()
                    .zip(&other.recycled)
                    .map(|(a, b)| (a - b).abs())
                    .chain(base.iterations.iter().zip(&other.iterations).flat_map(|(a, b)| [(a.ess - b.ess).abs(), (a.l - b.l).abs()]))
                    .fold(0.0, f64::max);
                if drift > 1e-12 {
                    return Err(Error::Numerical(format!("P = {p} differs from P = 1 by {drift}")));
                }
            }
            let l: Vec<f64> = base.iterations.iter().map(|r| r.l).collect();
            let c = recycling_constants(&l)?;
            if (c.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Numerical("recycling constants do not sum to one".into()));
            }
            for r in &base.iterations {
                if (r.log_total_after - r.log_total).abs() > 1e-12 || (r.resampled && r.ess_after != cfg.n as f64) {
                    return Err(Error::Numerical(format!("iteration {} breaks the reset identities", r.k)));
                }
            }
            Ok(())
        })();
        report.record(seed, cfg.n, 4, outcome);
    }
    report
}

fn pmcmc_suite(opts: &ValidateOptions) -> SuiteReport {
    let mut report = SuiteReport::new("pmcmc");
    for case in 0..opts.cases.clamp(1, 3) {
        let seed = opts.seed + case as u64;
        let target = toy_target(&mut case_rng(opts, case));
        let m = 20_000;
        let cfg = PmcmcConfig {
            proposal_cov: nalgebra::DMatrix::identity(2, 2) * 0.1,
            ..PmcmcConfig::new(m, 2)
        };
        let outcome = (|| -> Result<()> {
            let out = run_pmcmc(&cfg, &target, seed)?;
            let truth = target.posterior_mean();
            // autocorrelated chain: budget an effective size of M/40
            let tol = 3.0 * target.posterior_sd() / ((m / 40) as f64).sqrt();
            for (e, t) in out.estimate.iter().zip(&truth) {
                if (e - t).abs() > tol {
                    return Err(Error::Numerical(format!("chain mean {e} vs posterior mean {t}")));
                }
            }
            Ok(())
        })();
        report.record(seed, m, 1, outcome);
    }
    report
}
