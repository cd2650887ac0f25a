//! Bootstrap particle filter with adaptive multinomial resampling.
//!
//! The filter carries unnormalized log-weights through the whole run. When the
//! effective sample size drops below `resample_fraction * N_x`, the cloud is
//! resampled and every survivor receives the mean of the pre-resampling
//! weights, so the total weight (and hence the running likelihood estimate)
//! is unchanged by resampling. The marginal likelihood estimate is read once,
//! at the last time step, as the mean unnormalized weight.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ess_from_log_weights, log_sum_exp, normalize_log_weights};
use crate::ssm::{Dataset, StateSpaceModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfConfig {
    pub n_particles: usize,
    pub resample_fraction: f64,
}

impl Default for PfConfig {
    fn default() -> Self {
        PfConfig {
            n_particles: 500,
            resample_fraction: 0.5,
        }
    }
}

impl PfConfig {
    pub fn new(n_particles: usize) -> Result<Self> {
        let cfg = PfConfig {
            n_particles,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config(format!(
                "particle filter needs at least 2 particles, got {}",
                self.n_particles
            )));
        }
        if !(self.resample_fraction > 0.0 && self.resample_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "resample fraction must lie in (0, 1], got {}",
                self.resample_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParticleCloud<S> {
    pub states: Vec<S>,
    pub log_weights: Vec<f64>,
    /// Number of observations assimilated so far.
    pub t: usize,
    pub resampled: bool,
    /// Every weight is `-inf`; the cloud can no longer explain the data.
    pub degenerate: bool,
}

impl<S> ParticleCloud<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `ln( (1/N_x) Σ w )`.
    pub fn log_mean_weight(&self) -> f64 {
        log_sum_exp(&self.log_weights) - (self.log_weights.len() as f64).ln()
    }

    /// Self-normalized estimate of `E[f(x_t) | y_1:t]`.
    pub fn weighted_mean(&self, f: impl Fn(&S) -> f64) -> Option<f64> {
        let w = normalize_log_weights(&self.log_weights)?;
        Some(self.states.iter().zip(w).map(|(x, w)| w * f(x)).sum())
    }
}

/// Effective number of particles, `1 / Σ w̃²`.
pub fn pf_ess(log_weights: &[f64]) -> Result<f64> {
    ess_from_log_weights(log_weights)
        .ok_or_else(|| Error::Degenerate("every particle weight is zero".into()))
}

/// `log_weights.len()` i.i.d. ancestor indices drawn in proportion to the weights.
pub fn multinomial_resample<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    let w = normalize_log_weights(log_weights)
        .ok_or_else(|| Error::Degenerate("cannot resample a cloud with zero total weight".into()))?;
    let mut cdf = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for wi in &w {
        acc += wi;
        cdf.push(acc);
    }
    let total = acc;
    // the last index with positive weight absorbs rounding at the top of the cdf
    let last_live = w.iter().rposition(|&x| x > 0.0).expect("normalized weights sum to one");
    Ok((0..w.len())
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(last_live)
        })
        .collect())
}

/// Advances the cloud by one observation.
///
/// `cloud = None` starts the filter from the model's initial law.
pub fn pf_step<M: StateSpaceModel, R: Rng + ?Sized>(
    cloud: Option<ParticleCloud<M::State>>,
    y: f64,
    theta: &[f64],
    model: &M,
    config: &PfConfig,
    rng: &mut R,
) -> ParticleCloud<M::State> {
    let mut cloud = match cloud {
        None => {
            let states: Vec<_> = (0..config.n_particles)
                .map(|_| model.sample_initial(theta, rng))
                .collect();
            ParticleCloud {
                log_weights: vec![0.0; states.len()],
                states,
                t: 0,
                resampled: false,
                degenerate: false,
            }
        }
        Some(mut c) => {
            for x in c.states.iter_mut() {
                *x = model.sample_transition(x, theta, rng);
            }
            c
        }
    };
    for (lw, x) in cloud.log_weights.iter_mut().zip(&cloud.states) {
        *lw += model.observation_log_density(y, x, theta);
    }
    cloud.t += 1;
    cloud.resampled = false;

    let n = cloud.len() as f64;
    match ess_from_log_weights(&cloud.log_weights) {
        None => cloud.degenerate = true,
        Some(ess) if ess < config.resample_fraction * n => {
            let mean = cloud.log_mean_weight();
            let ancestors = multinomial_resample(&cloud.log_weights, rng).expect("cloud has positive weight");
            cloud.states = ancestors.iter().map(|&a| cloud.states[a].clone()).collect();
            cloud.log_weights.iter_mut().for_each(|lw| *lw = mean);
            cloud.resampled = true;
        }
        Some(_) => {}
    }
    cloud
}

/// Estimate of `ln p(y_1:T | θ)`; `-inf` if the cloud degenerates.
pub fn run_pf<M: StateSpaceModel, R: Rng + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    config: &PfConfig,
    rng: &mut R,
) -> f64 {
    let mut cloud = None;
    for &y in &data.y {
        let next = pf_step(cloud, y, theta, model, config, rng);
        if next.degenerate {
            return f64::NEG_INFINITY;
        }
        cloud = Some(next);
    }
    cloud.map_or(0.0, |c| c.log_mean_weight())
}
