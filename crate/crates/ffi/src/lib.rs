//! C interface to the smc2 sampler.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns an
//! [`Smc2Status`]; on failure, [`smc2_last_error_message`] describes what went
//! wrong on the calling thread. Panics never unwind into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nalgebra::DMatrix;
use smc2_core::comms::spawn_group;
use smc2_core::pf::PfConfig;
use smc2_core::pmcmc::{run_pmcmc, PmcmcConfig};
use smc2_core::resample::parallel_redistribute;
use smc2_core::smc2::{run_smc2_parallel, LKernel, PfTarget, Smc2Config};
use smc2_core::ssm::{simulate_sir, Dataset, InfectionRate, SirConfig, SirModel};
use smc2_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smc2Status {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Io = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Observations plus the SIR settings they were simulated with.
pub struct Smc2Dataset {
    data: Dataset,
    sir: SirConfig,
}

/// Output of one sampler run.
pub struct Smc2Result {
    estimate: Vec<f64>,
    iterations: Vec<Smc2IterationInfo>,
    seconds: f64,
    acceptance_rate: f64,
}

/// Diagnostics of one outer iteration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smc2IterationInfo {
    /// Iteration number, counting from 1.
    pub k: usize,
    pub ess: f64,
    pub l: f64,
    pub resampled: c_int,
    pub log_z_increment: f64,
}

/// Settings for [`smc2_run_sir`]; start from [`smc2_run_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smc2RunConfig {
    pub n: usize,
    pub k: usize,
    pub nx: usize,
    pub p: usize,
    pub seed: u64,
    /// Proposal covariance is `sigma_scale · I`.
    pub sigma_scale: f64,
    /// Non-zero selects the Gaussian-conditional L-kernel, zero the forward kernel.
    pub optimal_lkernel: c_int,
    /// Non-zero uses the per-susceptible Reed–Frost infection probability.
    pub reed_frost_standard: c_int,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> Smc2Status {
    match err.root_cause() {
        Error::Config(_) => Smc2Status::InvalidArgument,
        Error::Domain(_) => Smc2Status::Domain,
        Error::Io { .. } | Error::Parse { .. } => Smc2Status::Io,
        _ => Smc2Status::Runtime,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (Smc2Status, String)>) -> Smc2Status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            Smc2Status::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            Smc2Status::Panic
        }
    }
}

fn core_err(e: Error) -> (Smc2Status, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (Smc2Status, String) {
    (Smc2Status::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (Smc2Status, String) {
    (Smc2Status::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, (Smc2Status, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn smc2_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread (empty after a success).
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn smc2_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Simulates an SIR dataset of `t` observations at `(beta, gamma)`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn smc2_dataset_simulate_sir(
    seed: u64,
    beta: f64,
    gamma: f64,
    n_pop: u64,
    i0: u64,
    t: usize,
    reed_frost_standard: c_int,
    out: *mut *mut Smc2Dataset,
) -> Smc2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let sir = SirConfig { n_pop, i0, t };
        let model = SirModel::new(sir, infection_rate(reed_frost_standard)).map_err(core_err)?;
        let data = simulate_sir(&model, &[beta, gamma], seed).map_err(core_err)?;
        *out = Box::into_raw(Box::new(Smc2Dataset { data, sir }));
        Ok(())
    })
}

/// Loads a `t,y` CSV (and its `.meta` sidecar, if present).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smc2_dataset_load(path: *const c_char, out: *mut *mut Smc2Dataset) -> Smc2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let data = Dataset::read(path_arg(path)?).map_err(core_err)?;
        let mut sir = SirConfig { t: data.len(), ..SirConfig::default() };
        if let Some(v) = data.meta.get("n_pop") {
            sir.n_pop = v.parse().map_err(|_| invalid(format!("bad n_pop metadata '{v}'")))?;
        }
        if let Some(v) = data.meta.get("i0") {
            sir.i0 = v.parse().map_err(|_| invalid(format!("bad i0 metadata '{v}'")))?;
        }
        *out = Box::into_raw(Box::new(Smc2Dataset { data, sir }));
        Ok(())
    })
}

/// Writes the dataset as CSV plus sidecar.
///
/// # Safety
/// `dataset` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn smc2_dataset_save(dataset: *const Smc2Dataset, path: *const c_char) -> Smc2Status {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        ds.data.write(path_arg(path)?).map_err(core_err)
    })
}

/// Number of observations; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn smc2_dataset_len(dataset: *const Smc2Dataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.data.len())
}

/// Copies the observations into `out[0..capacity]`.
///
/// # Safety
/// `out` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn smc2_dataset_observations(dataset: *const Smc2Dataset, out: *mut f64, capacity: usize) -> Smc2Status {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        copy_out(&ds.data.y, out, capacity)
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smc2_dataset_free(dataset: *mut Smc2Dataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

unsafe fn copy_out(values: &[f64], out: *mut f64, capacity: usize) -> Result<(), (Smc2Status, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if capacity < values.len() {
        return Err((
            Smc2Status::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn infection_rate(reed_frost_standard: c_int) -> InfectionRate {
    if reed_frost_standard != 0 {
        InfectionRate::ReedFrost
    } else {
        InfectionRate::SusceptibleScaled
    }
}

/// Desk-scale defaults: N=128, K=10, N_x=200, P=1, Σ=0.1·I, optimal L-kernel.
#[no_mangle]
pub extern "C" fn smc2_run_config_default() -> Smc2RunConfig {
    Smc2RunConfig {
        n: 128,
        k: 10,
        nx: 200,
        p: 1,
        seed: 1,
        sigma_scale: 0.1,
        optimal_lkernel: 1,
        reed_frost_standard: 0,
    }
}

fn sir_model(ds: &Smc2Dataset, reed_frost_standard: c_int) -> Result<SirModel, (Smc2Status, String)> {
    SirModel::new(ds.sir, infection_rate(reed_frost_standard)).map_err(core_err)
}

/// Runs SMC² on an SIR dataset using `config.p` in-process workers.
///
/// # Safety
/// `dataset` and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smc2_run_sir(
    dataset: *const Smc2Dataset,
    config: *const Smc2RunConfig,
    out: *mut *mut Smc2Result,
) -> Smc2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        let cfg = *config.as_ref().ok_or_else(|| null("config"))?;
        if !(cfg.sigma_scale > 0.0 && cfg.sigma_scale.is_finite()) {
            return Err(invalid(format!("sigma_scale must be positive, got {}", cfg.sigma_scale)));
        }
        let model = sir_model(ds, cfg.reed_frost_standard)?;
        let target = PfTarget::new(&model, &ds.data, PfConfig::new(cfg.nx).map_err(core_err)?).map_err(core_err)?;
        let smc = Smc2Config {
            proposal_cov: DMatrix::identity(2, 2) * cfg.sigma_scale,
            lkernel: if cfg.optimal_lkernel != 0 { LKernel::ApproxOptimalGaussian } else { LKernel::ForwardSymmetric },
            ..Smc2Config::new(cfg.n, cfg.k, 2)
        };
        let res = run_smc2_parallel(&smc, &target, cfg.p, cfg.seed).map_err(core_err)?;
        let iterations = res
            .iterations
            .iter()
            .map(|r| Smc2IterationInfo {
                k: r.k,
                ess: r.ess,
                l: r.l,
                resampled: r.resampled as c_int,
                log_z_increment: r.log_z_increment,
            })
            .collect();
        *out = Box::into_raw(Box::new(Smc2Result {
            estimate: res.recycled,
            iterations,
            seconds: res.seconds,
            acceptance_rate: f64::NAN,
        }));
        Ok(())
    })
}

/// Runs one particle-MCMC chain of length `m` on an SIR dataset.
///
/// # Safety
/// `dataset` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smc2_run_pmcmc_sir(
    dataset: *const Smc2Dataset,
    m: usize,
    nx: usize,
    sigma_scale: f64,
    seed: u64,
    reed_frost_standard: c_int,
    out: *mut *mut Smc2Result,
) -> Smc2Status {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ds = dataset.as_ref().ok_or_else(|| null("dataset"))?;
        if !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
            return Err(invalid(format!("sigma_scale must be positive, got {sigma_scale}")));
        }
        let model = sir_model(ds, reed_frost_standard)?;
        let target = PfTarget::new(&model, &ds.data, PfConfig::new(nx).map_err(core_err)?).map_err(core_err)?;
        let cfg = PmcmcConfig {
            proposal_cov: DMatrix::identity(2, 2) * sigma_scale,
            ..PmcmcConfig::new(m, 2)
        };
        let res = run_pmcmc(&cfg, &target, seed).map_err(core_err)?;
        *out = Box::into_raw(Box::new(Smc2Result {
            acceptance_rate: res.chain.acceptance_rate(),
            estimate: res.estimate,
            iterations: Vec::new(),
            seconds: res.seconds,
        }));
        Ok(())
    })
}

/// Number of parameters in the estimate; 0 for a null handle.
///
/// # Safety
/// `result` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn smc2_result_dim(result: *const Smc2Result) -> usize {
    result.as_ref().map_or(0, |r| r.estimate.len())
}

/// Copies the parameter estimate (recycled for SMC², post-burn-in mean for p-MCMC).
///
/// # Safety
/// `out` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn smc2_result_estimate(result: *const Smc2Result, out: *mut f64, capacity: usize) -> Smc2Status {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        copy_out(&r.estimate, out, capacity)
    })
}

/// Number of outer iterations recorded (0 for p-MCMC results).
///
/// # Safety
/// `result` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn smc2_result_iterations(result: *const Smc2Result) -> usize {
    result.as_ref().map_or(0, |r| r.iterations.len())
}

/// # Safety
/// `result` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smc2_result_iteration(result: *const Smc2Result, index: usize, out: *mut Smc2IterationInfo) -> Smc2Status {
    guard(|| {
        let r = result.as_ref().ok_or_else(|| null("result"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let info = r
            .iterations
            .get(index)
            .ok_or_else(|| invalid(format!("iteration {index} out of range (have {})", r.iterations.len())))?;
        *out = *info;
        Ok(())
    })
}

/// Sampler wall clock in seconds; NaN for a null handle.
///
/// # Safety
/// `result` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn smc2_result_seconds(result: *const Smc2Result) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.seconds)
}

/// Chain acceptance rate for p-MCMC results, NaN otherwise.
///
/// # Safety
/// `result` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn smc2_result_acceptance_rate(result: *const Smc2Result) -> f64 {
    result.as_ref().map_or(f64::NAN, |r| r.acceptance_rate)
}

/// # Safety
/// `result` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn smc2_result_free(result: *mut Smc2Result) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Expands duplication counts into ancestor indices using the distributed
/// redistribution on `p` in-process workers. `out` receives `n` indices.
///
/// # Safety
/// `ncopies` must point to `n` readable values and `out` to `n` writable ones.
#[no_mangle]
pub unsafe extern "C" fn smc2_redistribute_indices(ncopies: *const usize, n: usize, p: usize, out: *mut usize) -> Smc2Status {
    guard(|| {
        if ncopies.is_null() {
            return Err(null("ncopies"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if p == 0 || !p.is_power_of_two() || !n.is_multiple_of(p) || n < p {
            return Err(invalid(format!("n = {n} cannot be split over p = {p} ranks (both powers of two)")));
        }
        let counts = std::slice::from_raw_parts(ncopies, n).to_vec();
        let local = n / p;
        let parts = spawn_group(p, 0, |c| {
            let r = c.rank();
            let items: Vec<usize> = (r * local..(r + 1) * local).collect();
            parallel_redistribute(c, items, counts[r * local..(r + 1) * local].to_vec())
        })
        .map_err(core_err)?;
        let flat = parts.concat();
        ptr::copy_nonoverlapping(flat.as_ptr(), out, flat.len());
        Ok(())
    })
}
