//! Acceptance gate. Runs every criterion, prints one line per criterion and
//! exits non-zero if a hard criterion fails.
//!
//! Soft and report-only criteria print their outcome but never fail the run.
//! `SMC2_ACCEPT_FULL=1` runs the runtime-trend check at full size.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use smc2_core::cli::{mse, Problem, ModelKind, SIR_TRUE_THETA};
use smc2_core::comms::spawn_group;
use smc2_core::numerics::{normal_log_pdf, Gaussian};
use smc2_core::pf::{run_pf, PfConfig};
use smc2_core::pmcmc::{run_pmcmc, PmcmcConfig};
use smc2_core::resample::{check_workload, parallel_redistribute, sequential_redistribute, systematic_choice};
use smc2_core::smc2::{
    normalize, recycling_constants, regularize, resample_step, run_smc2_parallel, ConditionalKernel, JointFit, LKernel,
    Smc2Config, Smc2Output,
};
use smc2_core::ssm::{kalman_loglik, lg_model, simulate};

#[derive(Clone, Copy, PartialEq)]
enum Gate {
    Hard,
    Soft,
    Report,
}

struct Outcome {
    id: u32,
    gate: Gate,
    pass: bool,
    summary: String,
}

fn line(o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    let tag = match o.gate {
        Gate::Hard => "",
        Gate::Soft => " [soft gate]",
        Gate::Report => " [report only]",
    };
    println!("criterion {:>2}: {status}{tag}: {}", o.id, o.summary);
}

fn weights_from(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let spread: f64 = rng.gen_range(0.0..5.0);
    let sparse = rng.gen_bool(0.3);
    let mut raw: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.gen_bool(0.7) {
                0.0
            } else {
                (spread * rng.sample::<f64, _>(StandardNormal)).exp()
            }
        })
        .collect();
    if raw.iter().all(|w| *w == 0.0) {
        raw[rng.gen_range(0..n)] = 1.0;
    }
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

/// Random copy counts summing to `n`, with a mix of shapes.
fn random_ncopies(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut c = vec![0usize; n];
    match rng.gen_range(0..4) {
        0 => c.iter_mut().for_each(|x| *x = 1),
        1 => c[rng.gen_range(0..n)] = n,
        _ => {
            let w = weights_from(rng, n);
            let cdf: Vec<f64> = w
                .iter()
                .scan(0.0, |acc, x| {
                    *acc += x;
                    Some(*acc)
                })
                .collect();
            for _ in 0..n {
                let u: f64 = rng.gen::<f64>() * cdf[n - 1];
                let i = cdf.partition_point(|&v| v < u).min(n - 1);
                c[i] += 1;
            }
        }
    }
    c
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    let mut error = None;
    for log_n in 3..=10 {
        let n = 1usize << log_n;
        for p in [1usize, 2, 4, 8] {
            let local = n / p;
            let res = spawn_group(p, 0, |c| {
                let r = c.rank();
                let mut bad = 0usize;
                for case in 0..1000u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64((n as u64) << 32 | (p as u64) << 16 | case);
                    let ncopies = random_ncopies(&mut rng, n);
                    let items: Vec<u64> = (0..n as u64).collect();
                    let expected = sequential_redistribute(&items, &ncopies)?;
                    let got = parallel_redistribute(
                        c,
                        items[r * local..(r + 1) * local].to_vec(),
                        ncopies[r * local..(r + 1) * local].to_vec(),
                    )?;
                    if got != expected[r * local..(r + 1) * local] {
                        bad += 1;
                    }
                }
                Ok(bad)
            });
            match res {
                Ok(per_rank) => mismatches += per_rank.iter().sum::<usize>(),
                Err(e) => error = Some(format!("N={n} P={p}: {e}")),
            }
            cases += 1000;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        gate: Gate::Hard,
        pass: error.is_none() && mismatches == 0 && secs < 60.0,
        summary: match error {
            Some(e) => format!("redistribution failed: {e}"),
            None => format!("parallel == sequential on {cases} cases (N 8..1024, P 1..8); {mismatches} rank-slice mismatches; {secs:.1}s"),
        },
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut violations = Vec::new();
    for p in [1usize, 2, 4, 8] {
        let res = spawn_group(p, 0, |c| {
            let r = c.rank();
            let mut out = Vec::new();
            for case in 0..2500u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(0xC401CE ^ (p as u64) << 40 ^ case);
                let n = p << rng.gen_range(0..=7);
                let local = n / p;
                let w = weights_from(&mut rng, n);
                let u: f64 = rng.gen();
                let mine = systematic_choice(c, &w[r * local..(r + 1) * local], u)?;
                let all = c.all_gather(mine)?.concat();
                if r == 0 {
                    if let Err(e) = check_workload(&all) {
                        out.push(format!("P={p} case {case}: {e}"));
                    }
                }
            }
            Ok(out)
        });
        match res {
            Ok(v) => violations.extend(v.into_iter().flatten()),
            Err(e) => violations.push(format!("P={p}: {e}")),
        }
    }

    // unbiasedness: E[ncopies_i] = N w_i; each count is ⌊N w_i⌋ or ⌈N w_i⌉
    let draws = 100_000usize;
    let n = 64usize;
    let mut worst_z: f64 = 0.0;
    let res = spawn_group(1, 0, |c| {
        let mut worst: f64 = 0.0;
        for v in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + v);
            let w = weights_from(&mut rng, n);
            let mut sums = vec![0u64; n];
            for _ in 0..draws {
                let u: f64 = rng.gen();
                for (s, k) in sums.iter_mut().zip(systematic_choice(c, &w, u)?) {
                    *s += k as u64;
                }
            }
            for (i, s) in sums.iter().enumerate() {
                let target = n as f64 * w[i];
                let frac = target - target.floor();
                let sd = (frac * (1.0 - frac) / draws as f64).sqrt();
                let dev = (*s as f64 / draws as f64 - target).abs();
                let z = if sd > 0.0 { dev / sd } else if dev < 1e-9 { 0.0 } else { f64::INFINITY };
                worst = worst.max(z);
            }
        }
        Ok(worst)
    });
    match res {
        Ok(v) => worst_z = v[0],
        Err(e) => violations.push(format!("unbiasedness: {e}")),
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        gate: Gate::Hard,
        pass: violations.is_empty() && worst_z <= 4.0 && secs < 60.0,
        summary: match violations.first() {
            Some(v) => format!("{} workload violations, first: {v}", violations.len()),
            None => format!("sum = N and range hold on 10000 vectors; worst unbiasedness deviation {worst_z:.2} sd (limit 4); {secs:.1}s"),
        },
    }
}

fn criterion_3() -> Outcome {
    let n = 1024usize;
    let mut report = Vec::new();
    let mut pass = true;
    for p in [2usize, 4, 8] {
        let local = n / p;
        let bound = 5 + 4 * p.trailing_zeros() as u64;
        let res = spawn_group(p, 9, |c| {
            let r = c.rank();
            let mut worst = 0u64;
            for case in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(case);
                let w = weights_from(&mut rng, n);
                let lw: Vec<f64> = w[r * local..(r + 1) * local].iter().map(|x| x.ln()).collect();
                let norm = normalize(c, &lw)?;
                let items: Vec<u64> = (r * local..(r + 1) * local).map(|i| i as u64).collect();
                c.reset_rounds();
                let (out, _) = resample_step(c, items, &norm, case as usize + 1)?;
                worst = worst.max(c.rounds());
                if out.len() != local {
                    return Err(smc2_core::Error::Contract("unbalanced after resampling".into()));
                }
            }
            Ok(worst)
        });
        match res {
            Ok(r) => {
                let worst = r.into_iter().max().unwrap_or(0);
                pass &= worst <= bound;
                report.push(format!("P={p}: {worst} <= {bound}"));
            }
            Err(e) => {
                pass = false;
                report.push(format!("P={p}: {e}"));
            }
        }
    }
    Outcome {
        id: 3,
        gate: Gate::Hard,
        pass,
        summary: format!("max rounds per full resampling at N=1024: {}", report.join(", ")),
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let model = lg_model(0.9, 1.0, 1.0).expect("valid model");
    let data = simulate(&model, &[0.9], 20, 2024).expect("simulate");
    let exact = kalman_loglik(0.9, 1.0, 1.0, &data.y);
    let cfg = PfConfig::new(2000).expect("pf config");
    let runs: Vec<f64> = (0..200u64)
        .map(|s| run_pf(&model, &data, &[0.9], &cfg, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let mean50 = runs[..50].iter().sum::<f64>() / 50.0;
    let rel = (mean50 - exact).abs() / exact.abs();
    let ratio = runs.iter().map(|l| (l - exact).exp()).sum::<f64>() / runs.len() as f64;
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 4,
        gate: Gate::Hard,
        pass: rel <= 0.01 && (0.9..=1.1).contains(&ratio) && secs < 120.0,
        summary: format!(
            "Kalman {exact:.4}, PF mean over 50 runs {mean50:.4} (rel err {rel:.2e}); mean likelihood ratio over 200 runs {ratio:.4}; {secs:.1}s"
        ),
    }
}

fn desk_config(n: usize, k: usize) -> Smc2Config {
    Smc2Config {
        proposal_cov: DMatrix::identity(2, 2) * 0.1,
        ..Smc2Config::new(n, k, 2)
    }
}

fn sir_problem() -> Problem {
    Problem::load(ModelKind::Sir, false, None, 1, Some(30)).expect("simulate SIR data")
}

fn criterion_5(problem: &Problem) -> Outcome {
    let target = problem.target(200).expect("target");
    let mut ok = 0;
    let mut rows = Vec::new();
    for seed in 1..=5u64 {
        match run_smc2_parallel(&desk_config(128, 10), target.as_ref(), 1, seed) {
            Ok(res) => {
                let e = &res.recycled;
                let m = mse(e, Some(&SIR_TRUE_THETA));
                if (e[0] - 0.85).abs() <= 0.1 && (e[1] - 0.2).abs() <= 0.05 && m <= 5e-3 {
                    ok += 1;
                }
                rows.push(format!("({:.4}, {:.4}, mse {m:.2e})", e[0], e[1]));
            }
            Err(e) => rows.push(format!("error: {e}")),
        }
    }
    Outcome {
        id: 5,
        gate: Gate::Hard,
        pass: ok >= 4,
        summary: format!("{ok}/5 desk SIR repeats within bounds: {}", rows.join(" ")),
    }
}

fn criterion_6(problem: &Problem) -> Outcome {
    let target = problem.target(200).expect("target");
    let (n, k) = (128usize, 10usize);
    let pm = PmcmcConfig {
        proposal_cov: DMatrix::identity(2, 2) * 0.1,
        ..PmcmcConfig::new(k * n, 2)
    };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=10u64 {
        let s = run_smc2_parallel(&desk_config(n, k), target.as_ref(), 1, seed);
        let q = run_pmcmc(&pm, target.as_ref(), seed);
        match (s, q) {
            (Ok(s), Ok(q)) => {
                let (ms, mq) = (mse(&s.recycled, Some(&SIR_TRUE_THETA)), mse(&q.estimate, Some(&SIR_TRUE_THETA)));
                if ms <= mq {
                    wins += 1;
                }
                pairs.push(format!("{ms:.1e}/{mq:.1e}"));
            }
            (s, q) => pairs.push(format!("error: {:?} {:?}", s.err(), q.err())),
        }
    }
    Outcome {
        id: 6,
        gate: Gate::Soft,
        pass: wins >= 6,
        summary: format!("SMC2 MSE <= p-MCMC MSE in {wins}/10 paired seeds (need 6); smc2/pmcmc MSE: {}", pairs.join(" ")),
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_7(runs: &[(usize, Smc2Output)]) -> Outcome {
    let (_, base) = &runs[0];
    let mut worst: f64 = 0.0;
    for (_, r) in &runs[1..] {
        worst = worst.max(max_abs_diff(&r.recycled, &base.recycled));
        for (a, b) in r.iterations.iter().zip(&base.iterations) {
            worst = worst.max((a.ess - b.ess).abs()).max((a.l - b.l).abs());
        }
        if r.iterations.len() != base.iterations.len() {
            worst = f64::INFINITY;
        }
    }
    Outcome {
        id: 7,
        gate: Gate::Hard,
        pass: worst <= 1e-12,
        summary: format!("P in {{1,2,4}}: max difference in recycled estimate, ESS and l_k = {worst:.1e} (limit 1e-12)"),
    }
}

fn criterion_8(runs: &[(usize, Smc2Output)], n: usize) -> Outcome {
    let mut failures = Vec::new();
    let mut resamples = 0;
    for (p, r) in runs {
        let l: Vec<f64> = r.iterations.iter().map(|it| it.l).collect();
        match recycling_constants(&l) {
            Ok(c) => {
                let s: f64 = c.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    failures.push(format!("P={p}: sum c_k = {s}"));
                }
            }
            Err(e) => failures.push(format!("P={p}: {e}")),
        }
        for it in &r.iterations {
            if !(0.0..=n as f64).contains(&it.l) {
                failures.push(format!("P={p} k={}: l_k = {}", it.k, it.l));
            }
            if it.resampled {
                resamples += 1;
                if (it.log_total_after - it.log_total).abs() > 1e-12 {
                    failures.push(format!("P={p} k={}: log total {} -> {}", it.k, it.log_total, it.log_total_after));
                }
                if it.ess_after != n as f64 {
                    failures.push(format!("P={p} k={}: ESS after reset {}", it.k, it.ess_after));
                }
            }
        }
    }
    Outcome {
        id: 8,
        gate: Gate::Hard,
        pass: failures.is_empty() && resamples > 0,
        summary: match failures.first() {
            Some(f) => format!("{} identity violations, first: {f}", failures.len()),
            None => format!("sum c_k = 1, l_k in [0, N], log total preserved and ESS = N over {resamples} resamplings"),
        },
    }
}

fn criterion_9(problem: &Problem) -> Outcome {
    let full = std::env::var("SMC2_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let (n, nx, repeats) = if full { (4096, 500, 3) } else { (512, 100, 2) };
    let target = problem.target(nx).expect("target");
    let mut means = Vec::new();
    for p in [1usize, 2, 4] {
        let mut total = 0.0;
        for seed in 0..repeats {
            match run_smc2_parallel(&desk_config(n, 10), target.as_ref(), p, seed) {
                Ok(r) => total += r.seconds,
                Err(e) => {
                    return Outcome { id: 9, gate: Gate::Report, pass: false, summary: format!("P={p}: {e}") };
                }
            }
        }
        means.push((p, total / repeats as f64));
    }
    let non_increasing = means.windows(2).all(|w| w[1].1 <= w[0].1);
    let cpus = std::thread::available_parallelism().map_or(1, |c| c.get());
    Outcome {
        id: 9,
        gate: Gate::Report,
        pass: non_increasing,
        summary: format!(
            "{} run N={n} N_x={nx}, {cpus} CPU(s): mean sampler seconds {}",
            if full { "full" } else { "reduced" },
            means.iter().map(|(p, s)| format!("P={p} {s:.3}")).collect::<Vec<_>>().join(", ")
        ),
    }
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for i in 1..intervals {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn criterion_10() -> Outcome {
    let mut failures = Vec::new();
    let mut worst_int: f64 = 0.0;
    for (s_pp, s_pc, s_cc, cur) in [(2.0, 0.8, 1.5, 0.7), (0.04, -0.03, 0.05, -1.2), (1.0, 0.999, 1.0, 3.0)] {
        let fit = JointFit {
            mean_prev: DVector::from_element(1, 0.3),
            mean_cur: DVector::from_element(1, -0.2),
            cov: DMatrix::from_row_slice(2, 2, &[s_pp, s_pc, s_pc, s_cc]),
        };
        let kernel = ConditionalKernel::from_fit(&fit).expect("kernel");
        // closed form with the documented ε = max(1e-8·S, 1e-12) jitter on S_cc and on the result
        let jitter = |v: f64| v + (1e-8 * v).max(1e-12);
        let s_cc_reg = jitter(s_cc);
        let mean = 0.3 + s_pc / s_cc_reg * (cur + 0.2);
        let var = jitter(s_pp - s_pc * s_pc / s_cc_reg);
        let sd = var.sqrt();
        let total = simpson(|x| kernel.log_density(&[x], &[cur]).exp(), mean - 14.0 * sd, mean + 14.0 * sd, 40_000);
        worst_int = worst_int.max((total - 1.0).abs());
        let probe = mean + 0.5 * sd;
        let closed = normal_log_pdf(probe, mean, var);
        if (kernel.log_density(&[probe], &[cur]) - closed).abs() > 1e-9 {
            failures.push(format!("conditional density differs from closed form at Σ_pc={s_pc}"));
        }
    }

    // zero cross-covariance: the kernel must not depend on θ_k at all
    let s_pp = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
    let mut cov = DMatrix::zeros(4, 4);
    cov.view_mut((0, 0), (2, 2)).copy_from(&s_pp);
    cov.view_mut((2, 2), (2, 2)).copy_from(&DMatrix::from_row_slice(2, 2, &[2.0, -0.4, -0.4, 1.0]));
    let fit = JointFit {
        mean_prev: DVector::from_column_slice(&[0.1, -0.5]),
        mean_cur: DVector::from_column_slice(&[1.0, 2.0]),
        cov,
    };
    let kernel = ConditionalKernel::from_fit(&fit).expect("kernel");
    let marginal = Gaussian::new(fit.mean_prev.clone(), regularize(&s_pp)).expect("marginal");
    for prev in [[0.0, 0.0], [0.4, -1.1], [-2.0, 3.0]] {
        for cur in [[0.0, 0.0], [5.0, -3.0], [1.0, 2.0]] {
            let (a, b) = (kernel.log_density(&prev, &cur), marginal.log_pdf(&prev));
            if a != b {
                failures.push(format!("Σ_pc = 0: kernel {a} vs marginal {b} at prev {prev:?} cur {cur:?}"));
            }
        }
    }
    Outcome {
        id: 10,
        gate: Gate::Hard,
        pass: failures.is_empty() && worst_int <= 1e-6,
        summary: match failures.first() {
            Some(f) => f.clone(),
            None => format!("1-D quadrature error {worst_int:.1e} (limit 1e-6); zero cross-covariance kernel equals marginal exactly"),
        },
    }
}

fn main() {
    let mut outcomes = Vec::new();
    let mut run = |o: Outcome| {
        line(&o);
        outcomes.push(o);
    };
    run(criterion_1());
    run(criterion_2());
    run(criterion_3());
    run(criterion_4());
    let problem = sir_problem();
    run(criterion_5(&problem));
    run(criterion_6(&problem));

    let target = problem.target(200).expect("target");
    let n = 128;
    let runs: Vec<(usize, Smc2Output)> = [1usize, 2, 4]
        .iter()
        .map(|&p| {
            let cfg = Smc2Config { lkernel: LKernel::ApproxOptimalGaussian, ..desk_config(n, 10) };
            (p, run_smc2_parallel(&cfg, target.as_ref(), p, 42).expect("smc2 run"))
        })
        .collect();
    run(criterion_7(&runs));
    run(criterion_8(&runs, n));
    run(criterion_9(&problem));
    run(criterion_10());

    let failed: Vec<u32> = outcomes.iter().filter(|o| o.gate == Gate::Hard && !o.pass).map(|o| o.id).collect();
    let soft: Vec<u32> = outcomes.iter().filter(|o| o.gate != Gate::Hard && !o.pass).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} criteria pass; hard failures {failed:?}; soft/report misses {soft:?}",
        outcomes.iter().filter(|o| o.pass).count(),
        outcomes.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
