//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria that need the external benchmark files report FAIL with the
//! missing path when the files are absent; those failures do not change the
//! exit status. Any other failure does.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand_distr::{Distribution, StandardNormal};

use ipsg_core::datasets::{least_squares_oracle, partition, Dataset};
use ipsg_core::linalg::{dot, gram, sym_eigenvalues, sym_extreme_eigs, vec_norm, vec_sub, Matrix};
use ipsg_core::optimizers::{IpsgParams, Method, MethodId};
use ipsg_core::presets::{Benchmark, Builtin};
use ipsg_core::rng::{derive_seed, stream};
use ipsg_core::simnet::{distance, run_until_stop, RunConfig, StopRule};
use ipsg_core::stateest;
use ipsg_core::theory::{
    self, compute_series, estimate_noise_bounds, find_contraction_regime, limit_error_bound, verify_lemma1,
    verify_step_recursion, verify_unbiasedness, warm_states, ConstantsReport, Lemma1Config, NoiseBounds,
    DEFAULT_PROBES,
};

const SEED: u64 = 2024;

// Tolerances.
const UNBIASED_REL_TOL: f64 = 1e-12;
const UNBIASED_POINTS: usize = 20;
const LEMMA_TRIALS: usize = 2000;
const LEMMA_HORIZON: usize = 200;
const STEP_TRIALS: usize = 20_000;
const T_LIMIT: u64 = 10_000;
const EXACT_TOL: f64 = 1e-8;
const EXACT_BUDGET: u64 = 10_000;
const LIMIT_SLACK: f64 = 10.0;
/// `‖z‖²` floor for runs whose limit bound is exactly zero: squared
/// double-precision roundoff on `‖x*‖`.
const LIMIT_ROUNDOFF: f64 = 1e-24;
const RANK_SEEDS: u64 = 5;
const ASH608_BAND: (f64, f64) = (1.9e3, 1.7e4);
const STATE_REL_TOL: f64 = 1e-3;
const SEMIGROUP_TOL: f64 = 1e-10;

enum Status {
    Pass,
    Fail,
    /// Failed only because input files are absent.
    MissingData,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Outcome { status: if ok { Status::Pass } else { Status::Fail }, detail }
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("IPSG_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap().join("data"))
}

fn load(b: Benchmark) -> Result<Dataset, String> {
    let path = data_dir().join(b.file_name());
    if !path.exists() {
        return Err(format!("{} not found", path.display()));
    }
    b.load(&data_dir()).and_then(|d| d.solved()).map_err(|e| format!("{b}: {e}"))
}

fn missing(msg: String) -> Outcome {
    Outcome { status: Status::MissingData, detail: format!("data unavailable: {msg}") }
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

fn unbiased_on(ds: &Dataset, seed: u64) -> Result<(bool, f64), String> {
    let s1 = sym_extreme_eigs(&gram(&ds.a), 1e-10).map_err(|e| e.to_string())?.0;
    let mut rng = stream(seed, 1);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..UNBIASED_POINTS {
        let x: Vec<f64> = (0..ds.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let r = verify_unbiasedness(ds, &x, s1, UNBIASED_REL_TOL).map_err(|e| e.to_string())?;
        worst = worst.max(r.rel_err);
        ok &= r.passed;
    }
    Ok((ok, worst))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let small = Builtin::Rand50x8.dataset().unwrap();
    let (ok_small, worst_small) = match unbiased_on(&small, SEED) {
        Ok(v) => v,
        Err(e) => return Outcome::check(false, e),
    };
    let ash = load(Benchmark::Ash608);
    let elapsed = start.elapsed();
    let ash_part = match &ash {
        Ok(ds) => {
            let t = Instant::now();
            match unbiased_on(ds, SEED) {
                Ok((ok, w)) => Some((ok, w, t.elapsed())),
                Err(e) => return Outcome::check(false, e),
            }
        }
        Err(_) => None,
    };
    let detail = format!("rand50x8 worst relative error {worst_small:e} in {elapsed:?}");
    match (ash, ash_part) {
        (Err(e), _) => Outcome {
            status: if ok_small { Status::MissingData } else { Status::Fail },
            detail: format!("{detail}; ash608 {e}"),
        },
        (Ok(_), Some((ok, w, t))) => Outcome::check(
            ok && ok_small && within(elapsed + t, 1),
            format!("{detail}; ash608 worst relative error {w:e} in {t:?}"),
        ),
        (Ok(_), None) => unreachable!(),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let ds = Builtin::Rand20x5.dataset().unwrap();
    let beta = 1.0;
    let max_lambda = ds.a.row_iter().map(|r| dot(r, r)).fold(0.0, f64::max);
    let cfg = Lemma1Config {
        alpha: 0.9 * 2.0 / (max_lambda + beta),
        beta,
        horizon: LEMMA_HORIZON,
        trials: LEMMA_TRIALS,
        seed: SEED,
        rho_offset: 0.0,
    };
    match verify_lemma1(&ds, &Matrix::zeros(ds.dim(), ds.dim()), &cfg) {
        Ok(r) => {
            let elapsed = start.elapsed();
            Outcome::check(
                r.passed && within(elapsed, 30),
                format!(
                    "rho = {:.6}, C2 = {:.4e}, worst margin {:.3e} over t <= {LEMMA_HORIZON}, {elapsed:?}",
                    r.rho, r.c2, r.worst_margin
                ),
            )
        }
        Err(e) => Outcome::check(false, e.to_string()),
    }
}

struct Regime {
    ds: Dataset,
    noise: NoiseBounds,
    regime: theory::ContractionRegime,
}

fn regime() -> Result<Regime, String> {
    let ds = Builtin::Rand20x5.dataset().unwrap();
    let x_star = ds.minimizer().map_err(|e| e.to_string())?;
    let noise = estimate_noise_bounds(&ds, &x_star, DEFAULT_PROBES, SEED).map_err(|e| e.to_string())?;
    let regime = find_contraction_regime(&ds, 1.0, 0.5, 0.5, T_LIMIT, &noise).map_err(|e| e.to_string())?;
    Ok(Regime { ds, noise, regime })
}

fn criterion_3(r: &Result<Regime, String>) -> Outcome {
    let start = Instant::now();
    let r = match r {
        Ok(r) => r,
        Err(e) => return Outcome::check(false, e.clone()),
    };
    let params = IpsgParams { alpha: r.regime.alpha, delta: r.regime.delta, beta: 1.0 };
    let run = || -> ipsg_core::Result<(bool, String)> {
        let rep = ConstantsReport::compute(&r.ds, params, None)?;
        let states = warm_states(&r.ds, params, r.regime.t_start, SEED)?;
        let ts: Vec<u64> = states.iter().map(|s| s.0).collect();
        let points = compute_series(&rep, &r.noise, &ts)?;
        let mut ok = params.alpha < rep.alpha_bar;
        let mut parts = vec![format!("alpha = {:.4e} < alpha_bar = {:.4e}", params.alpha, rep.alpha_bar)];
        for ((t, x, k), p) in states.iter().zip(&points) {
            let s = verify_step_recursion(&r.ds, params, p, x, k, STEP_TRIALS, derive_seed(SEED, *t))?;
            ok &= s.passed && params.delta < p.delta_bar;
            parts.push(format!(
                "t={t}: E|z|^2 = {:.5e} (+-{:.1e}) vs bound {:.5e}, delta < delta_bar = {:.3e}",
                s.mc_mean, s.mc_std_err, s.bound, p.delta_bar
            ));
        }
        Ok((ok, parts.join("; ")))
    };
    match run() {
        Ok((ok, detail)) => {
            let elapsed = start.elapsed();
            Outcome::check(ok && within(elapsed, 30), format!("{detail}; {elapsed:?}"))
        }
        Err(e) => Outcome::check(false, e.to_string()),
    }
}

fn criterion_4(r: &Result<Regime, String>) -> Outcome {
    let r = match r {
        Ok(r) => r,
        Err(e) => return Outcome::check(false, e.clone()),
    };
    let reg = &r.regime;
    let worst = reg.r1_samples.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let best = reg.r1_samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    Outcome::check(
        reg.contracts && reg.t_start <= T_LIMIT,
        format!(
            "T = {}, delta = {:.4e}, R1 in [{best:.12}, {worst:.12}] over {} sampled t up to {}",
            reg.t_start,
            reg.delta,
            reg.r1_samples.len(),
            reg.r1_samples.last().map_or(0, |s| s.0)
        ),
    )
}

fn criterion_5() -> Outcome {
    let scalar = Builtin::Scalar;
    let ds = scalar.dataset().unwrap();
    let part = partition(&ds, 1).unwrap();
    let cfg = RunConfig::new(Method::Ipsg(scalar.ipsg()), SEED, EXACT_BUDGET, StopRule::new(EXACT_TOL, 1).unwrap());
    let first = match run_until_stop(&cfg, &ds, &part) {
        Ok(r) => r,
        Err(e) => return Outcome::check(false, e.to_string()),
    };
    let hit = first.stop_iter;

    let cons = Builtin::Consistent40x4;
    let ds = cons.dataset().unwrap();
    let part = partition(&ds, cons.agents()).unwrap();
    let params = cons.ipsg();
    let run = || -> ipsg_core::Result<(f64, f64)> {
        let x_star = ds.minimizer()?;
        let noise = estimate_noise_bounds(&ds, &x_star, DEFAULT_PROBES, SEED)?;
        let rep = ConstantsReport::compute(&ds, params, None)?;
        let bound = limit_error_bound(&rep, &noise, params.alpha, params.delta)?;
        let cfg = RunConfig::new(Method::Ipsg(params), SEED, 20_000, StopRule::new(1e-300, 1)?);
        let res = run_until_stop(&cfg, &ds, &part)?;
        let z = distance(&res.final_x, &x_star);
        Ok((z * z, bound))
    };
    match run() {
        Ok((z_sq, bound)) => {
            let floor = LIMIT_ROUNDOFF * vec_norm(&ds.minimizer().unwrap()).powi(2);
            Outcome::check(
                hit.is_some() && z_sq <= LIMIT_SLACK * bound + floor,
                format!(
                    "N=1 run reached |z| <= {EXACT_TOL:e} at t = {hit:?}; consistent40x4 final |z|^2 = {z_sq:e} vs limit bound {bound:e} (x{LIMIT_SLACK} + floor {floor:e})"
                ),
            )
        }
        Err(e) => Outcome::check(false, e.to_string()),
    }
}

fn median_stop(ds: &Dataset, b: Benchmark, id: MethodId) -> Result<Option<f64>, String> {
    let part = partition(ds, b.agents()).map_err(|e| e.to_string())?;
    let stop = StopRule::new(b.eps_tol(), StopRule::DEFAULT_WINDOW).unwrap();
    let mut stops = Vec::new();
    for seed in 0..RANK_SEEDS {
        let mut cfg = RunConfig::new(b.method(id), seed, b.t_max(), stop);
        cfg.x0 = Some(b.x0(ds.dim()));
        cfg.lazy_agents = true;
        let r = run_until_stop(&cfg, ds, &part).map_err(|e| e.to_string())?;
        stops.push(r.stop_iter.map_or(f64::INFINITY, |s| s as f64));
    }
    stops.sort_by(f64::total_cmp);
    let m = stops[stops.len() / 2];
    Ok(m.is_finite().then_some(m))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    let mut absent = Vec::new();
    for b in [Benchmark::Ash608, Benchmark::Abtaha1, Benchmark::Gre343, Benchmark::Illc1850] {
        let ds = match load(b) {
            Ok(ds) => ds,
            Err(e) => {
                absent.push(e);
                continue;
            }
        };
        let (ipsg, sgd) = match (median_stop(&ds, b, MethodId::Ipsg), median_stop(&ds, b, MethodId::Sgd)) {
            (Ok(i), Ok(s)) => (i, s),
            (Err(e), _) | (_, Err(e)) => return Outcome::check(false, e),
        };
        let faster = match (ipsg, sgd) {
            (Some(i), Some(s)) => i < s,
            (Some(_), None) => true,
            _ => false,
        };
        ok &= faster;
        if b == Benchmark::Ash608 {
            ok &= ipsg.is_some_and(|i| (ASH608_BAND.0..=ASH608_BAND.1).contains(&i));
        }
        parts.push(format!("{b}: ipsg {ipsg:?} vs sgd {sgd:?}"));
    }
    let elapsed = start.elapsed();
    if !absent.is_empty() {
        return missing(format!("{}; measured: [{}]", absent.join(", "), parts.join("; ")));
    }
    Outcome::check(ok && within(elapsed, 600), format!("{}; {elapsed:?}", parts.join("; ")))
}

fn kappa(ds: &Dataset) -> Result<f64, String> {
    let ev = sym_eigenvalues(&gram(&ds.a)).map_err(|e| e.to_string())?;
    Ok(ev[ev.len() - 1] / ev[0])
}

fn criterion_7() -> Outcome {
    let targets = [
        (Benchmark::Ash608, 11.38, 0.02),
        (Benchmark::Cleveland, 7.34, 0.02),
        (Benchmark::Abtaha1, 1.5e2, 0.10),
    ];
    let mut parts = Vec::new();
    let mut absent = Vec::new();
    let mut ok = true;
    for (b, want, rel) in targets {
        match load(b).and_then(|ds| kappa(&ds)) {
            Ok(k) => {
                let hit = ((k - want) / want).abs() <= rel;
                // The 212-row subset is not the published one, so this is
                // reported without gating.
                let report_only = b == Benchmark::Cleveland;
                ok &= hit || report_only;
                parts.push(format!(
                    "{b}: kappa = {k:.4} (target {want} +-{}%{})",
                    rel * 100.0,
                    if report_only { ", report only" } else { "" }
                ));
            }
            Err(e) if b == Benchmark::Cleveland => parts.push(format!("{e} (report only)")),
            Err(e) => absent.push(e),
        }
    }
    if !absent.is_empty() {
        return missing(format!("{}; measured: [{}]", absent.join(", "), parts.join("; ")));
    }
    Outcome::check(ok, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let sys = stateest::demo_observable();
    let run = || -> ipsg_core::Result<(bool, String)> {
        let obs = stateest::check_joint_observability(&sys)?;
        let perm_exact = obs
            .row_map
            .iter()
            .enumerate()
            .all(|(r, &rb)| obs.o_stacked.row(r) == obs.o_bar.row(rb));
        let local_deficient = obs.rank_local.iter().all(|&r| r < sys.dim());

        let meas = stateest::simulate_measurements(&sys, &stateest::DEMO_Z0)?;
        let (ds, _) = stateest::to_regression(&sys, &meas)?;
        let oracle = least_squares_oracle(&ds)?;
        let cfg = RunConfig::new(Method::Ipsg(stateest::demo_params()), SEED, 20_000, StopRule::new(1e-5, 10)?);
        let (z_hat, res) = stateest::estimate_initial_state(&sys, &meas, &cfg)?;
        let rel = vec_norm(&vec_sub(&z_hat, &oracle)) / vec_norm(&oracle);

        let mut semigroup: f64 = 0.0;
        for (s, t) in [(1u64, 1u64), (3, 5), (10, 7), (0, 12)] {
            let direct = stateest::propagate(&sys.a_state, &z_hat, s + t)?;
            let twice = stateest::propagate(&sys.a_state, &stateest::propagate(&sys.a_state, &z_hat, s)?, t)?;
            semigroup = semigroup.max(vec_norm(&vec_sub(&direct, &twice)) / vec_norm(&direct).max(f64::MIN_POSITIVE));
        }
        let ok = perm_exact
            && obs.jointly_observable
            && local_deficient
            && rel <= STATE_REL_TOL
            && semigroup <= SEMIGROUP_TOL;
        Ok((
            ok,
            format!(
                "local ranks {:?}, global rank {}, permutation exact: {perm_exact}, relative error {rel:.3e} after {:?} iterations, semigroup residual {semigroup:.1e}",
                obs.rank_local, obs.rank_global, res.stop_iter
            ),
        ))
    };
    match run() {
        Ok((ok, detail)) => {
            let elapsed = start.elapsed();
            Outcome::check(ok && within(elapsed, 10), format!("{detail}, {elapsed:?}"))
        }
        Err(e) => Outcome::check(false, e.to_string()),
    }
}

fn criterion_9() -> Outcome {
    let b = Builtin::Rand50x8;
    let ds = b.dataset().unwrap();
    let part = partition(&ds, b.agents()).unwrap();
    let stop = StopRule::new(1e-3, 10).unwrap();
    let mut checked = 0;
    let mut ok = true;
    for (id, lazy) in [(MethodId::Ipsg, false), (MethodId::Ipsg, true), (MethodId::Adam, false), (MethodId::AmsGrad, true)] {
        let method = match id {
            MethodId::Ipsg => Method::Ipsg(b.ipsg()),
            other => Benchmark::Ash608.method(other),
        };
        let mut cfg = RunConfig::new(method, 17, 5_000, stop);
        cfg.lazy_agents = lazy;
        let a = run_until_stop(&cfg, &ds, &part).map(|r| r.trace_csv());
        let c = run_until_stop(&cfg, &ds, &part).map(|r| r.trace_csv());
        match (a, c) {
            (Ok(a), Ok(c)) => {
                ok &= a.as_bytes() == c.as_bytes();
                checked += 1;
            }
            _ => ok = false,
        }
    }
    Outcome::check(ok && checked == 4, format!("{checked} method/agent-mode pairs repeated with byte-identical traces"))
}

fn main() {
    println!("acceptance criteria (data directory {})", data_dir().display());
    let regime = regime();
    let results = [
        ("1 unbiasedness identity", criterion_1()),
        ("2 pre-conditioner error bound", criterion_2()),
        ("3 one-step error recursion", criterion_3(&regime)),
        ("4 contraction for small delta", criterion_4(&regime)),
        ("5 exact convergence special case", criterion_5()),
        ("6 iteration-count ranking", criterion_6()),
        ("7 condition numbers", criterion_7()),
        ("8 state estimation", criterion_8()),
        ("9 determinism", criterion_9()),
    ];
    let mut hard_failures = 0;
    for (name, o) in &results {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail | Status::MissingData => "FAIL",
        };
        println!("{tag} criterion {name}: {}", o.detail);
        if matches!(o.status, Status::Fail) {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} criteria failed");
        std::process::exit(1);
    }
}
