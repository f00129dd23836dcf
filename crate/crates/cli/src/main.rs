//! `ipsg`: run, compare and analyse distributed least-squares solvers on a
//! simulated server-agent network.

mod config;
mod experiment;
mod output;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ipsg_core::datasets::write_matrix_market;
use ipsg_core::linalg::{vec_norm, vec_sub, Matrix};
use ipsg_core::optimizers::{Method, MethodId};
use ipsg_core::presets::Builtin;
use ipsg_core::simnet::{RunConfig, StopRule};
use ipsg_core::stateest::{self, LtiSystem};
use ipsg_core::theory::{self, ConstantsReport, SuiteOptions};

use config::{parse_seeds, resolve_method, ConfigFile, ParamFlags};
use experiment::{default_data_dir, execute, load_problem, summary_records, Plan, Problem};
use output::{median_stop, summary_csv, svg_chart, trace_file_name, write, SummaryRecord};

#[derive(Parser)]
#[command(name = "ipsg", version, about = "Distributed least-squares experiments with iteratively pre-conditioned SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more methods over a list of seeds.
    Run(ExperimentArgs),
    /// Run all five methods and rank them by median stop iteration.
    Compare(ExperimentArgs),
    /// Report the convergence constants for a dataset and parameter choice.
    Constants(ConstantsArgs),
    /// Check the analytical bounds on small built-in problems.
    Verify(VerifyArgs),
    /// Recover the initial state of a linear system from distributed outputs.
    Stateest(StateestArgs),
    /// Write the built-in problems and demo systems to disk.
    Datagen(DatagenArgs),
}

#[derive(Args, Clone, Default)]
struct ParamArgs {
    /// Step size (IPSG α, or the baseline step coefficient).
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// IPSG regularizer β.
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    /// IPSG estimate step δ.
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
}

impl ParamArgs {
    fn flags(&self) -> ParamFlags {
        ParamFlags { alpha: self.alpha, beta: self.beta, delta: self.delta }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    /// Benchmark name, built-in problem or path to a .mtx file.
    #[arg(long)]
    dataset: Option<String>,
    /// Methods to run, comma separated.
    #[arg(long = "method", alias = "methods", value_delimiter = ',')]
    methods: Vec<MethodId>,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long)]
    eps_tol: Option<f64>,
    /// Consecutive iterations below eps-tol needed to stop.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    t_max: Option<u64>,
    /// Seed list such as `1,2,3` or `0..4`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with defaults for any of these settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the benchmark files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Number of agents; defaults to the problem's own setting.
    #[arg(long)]
    agents: Option<usize>,
    /// Only the agent whose reply is consumed computes it.
    #[arg(long)]
    lazy_agents: bool,
    /// Also write an SVG chart of the error traces.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ConstantsArgs {
    #[arg(long)]
    dataset: String,
    #[command(flatten)]
    params: ParamArgs,
    /// Iterations at which to evaluate the time-varying terms.
    #[arg(long = "t", value_delimiter = ',')]
    ts: Vec<u64>,
    /// Probe points per radius for the gradient-noise estimate.
    #[arg(long, default_value_t = theory::DEFAULT_PROBES)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the noise estimate and the time-varying terms.
    #[arg(long)]
    no_noise: bool,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    agents: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// `full` or `quick` (fewer Monte Carlo trials).
    #[arg(long, default_value = "full")]
    suite: String,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Added to ρ in the pre-conditioner check, for fault injection.
    #[arg(long, default_value_t = 0.0)]
    rho_offset: f64,
    /// Fixes α for the recursion check instead of choosing it.
    #[arg(long)]
    alpha: Option<f64>,
    /// Write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct StateestArgs {
    /// System file; see docs/system-file.md.
    #[arg(long, conflicts_with = "demo")]
    system: Option<PathBuf>,
    /// Built-in system: `observable` or `unobservable`.
    #[arg(long)]
    demo: Option<String>,
    /// True initial state used to simulate the outputs.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    z0: Option<Vec<f64>>,
    #[arg(long, default_value = "ipsg")]
    method: MethodId,
    #[command(flatten)]
    params: ParamArgs,
    #[arg(long, default_value_t = 1e-5)]
    eps_tol: f64,
    #[arg(long, default_value_t = StopRule::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 20_000)]
    t_max: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Times at which to report the propagated state estimate.
    #[arg(long, value_delimiter = ',')]
    propagate: Vec<u64>,
    #[arg(long, default_value = "out/stateest")]
    out: PathBuf,
}

#[derive(Args)]
struct DatagenArgs {
    #[arg(long, default_value = "out/data")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_experiment(a, false),
        Command::Compare(a) => cmd_experiment(a, true),
        Command::Constants(a) => cmd_constants(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Stateest(a) => cmd_stateest(a),
        Command::Datagen(a) => cmd_datagen(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

/// 1 for bad input, 2 for numerical or verification failures.
fn exit_status(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<ipsg_core::Error>()) {
        Some(core) if !core.is_validation() => 2,
        _ => 1,
    }
}

fn cmd_experiment(args: ExperimentArgs, compare: bool) -> Result<ExitCode> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let Some(dataset) = args.dataset.clone().or_else(|| file.dataset.clone()) else {
        bail!("no dataset given (use --dataset or the config file)");
    };
    let data_dir = args.data_dir.clone().or_else(|| file.data_dir.clone()).unwrap_or_else(default_data_dir);
    let problem = load_problem(&dataset, &data_dir, args.agents.or(file.agents))?;

    let ids: Vec<MethodId> = if !args.methods.is_empty() {
        args.methods.clone()
    } else if let Some(names) = &file.methods {
        names.iter().map(|n| n.parse()).collect::<ipsg_core::Result<_>>()?
    } else if compare {
        MethodId::ALL.to_vec()
    } else {
        vec![MethodId::Ipsg]
    };
    let mut methods = Vec::new();
    for id in dedup(ids) {
        let flags = if id == MethodId::Ipsg || !compare {
            args.params.flags()
        } else {
            ParamFlags::default()
        };
        methods.push(resolve_method(problem.base_method(id), &file, flags).with_context(|| format!("parameters for {id}"))?);
    }
    let seeds = match (&args.seeds, &file.seeds) {
        (Some(s), _) => parse_seeds(s)?,
        (None, Some(v)) if !v.is_empty() => v.clone(),
        (None, Some(_)) => bail!("seed list in the config file is empty"),
        (None, None) if compare => (0..5).collect(),
        (None, None) => vec![0],
    };
    let plan = Plan {
        methods,
        seeds,
        eps_tol: args.eps_tol.or(file.eps_tol).unwrap_or_else(|| problem.eps_tol()),
        window: args.window.or(file.window).unwrap_or(StopRule::DEFAULT_WINDOW),
        t_max: args.t_max.or(file.t_max).unwrap_or_else(|| problem.t_max()),
        x0: problem.x0(),
        lazy_agents: args.lazy_agents || file.lazy_agents.unwrap_or(false),
    };
    let out = args.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let svg = args.svg || file.svg.unwrap_or(false);

    let kappa = problem.kappa()?;
    let outcomes = execute(&problem, &plan)?;
    let records = summary_records(&problem, kappa, &outcomes);

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for o in &outcomes {
        let r = &o.result;
        write(&out.join(trace_file_name(&problem.label, r.method, r.seed)), &r.trace_csv())?;
    }
    write(&out.join("summary.csv"), &summary_csv(&records))?;
    write(&out.join("metadata.json"), &metadata(&problem, &plan, kappa, &outcomes)?)?;
    if svg {
        let runs: Vec<_> = outcomes.iter().map(|o| o.result.clone()).collect();
        write(&out.join("errors.svg"), &svg_chart(&format!("{}: relative error", problem.label), &runs))?;
    }

    print!("{}", summary_csv(&records));
    if compare {
        print_ranking(&records);
    }
    eprintln!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn dedup(ids: Vec<MethodId>) -> Vec<MethodId> {
    let mut seen = Vec::new();
    for id in ids {
        if !seen.contains(&id) {
            seen.push(id);
        }
    }
    seen
}

fn metadata(problem: &Problem, plan: &Plan, kappa: f64, outcomes: &[experiment::Outcome]) -> Result<String> {
    let runs: Vec<_> = outcomes
        .iter()
        .map(|o| {
            let r = &o.result;
            json!({
                "method": r.method,
                "seed": r.seed,
                "stop_iter": r.stop_iter,
                "iterations": r.iterations,
                "final_error": r.final_error(),
                "error_scale": r.error_scale,
                "messages_up": r.traffic.messages_up,
                "messages_down": r.traffic.messages_down,
                "bytes_up": r.traffic.bytes_up,
                "bytes_down": r.traffic.bytes_down,
            })
        })
        .collect();
    let doc = json!({
        "dataset": problem.label,
        "provenance": problem.ds.provenance,
        "rows": problem.ds.n_rows(),
        "dim": problem.ds.dim(),
        "agents": problem.part.agents(),
        "kappa": kappa,
        "stopping_rule": {
            "eps_tol": plan.eps_tol,
            "window": plan.window,
            "semantics": output::STOPPING_NOTE,
        },
        "standardization": output::STANDARDIZATION_NOTE,
        "t_max": plan.t_max,
        "x0": plan.x0,
        "seeds": plan.seeds,
        "lazy_agents": plan.lazy_agents,
        "methods": plan.methods,
        "runs": runs,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

fn print_ranking(records: &[SummaryRecord]) {
    let mut by_method: BTreeMap<MethodId, Vec<&SummaryRecord>> = BTreeMap::new();
    for r in records {
        by_method.entry(r.method).or_default().push(r);
    }
    let mut medians: Vec<(MethodId, Option<f64>, f64)> = by_method
        .iter()
        .map(|(m, rs)| {
            let mut fe: Vec<f64> = rs.iter().map(|r| r.final_error).collect();
            fe.sort_by(f64::total_cmp);
            (*m, median_stop(rs), fe[fe.len() / 2])
        })
        .collect();
    for (m, med, _) in &medians {
        match med {
            Some(v) => println!("median stop_iter {m}: {v}"),
            None => println!("median stop_iter {m}: none"),
        }
    }
    // Methods that never stopped go last, ordered by final error.
    medians.sort_by(|a, b| {
        let key = |x: &(MethodId, Option<f64>, f64)| x.1.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.2.total_cmp(&b.2))
    });
    let line: Vec<String> = medians.iter().map(|(m, _, _)| m.to_string()).collect();
    println!("ranking (fastest first): {}", line.join(" < "));
}

fn cmd_constants(args: ConstantsArgs) -> Result<ExitCode> {
    let data_dir = args.data_dir.clone().unwrap_or_else(default_data_dir);
    let problem = load_problem(&args.dataset, &data_dir, args.agents)?;
    let params = match resolve_method(problem.base_method(MethodId::Ipsg), &ConfigFile::default(), args.params.flags())? {
        Method::Ipsg(p) => p,
        Method::Baseline(_) => unreachable!("IPSG requested"),
    };
    let mut report = ConstantsReport::compute(&problem.ds, params, None)?;
    if !args.no_noise {
        let ts = if args.ts.is_empty() { theory::doubling_grid(1_000_000) } else { args.ts.clone() };
        let noise = theory::estimate_noise_bounds(&problem.ds, &problem.ds.minimizer()?, args.probes, args.seed)?;
        report = report.with_noise(noise, &ts)?;
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    let summary = format!(
        "dataset {}: kappa = {:.4}, alpha_bar = {:e}, rho = {:.6}, L = {:e}",
        problem.label, report.kappa, report.alpha_bar, report.rho, report.l
    );
    match &args.out {
        Some(p) => {
            write(p, &text)?;
            println!("{summary}");
        }
        None => {
            print!("{text}");
            eprintln!("{summary}");
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let mut opts = SuiteOptions { seed: args.seed, rho_offset: args.rho_offset, alpha: args.alpha, ..Default::default() };
    match args.suite.as_str() {
        "full" => {}
        "quick" => {
            opts.lemma_trials = 400;
            opts.step_trials = 4000;
        }
        other => bail!("unknown suite '{other}' (expected full or quick)"),
    }
    let report = theory::verification_suite(&opts)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(p) = &args.json {
        write(p, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    if report.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        eprintln!("{failed} of {} checks failed", report.checks.len());
        Ok(ExitCode::from(2))
    }
}

fn cmd_stateest(args: StateestArgs) -> Result<ExitCode> {
    let (sys, file_z0, label): (LtiSystem, Option<Vec<f64>>, String) = match (&args.system, args.demo.as_deref()) {
        (Some(p), _) => {
            let (s, z) = stateest::load_system(p)?;
            (s, z, p.display().to_string())
        }
        (None, None | Some("observable")) => (stateest::demo_observable(), Some(stateest::DEMO_Z0.to_vec()), "demo observable".into()),
        (None, Some("unobservable")) => (stateest::demo_unobservable(), Some(vec![1.0, 2.0, 3.0]), "demo unobservable".into()),
        (None, Some(other)) => bail!("unknown demo '{other}' (expected observable or unobservable)"),
    };
    let Some(z0) = args.z0.clone().or(file_z0) else {
        bail!("no initial state: give --z0 or a z0 line in the system file");
    };
    if z0.len() != sys.dim() {
        bail!("--z0 has {} entries but the system has {} states", z0.len(), sys.dim());
    }

    let obs = stateest::check_joint_observability(&sys)?;
    println!("system: {label}, {} states, {} agents", sys.dim(), sys.agents());
    println!("local observability ranks: {:?}", obs.rank_local);
    println!("global observability rank: {} of {}", obs.rank_global, sys.dim());
    if !obs.jointly_observable {
        eprintln!("warning: the agents are not jointly observable; the estimate converges to the least-norm solution, not necessarily the true initial state");
    }

    let meas = stateest::simulate_measurements(&sys, &z0)?;
    let base = match args.method {
        MethodId::Ipsg => Method::Ipsg(stateest::demo_params()),
        id => {
            let (ds, _) = stateest::to_regression(&sys, &meas)?;
            experiment::generic_method(id, &ds)
        }
    };
    let method = resolve_method(base, &ConfigFile::default(), args.params.flags())?;
    let cfg = RunConfig::new(method, args.seed, args.t_max, StopRule::new(args.eps_tol, args.window)?);
    let (z_hat, res) = stateest::estimate_initial_state(&sys, &meas, &cfg)?;
    let (ds, _) = stateest::to_regression(&sys, &meas)?;
    let oracle = ds.minimizer()?;
    let rel = vec_norm(&vec_sub(&z_hat, &oracle)) / vec_norm(&oracle).max(f64::MIN_POSITIVE);

    let mut propagated = Vec::new();
    for &t in &args.propagate {
        propagated.push(json!({ "t": t, "z": stateest::propagate(&sys.a_state, &z_hat, t)? }));
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write(&args.out.join("trace.csv"), &res.trace_csv())?;
    let doc = json!({
        "system": label,
        "method": method,
        "rank_local": obs.rank_local,
        "rank_global": obs.rank_global,
        "jointly_observable": obs.jointly_observable,
        "z0_true": z0,
        "z0_hat": z_hat,
        "z0_reference": oracle,
        "reference": if obs.jointly_observable { "least-squares solution" } else { "least-norm solution" },
        "relative_error": rel,
        "stop_iter": res.stop_iter,
        "iterations": res.iterations,
        "propagated": propagated,
    });
    write(&args.out.join("estimate.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))?;

    println!("stop_iter: {}", res.stop_iter.map_or_else(|| "none".into(), |v| v.to_string()));
    println!("z0_hat: {z_hat:?}");
    println!("relative error vs reference: {rel:e}");
    for p in &propagated {
        println!("z_hat({}) = {}", p["t"], p["z"]);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_datagen(args: DatagenArgs) -> Result<ExitCode> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for b in Builtin::ALL {
        let ds = b.dataset()?;
        let a_path = args.out.join(format!("{}_A.mtx", b.name()));
        let b_path = args.out.join(format!("{}_b.mtx", b.name()));
        write_matrix_market(&a_path, &ds.a)?;
        write_matrix_market(&b_path, &column(&ds.b))?;
        println!("{}: {}×{} -> {}", b.name(), ds.n_rows(), ds.dim(), a_path.display());
    }
    let demos = [
        ("demo_observable.sys", stateest::demo_observable(), stateest::DEMO_Z0.to_vec()),
        ("demo_unobservable.sys", stateest::demo_unobservable(), vec![1.0, 2.0, 3.0]),
    ];
    for (name, sys, z0) in demos {
        write(&args.out.join(name), &stateest::format_system(&sys, Some(&z0)))?;
        println!("{name}: {} states, {} agents", sys.dim(), sys.agents());
    }
    Ok(ExitCode::SUCCESS)
}

fn column(v: &[f64]) -> Matrix {
    Matrix::from_rows(&v.iter().map(|x| vec![*x]).collect::<Vec<_>>()).expect("one column")
}
