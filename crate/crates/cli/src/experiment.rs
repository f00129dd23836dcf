//! Problem resolution and the parallel run fan-out shared by `run` and
//! `compare`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Result};
use rayon::prelude::*;
use serde::Serialize;

use ipsg_core::datasets::{self, partition, Dataset, Partition};
use ipsg_core::linalg::{dot, gram, sym_eigenvalues};
use ipsg_core::optimizers::{BaselineParams, IpsgParams, Method, MethodId, StepSize};
use ipsg_core::presets::{Benchmark, Builtin, ADAPTIVE_EPS};
use ipsg_core::simnet::{run_until_stop, RunConfig, RunResult, StopRule};

use crate::output::SummaryRecord;

#[derive(Clone, Copy, Debug)]
pub enum Source {
    Benchmark(Benchmark),
    Builtin(Builtin),
    File,
}

/// A loaded problem ready for the simulator.
pub struct Problem {
    pub label: String,
    pub source: Source,
    pub ds: Dataset,
    pub part: Partition,
}

/// Default data directory: `IPSG_DATA_DIR`, else `./data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("IPSG_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Accepts a benchmark name, a built-in problem name or a Matrix Market path.
pub fn load_problem(spec: &str, data_dir: &Path, agents: Option<usize>) -> Result<Problem> {
    let (source, ds, default_agents) = if let Ok(b) = spec.parse::<Benchmark>() {
        (Source::Benchmark(b), b.load(data_dir)?, b.agents())
    } else if let Ok(b) = spec.parse::<Builtin>() {
        (Source::Builtin(b), b.dataset()?, b.agents())
    } else {
        let path = Path::new(spec);
        if !path.is_file() {
            bail!("'{spec}' is neither a known problem nor a readable file");
        }
        if path.extension().and_then(|e| e.to_str()) != Some("mtx") {
            bail!("only Matrix Market (.mtx) files can be used as a dataset path");
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("matrix");
        (Source::File, datasets::collection_dataset(name, path)?, 1)
    };
    let ds = ds.solved()?;
    let part = partition(&ds, agents.unwrap_or(default_agents))?;
    Ok(Problem { label: ds.name.clone(), source, ds, part })
}

impl Problem {
    /// Starting parameters for `id` before config and flag overrides.
    pub fn base_method(&self, id: MethodId) -> Method {
        match self.source {
            Source::Benchmark(b) => b.method(id),
            Source::Builtin(b) if id == MethodId::Ipsg => Method::Ipsg(b.ipsg()),
            _ => generic_method(id, &self.ds),
        }
    }

    pub fn x0(&self) -> Vec<f64> {
        match self.source {
            Source::Benchmark(b) => b.x0(self.ds.dim()),
            _ => vec![0.0; self.ds.dim()],
        }
    }

    pub fn eps_tol(&self) -> f64 {
        match self.source {
            Source::Benchmark(b) => b.eps_tol(),
            // The noisy built-ins settle a few percent away from x*.
            Source::Builtin(_) => 5e-2,
            Source::File => 1e-3,
        }
    }

    pub fn t_max(&self) -> u64 {
        match self.source {
            Source::Benchmark(b) => b.t_max(),
            _ => 20_000,
        }
    }

    /// `κ(AᵀA) = s1/sd`.
    pub fn kappa(&self) -> Result<f64> {
        let ev = sym_eigenvalues(&gram(&self.ds.a))?;
        Ok(ev[ev.len() - 1] / ev[0])
    }
}

/// Parameters for problems without tuned values, scaled by the largest
/// squared row norm so single-row steps stay stable.
pub fn generic_method(id: MethodId, ds: &Dataset) -> Method {
    let lam = ds.a.row_iter().map(|r| dot(r, r)).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let beta = 1.0;
    match id {
        MethodId::Ipsg => Method::Ipsg(IpsgParams { alpha: 1.0 / (lam + beta), delta: 0.5, beta }),
        MethodId::Sgd => Method::Baseline(BaselineParams::sgd(1.0 / lam)),
        MethodId::AdaGrad => Method::Baseline(BaselineParams::adagrad(StepSize::Constant(0.5), ADAPTIVE_EPS)),
        MethodId::Adam => Method::Baseline(BaselineParams::adam(StepSize::InvSqrt(0.1), 0.9, 0.999, ADAPTIVE_EPS)),
        MethodId::AmsGrad => {
            Method::Baseline(BaselineParams::amsgrad(StepSize::InvSqrt(0.1), 0.9, 0.999, ADAPTIVE_EPS))
        }
    }
}

/// Everything a batch of runs needs.
#[derive(Clone, Debug, Serialize)]
pub struct Plan {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub eps_tol: f64,
    pub window: usize,
    pub t_max: u64,
    pub x0: Vec<f64>,
    pub lazy_agents: bool,
}

pub struct Outcome {
    pub result: RunResult,
    pub wall_time_s: f64,
}

/// Runs every (method, seed) pair in parallel; results come back in
/// method-major, seed-minor order.
pub fn execute(problem: &Problem, plan: &Plan) -> ipsg_core::Result<Vec<Outcome>> {
    let stop = StopRule::new(plan.eps_tol, plan.window)?;
    let jobs: Vec<(Method, u64)> = plan
        .methods
        .iter()
        .flat_map(|m| plan.seeds.iter().map(move |&s| (*m, s)))
        .collect();
    jobs.par_iter()
        .map(|&(method, seed)| {
            let mut cfg = RunConfig::new(method, seed, plan.t_max, stop);
            cfg.x0 = Some(plan.x0.clone());
            cfg.lazy_agents = plan.lazy_agents;
            let start = Instant::now();
            let result = run_until_stop(&cfg, &problem.ds, &problem.part)?;
            Ok(Outcome { result, wall_time_s: start.elapsed().as_secs_f64() })
        })
        .collect()
}

pub fn summary_records(problem: &Problem, kappa: f64, outcomes: &[Outcome]) -> Vec<SummaryRecord> {
    outcomes
        .iter()
        .map(|o| SummaryRecord {
            dataset: problem.label.clone(),
            method: o.result.method,
            seed: o.result.seed,
            stop_iter: o.result.stop_iter,
            final_error: o.result.final_error(),
            iterations: o.result.iterations,
            kappa,
            wall_time_s: o.wall_time_s,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_builtins_and_rejects_unknown() {
        let p = load_problem("rand20x5", Path::new("."), None).unwrap();
        assert_eq!(p.part.agents(), 4);
        assert!(p.kappa().unwrap() >= 1.0);
        assert!(load_problem("nope", Path::new("."), None).is_err());
        let err = load_problem("ash608", Path::new("/nonexistent"), None).err().unwrap();
        assert!(err.to_string().contains("ash608.mtx"));
    }

    #[test]
    fn generic_parameters_validate() {
        let p = load_problem("rand50x8", Path::new("."), None).unwrap();
        for id in MethodId::ALL {
            p.base_method(id).validate().unwrap();
        }
    }

    #[test]
    fn results_keep_job_order() {
        let p = load_problem("rand20x5", Path::new("."), None).unwrap();
        let plan = Plan {
            methods: vec![p.base_method(MethodId::Sgd), p.base_method(MethodId::Ipsg)],
            seeds: vec![3, 1],
            eps_tol: 1e-2,
            window: 10,
            t_max: 50,
            x0: p.x0(),
            lazy_agents: false,
        };
        let out = execute(&p, &plan).unwrap();
        let order: Vec<(MethodId, u64)> = out.iter().map(|o| (o.result.method, o.result.seed)).collect();
        assert_eq!(
            order,
            vec![(MethodId::Sgd, 3), (MethodId::Sgd, 1), (MethodId::Ipsg, 3), (MethodId::Ipsg, 1)]
        );
    }
}
