//! Synchronous server/agent simulation.
//!
//! One round follows the four protocol steps: the server broadcasts its
//! estimate (and, for IPSG, the pre-conditioner); every agent samples one of
//! its own rows and replies with a gradient (and residual matrix); the server
//! draws one agent uniformly and applies only that reply. Agents own their
//! data: the server sees replies and nothing else.

use std::fmt::Write as _;

use serde::Serialize;

use crate::datasets::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::linalg::{vec_norm, Matrix};
use crate::optimizers::{
    precond_residuals_into, stoch_grad, BaselineState, GradientSample, IpsgState, Method, MethodId,
};
use crate::rng::{agent_stream, sample_uniform, stream, StreamRng, SERVER_STREAM};

/// What the server sends each agent at the start of a round.
pub struct Broadcast<'a> {
    pub x: &'a [f64],
    /// Present for IPSG only.
    pub k: Option<&'a Matrix>,
    pub beta: f64,
}

/// An agent's answer.
#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Gradient(Vec<f64>),
    Preconditioned(GradientSample),
}

/// One agent and its private rows.
pub struct AgentNode {
    pub id: usize,
    a: Matrix,
    b: Vec<f64>,
    rng: StreamRng,
    pick: usize,
    scratch: Vec<f64>,
}

impl AgentNode {
    pub fn new(id: usize, a: Matrix, b: Vec<f64>, rng: StreamRng) -> Result<Self> {
        if a.rows() == 0 || a.rows() != b.len() {
            return Err(Error::invalid(format!(
                "agent {id} needs at least one row and matching outputs"
            )));
        }
        let d = a.cols();
        Ok(AgentNode {
            id,
            a,
            b,
            rng,
            pick: 0,
            scratch: vec![0.0; d],
        })
    }

    pub fn local_rows(&self) -> usize {
        self.a.rows()
    }

    /// Draws this round's local row. Kept separate from [`respond`] so a
    /// round can advance every agent's stream even when only one reply is
    /// evaluated.
    ///
    /// [`respond`]: AgentNode::respond
    pub fn draw(&mut self) -> usize {
        self.pick = sample_uniform(&mut self.rng, self.a.rows()).expect("agent has rows");
        self.pick
    }

    pub fn last_pick(&self) -> usize {
        self.pick
    }

    /// Computes the reply for the row chosen by the last [`draw`](AgentNode::draw).
    pub fn respond(&mut self, msg: &Broadcast<'_>) -> Result<Reply> {
        let row = self.a.row(self.pick);
        let g = stoch_grad(msg.x, row, self.b[self.pick])?;
        match msg.k {
            None => Ok(Reply::Gradient(g)),
            Some(k) => {
                let d = row.len();
                if k.shape() != (d, d) {
                    return Err(Error::invalid("broadcast pre-conditioner has wrong shape"));
                }
                let mut rmat = Matrix::zeros(d, d);
                precond_residuals_into(k, row, msg.beta, &mut self.scratch, &mut rmat);
                Ok(Reply::Preconditioned(GradientSample { g, rmat }))
            }
        }
    }
}

/// Server-side optimizer state.
#[derive(Clone, Debug)]
pub enum ServerState {
    Ipsg(IpsgState),
    Baseline(BaselineState),
}

impl ServerState {
    pub fn new(method: &Method, x0: Vec<f64>, k0: Option<Matrix>) -> Result<Self> {
        match method {
            Method::Ipsg(p) => {
                let d = x0.len();
                let k0 = k0.unwrap_or_else(|| Matrix::zeros(d, d));
                Ok(ServerState::Ipsg(IpsgState::new(x0, k0, *p)?))
            }
            Method::Baseline(p) => Ok(ServerState::Baseline(BaselineState::new(x0, *p)?)),
        }
    }

    pub fn x(&self) -> &[f64] {
        match self {
            ServerState::Ipsg(s) => &s.x,
            ServerState::Baseline(s) => &s.x,
        }
    }

    fn broadcast(&self) -> Broadcast<'_> {
        match self {
            ServerState::Ipsg(s) => Broadcast {
                x: &s.x,
                k: Some(&s.k),
                beta: s.params.beta,
            },
            ServerState::Baseline(s) => Broadcast {
                x: &s.x,
                k: None,
                beta: 0.0,
            },
        }
    }

    fn apply(&mut self, reply: &Reply) -> Result<()> {
        match (self, reply) {
            (ServerState::Ipsg(s), Reply::Preconditioned(sample)) => s.apply(sample),
            (ServerState::Baseline(s), Reply::Gradient(g)) => s.apply(g),
            _ => Err(Error::invalid("reply kind does not match the server method")),
        }
    }
}

/// Message and byte counters for both directions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Traffic {
    pub messages_up: u64,
    pub messages_down: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Which agent and which of its rows a round consumed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundInfo {
    pub agent: usize,
    pub local_row: usize,
    pub global_row: usize,
}

/// Synchronous server plus agents.
pub struct Simulation {
    server: ServerState,
    agents: Vec<AgentNode>,
    offsets: Vec<usize>,
    server_rng: StreamRng,
    traffic: Traffic,
    iteration: u64,
    lazy_agents: bool,
}

impl Simulation {
    pub fn new(
        method: &Method,
        ds: &Dataset,
        part: &Partition,
        seed: u64,
        x0: Vec<f64>,
        k0: Option<Matrix>,
    ) -> Result<Self> {
        method.validate()?;
        if part.total_rows() != ds.n_rows() {
            return Err(Error::invalid(format!(
                "partition covers {} rows, dataset has {}",
                part.total_rows(),
                ds.n_rows()
            )));
        }
        let n = part.block_size();
        if part.blocks.iter().any(|b| b.len() != n) {
            return Err(Error::invalid("agents must hold equally many rows"));
        }
        if x0.len() != ds.dim() {
            return Err(Error::invalid(format!(
                "initial estimate has length {}, expected {}",
                x0.len(),
                ds.dim()
            )));
        }
        let agents = part
            .blocks
            .iter()
            .enumerate()
            .map(|(i, rows)| {
                AgentNode::new(
                    i,
                    ds.a.row_block(rows.clone()),
                    ds.b[rows.clone()].to_vec(),
                    agent_stream(seed, i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Simulation {
            server: ServerState::new(method, x0, k0)?,
            agents,
            offsets: part.blocks.iter().map(|b| b.start).collect(),
            server_rng: stream(seed, SERVER_STREAM),
            traffic: Traffic::default(),
            iteration: 0,
            lazy_agents: false,
        })
    }

    /// Only the agent the server will consume evaluates its reply; every
    /// agent still draws its row, so trajectories and traffic counters are
    /// identical to the eager protocol.
    pub fn with_lazy_agents(mut self, lazy: bool) -> Self {
        self.lazy_agents = lazy;
        self
    }

    pub fn x(&self) -> &[f64] {
        self.server.x()
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn traffic(&self) -> Traffic {
        self.traffic
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn agents(&self) -> usize {
        self.agents.len()
    }

    /// Runs one synchronous round.
    pub fn round(&mut self) -> Result<RoundInfo> {
        let m = self.agents.len();
        let d = self.server.x().len();
        let per_msg = 8 * (d + if matches!(self.server, ServerState::Ipsg(_)) { d * d } else { 0 }) as u64;

        // step 2: every agent picks a local row
        for agent in &mut self.agents {
            agent.draw();
        }
        // step 4's draw; independent stream, so its position is immaterial
        let chosen = sample_uniform(&mut self.server_rng, m)?;

        let msg = self.server.broadcast();
        let reply = if self.lazy_agents {
            self.agents[chosen].respond(&msg)?
        } else {
            let mut replies = self
                .agents
                .iter_mut()
                .map(|a| a.respond(&msg))
                .collect::<Result<Vec<_>>>()?;
            replies.swap_remove(chosen)
        };
        self.server.apply(&reply).map_err(|e| match e {
            Error::Numerical(msg) => {
                Error::Numerical(format!("{msg} at iteration {}", self.iteration + 1))
            }
            other => other,
        })?;

        self.traffic.messages_down += m as u64;
        self.traffic.messages_up += m as u64;
        self.traffic.bytes_down += m as u64 * per_msg;
        self.traffic.bytes_up += m as u64 * per_msg;
        self.iteration += 1;

        let local_row = self.agents[chosen].last_pick();
        Ok(RoundInfo {
            agent: chosen,
            local_row,
            global_row: self.offsets[chosen] + local_row,
        })
    }
}

/// "Error at or below `eps_tol` for `window` consecutive iterations"; the
/// reported iteration is the last one of the first qualifying window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StopRule {
    pub eps_tol: f64,
    pub window: usize,
}

impl StopRule {
    pub const DEFAULT_WINDOW: usize = 10;

    pub fn new(eps_tol: f64, window: usize) -> Result<Self> {
        if !(eps_tol > 0.0) || window == 0 {
            return Err(Error::invalid(format!(
                "stopping rule needs eps_tol > 0 and window >= 1, got {eps_tol} and {window}"
            )));
        }
        Ok(StopRule { eps_tol, window })
    }

    /// First stopping iteration for a complete error trace.
    pub fn first_stop(&self, errors: &[f64]) -> Option<usize> {
        let mut run = 0;
        for (t, &e) in errors.iter().enumerate() {
            run = if e <= self.eps_tol { run + 1 } else { 0 };
            if run >= self.window {
                return Some(t);
            }
        }
        None
    }
}

/// How the error trace is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorScale {
    /// `‖x(t) − x*‖ / ‖x(0) − x*‖`
    Relative,
    /// `‖x(t) − x*‖`, used when `x(0) = x*` leaves the ratio undefined.
    Absolute,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub t_max: u64,
    pub stop: StopRule,
    /// Defaults to the zero vector.
    pub x0: Option<Vec<f64>>,
    /// IPSG only; defaults to the zero matrix.
    pub k0: Option<Matrix>,
    pub lazy_agents: bool,
}

impl RunConfig {
    pub fn new(method: Method, seed: u64, t_max: u64, stop: StopRule) -> Self {
        RunConfig {
            method,
            seed,
            t_max,
            stop,
            x0: None,
            k0: None,
            lazy_agents: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub method: MethodId,
    pub seed: u64,
    /// Error at iterations `0..=iterations`.
    pub errors: Vec<f64>,
    pub error_scale: ErrorScale,
    pub stop_iter: Option<u64>,
    pub iterations: u64,
    #[serde(flatten)]
    pub traffic: Traffic,
    pub final_x: Vec<f64>,
}

impl RunResult {
    pub fn final_error(&self) -> f64 {
        *self.errors.last().expect("trace always holds iteration 0")
    }

    /// `iter,error` CSV, one line per iteration starting at 0.
    pub fn trace_csv(&self) -> String {
        let mut s = String::with_capacity(self.errors.len() * 24 + 12);
        s.push_str("iter,error\n");
        for (t, e) in self.errors.iter().enumerate() {
            let _ = writeln!(s, "{t},{e}");
        }
        s
    }
}

/// Runs rounds until the stopping rule fires or `t_max` rounds have run.
pub fn run_until_stop(cfg: &RunConfig, ds: &Dataset, part: &Partition) -> Result<RunResult> {
    let x_star = ds.minimizer()?;
    let x0 = cfg.x0.clone().unwrap_or_else(|| vec![0.0; ds.dim()]);
    let mut sim = Simulation::new(&cfg.method, ds, part, cfg.seed, x0.clone(), cfg.k0.clone())?
        .with_lazy_agents(cfg.lazy_agents);

    let dist = |x: &[f64]| {
        x.iter()
            .zip(&x_star)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let initial = dist(&x0);
    let (scale, denom) = if initial > 0.0 {
        (ErrorScale::Relative, initial)
    } else {
        (ErrorScale::Absolute, 1.0)
    };

    let mut errors = Vec::with_capacity((cfg.t_max.min(1 << 20) + 1) as usize);
    let mut run = 0usize;
    let mut stop_iter = None;
    let mut record = |e: f64, t: u64, errors: &mut Vec<f64>| {
        errors.push(e);
        run = if e <= cfg.stop.eps_tol { run + 1 } else { 0 };
        if run >= cfg.stop.window {
            Some(t)
        } else {
            None
        }
    };

    if let Some(t) = record(initial / denom, 0, &mut errors) {
        stop_iter = Some(t);
    }
    while stop_iter.is_none() && sim.iteration() < cfg.t_max {
        sim.round()?;
        let e = dist(sim.x()) / denom;
        stop_iter = record(e, sim.iteration(), &mut errors);
    }

    Ok(RunResult {
        method: cfg.method.id(),
        seed: cfg.seed,
        errors,
        error_scale: scale,
        stop_iter,
        iterations: sim.iteration(),
        traffic: sim.traffic(),
        final_x: sim.x().to_vec(),
    })
}

/// `‖x − x*‖` helper for callers holding a result.
pub fn distance(x: &[f64], x_star: &[f64]) -> f64 {
    vec_norm(&crate::linalg::vec_sub(x, x_star))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{partition, Dataset};
    use crate::optimizers::{BaselineParams, IpsgParams};
    use crate::testutil::{random_matrix, random_vec, rng};

    fn small_problem(rows: usize, d: usize, seed: u64) -> Dataset {
        let mut r = rng(seed);
        Dataset::new("small", random_matrix(&mut r, rows, d), random_vec(&mut r, rows))
            .unwrap()
            .solved()
            .unwrap()
    }

    #[test]
    fn stop_rule_semantics() {
        let rule = StopRule::new(0.5, 10).unwrap();
        let mut errs = vec![1.0; 5];
        errs.extend(std::iter::repeat(0.4).take(30));
        assert_eq!(rule.first_stop(&errs), Some(14));
        let loose = StopRule::new(2.0, 10).unwrap();
        assert_eq!(loose.first_stop(&[1.0; 20]), Some(9));
        assert_eq!(rule.first_stop(&[1.0; 20]), None);
        assert!(StopRule::new(0.0, 10).is_err());
        assert!(StopRule::new(0.1, 0).is_err());
    }

    #[test]
    fn stop_rule_matches_streaming_detection() {
        let ds = small_problem(12, 3, 1);
        let part = partition(&ds, 3).unwrap();
        let method = Method::Baseline(BaselineParams::sgd(0.05));
        let cfg = RunConfig::new(method, 7, 2_000, StopRule::new(0.3, 10).unwrap());
        let res = run_until_stop(&cfg, &ds, &part).unwrap();
        let offline = cfg.stop.first_stop(&res.errors).map(|t| t as u64);
        assert_eq!(res.stop_iter, offline);
        if let Some(t) = res.stop_iter {
            assert_eq!(res.errors.len() as u64, t + 1);
        }
    }

    #[test]
    fn single_point_is_deterministic_full_gradient() {
        let ds = Dataset::new("one", Matrix::from_rows(&[vec![2.0]]).unwrap(), vec![3.0])
            .unwrap()
            .solved()
            .unwrap();
        let part = partition(&ds, 1).unwrap();
        let method = Method::Ipsg(IpsgParams { alpha: 0.1, delta: 1.0, beta: 1.0 });
        let cfg = RunConfig::new(method, 3, 50, StopRule::new(1e-30, 10).unwrap());
        let a = run_until_stop(&cfg, &ds, &part).unwrap();
        let b = run_until_stop(&RunConfig { seed: 99, ..cfg.clone() }, &ds, &part).unwrap();
        assert_eq!(a.errors, b.errors);
        assert_eq!(a.errors[0], 1.0);
    }

    #[test]
    fn zero_agent_leaves_sgd_unchanged() {
        let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let ds = Dataset::new("z", a, vec![1.0, 0.0]).unwrap();
        let part = partition(&ds, 2).unwrap();
        let method = Method::Baseline(BaselineParams::sgd(0.1));
        let mut sim = Simulation::new(&method, &ds, &part, 11, vec![0.3, 0.3], None).unwrap();
        let mut hits = 0;
        for _ in 0..100 {
            let before = sim.x().to_vec();
            let info = sim.round().unwrap();
            if info.agent == 1 {
                hits += 1;
                assert_eq!(sim.x(), &before[..]);
            }
        }
        assert!(hits > 0);
    }

    #[test]
    fn consumed_rows_are_uniform_over_all_points() {
        let ds = small_problem(12, 2, 2);
        let part = partition(&ds, 3).unwrap();
        let method = Method::Baseline(BaselineParams::sgd(1e-3));
        let mut sim = Simulation::new(&method, &ds, &part, 5, vec![0.0; 2], None).unwrap();
        let rounds = 100_000;
        let mut counts = vec![0usize; 12];
        for _ in 0..rounds {
            counts[sim.round().unwrap().global_row] += 1;
        }
        let expected = rounds as f64 / 12.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 0.999 quantile of chi-square with 11 dof (Wilson-Hilferty)
        let k = 11.0f64;
        let z = 3.090_232;
        let crit = k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3);
        assert!(chi2 < crit, "chi2 = {chi2}, critical = {crit}");
    }

    #[test]
    fn two_stage_law_is_uniform_by_enumeration() {
        for (n_rows, m) in [(12, 3), (608, 8), (1500, 10)] {
            let part = crate::datasets::partition_rows(n_rows, m).unwrap();
            let mut prob = vec![0.0; n_rows];
            for block in &part.blocks {
                for r in block.clone() {
                    prob[r] += (1.0 / m as f64) * (1.0 / block.len() as f64);
                }
            }
            assert!(prob.iter().all(|p| (p - 1.0 / n_rows as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn traffic_accounting() {
        let ds = small_problem(8, 3, 3);
        let part = partition(&ds, 4).unwrap();
        let method = Method::Ipsg(IpsgParams { alpha: 0.01, delta: 0.5, beta: 1.0 });
        let cfg = RunConfig::new(method, 1, 25, StopRule::new(1e-12, 10).unwrap());
        let res = run_until_stop(&cfg, &ds, &part).unwrap();
        assert_eq!(res.iterations, 25);
        assert_eq!(res.traffic.messages_down, 4 * 25);
        assert_eq!(res.traffic.messages_up, 4 * 25);
        assert_eq!(res.traffic.bytes_down, 4 * 25 * 8 * (3 + 9));
    }

    #[test]
    fn lazy_agents_replay_eager_trajectory() {
        let ds = small_problem(20, 4, 4);
        let part = partition(&ds, 5).unwrap();
        let method = Method::Ipsg(IpsgParams { alpha: 0.02, delta: 0.7, beta: 1.0 });
        let cfg = RunConfig::new(method, 42, 300, StopRule::new(1e-9, 10).unwrap());
        let eager = run_until_stop(&cfg, &ds, &part).unwrap();
        let lazy = run_until_stop(&RunConfig { lazy_agents: true, ..cfg }, &ds, &part).unwrap();
        assert_eq!(eager.errors, lazy.errors);
        assert_eq!(eager.traffic, lazy.traffic);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let ds = small_problem(30, 3, 5);
        let part = partition(&ds, 3).unwrap();
        for method in [
            Method::Ipsg(IpsgParams { alpha: 0.05, delta: 1.0, beta: 1.0 }),
            Method::Baseline(BaselineParams::adam(
                crate::optimizers::StepSize::InvSqrt(0.1),
                0.9,
                0.999,
                1e-7,
            )),
        ] {
            let cfg = RunConfig::new(method, 1234, 500, StopRule::new(1e-6, 10).unwrap());
            let a = run_until_stop(&cfg, &ds, &part).unwrap();
            let b = run_until_stop(&cfg, &ds, &part).unwrap();
            assert_eq!(a.trace_csv(), b.trace_csv());
        }
    }

    #[test]
    fn t_max_zero_trace() {
        let ds = small_problem(6, 2, 6);
        let part = partition(&ds, 2).unwrap();
        let cfg = RunConfig::new(
            Method::Baseline(BaselineParams::sgd(0.1)),
            0,
            0,
            StopRule::new(1e-4, 10).unwrap(),
        );
        let res = run_until_stop(&cfg, &ds, &part).unwrap();
        assert_eq!(res.trace_csv(), "iter,error\n0,1\n");
        assert_eq!(res.stop_iter, None);
    }

    #[test]
    fn start_at_minimizer_uses_absolute_error() {
        let ds = small_problem(6, 2, 7);
        let part = partition(&ds, 2).unwrap();
        let mut cfg = RunConfig::new(
            Method::Baseline(BaselineParams::sgd(0.01)),
            0,
            5,
            StopRule::new(1e-3, 3).unwrap(),
        );
        cfg.x0 = Some(ds.minimizer().unwrap());
        let res = run_until_stop(&cfg, &ds, &part).unwrap();
        assert_eq!(res.error_scale, ErrorScale::Absolute);
        assert_eq!(res.errors[0], 0.0);
    }
}
