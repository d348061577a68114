//! Run configuration: a sectioned TOML file validated against every
//! cross-field constraint before anything executes. Unknown keys are
//! rejected, and parse errors carry the offending line.

use serde::Deserialize;
use thiserror::Error;

use crate::coding::CodingScheme;
use crate::engine::{Run, StepSchedule};
use crate::network::{MixingKind, MixingPolicy, Scenario, ServerGraph, StragglerModel, Topology};
use crate::problem;
use crate::rng::Rng;

const PROBLEM_STREAM: u64 = 101;
const CODING_STREAM: u64 = 102;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("problem generation failed: {0}")]
    Problem(#[from] problem::ProblemError),
    #[error("coding scheme construction failed: {0}")]
    Coding(#[from] crate::coding::CodingError),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSection {
    m: usize,
    n: usize,
    #[serde(default = "one")]
    partitions: usize,
    #[serde(default = "one")]
    workers_per_partition: usize,
    #[serde(default = "one_u64")]
    seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodingSection {
    #[serde(default)]
    s: usize,
    #[serde(default = "one_u64")]
    seed: u64,
    #[serde(default = "one")]
    replicas: usize,
}

impl Default for CodingSection {
    fn default() -> Self {
        CodingSection {
            s: 0,
            seed: 1,
            replicas: 1,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologySection {
    /// Defaults to the number of partitions.
    servers: Option<usize>,
    /// p+1 entries starting with the no-partition probability; defaults to
    /// gamma_0 = 0 and uniform over partitions.
    gamma: Option<Vec<f64>>,
    /// Pin server i to partition fixed_assignment[i] every iteration.
    fixed_assignment: Option<Vec<usize>>,
    /// Server-graph edges; absent means the complete graph.
    edges: Option<Vec<(usize, usize)>>,
    /// "metropolis" (doubly stochastic) or "row_stochastic".
    mixing: Option<String>,
    #[serde(default)]
    mu: f64,
    #[serde(default = "default_nu")]
    nu: f64,
}

impl Default for TopologySection {
    fn default() -> Self {
        TopologySection {
            servers: None,
            gamma: None,
            fixed_assignment: None,
            edges: None,
            mixing: None,
            mu: 0.0,
            nu: default_nu(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StragglerSection {
    #[serde(default = "one")]
    scenario: usize,
    #[serde(default = "one")]
    t_window: usize,
    #[serde(default)]
    h_max: usize,
    #[serde(default)]
    straggle_prob: f64,
    #[serde(default)]
    fresh_push: bool,
}

impl Default for StragglerSection {
    fn default() -> Self {
        StragglerSection {
            scenario: 1,
            t_window: 1,
            h_max: 0,
            straggle_prob: 0.0,
            fresh_push: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSection {
    #[serde(default = "one_f64")]
    a: f64,
    #[serde(default = "one_f64")]
    theta: f64,
    alpha_cap: Option<f64>,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            a: 1.0,
            theta: 1.0,
            alpha_cap: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlSection {
    #[serde(default = "default_iters")]
    max_iters: usize,
    /// Stopping threshold on max_i ||v_i(k+1) - v_i(k)||; 0 disables the
    /// rule and the run executes max_iters iterations.
    #[serde(default)]
    tol: f64,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default = "default_output")]
    output_dir: String,
    #[serde(default = "one")]
    jobs: usize,
    #[serde(default)]
    common_init: bool,
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection {
            max_iters: default_iters(),
            tol: 0.0,
            seeds: default_seeds(),
            output_dir: default_output(),
            jobs: 1,
            common_init: false,
        }
    }
}

fn one() -> usize {
    1
}
fn one_u64() -> u64 {
    1
}
fn one_f64() -> f64 {
    1.0
}
fn default_nu() -> f64 {
    1e-6
}
fn default_iters() -> usize {
    1000
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_output() -> String {
    "srdo_out".to_string()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: ProblemSection,
    #[serde(default)]
    coding: CodingSection,
    #[serde(default)]
    topology: TopologySection,
    #[serde(default)]
    stragglers: StragglerSection,
    #[serde(default)]
    schedule: ScheduleSection,
    #[serde(default)]
    control: ControlSection,
}

/// Fully validated run configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub m: usize,
    pub n_dim: usize,
    pub partitions: usize,
    pub workers_per_partition: usize,
    pub problem_seed: u64,
    pub s: usize,
    pub coding_seed: u64,
    pub replicas: usize,
    pub servers: usize,
    pub gamma: Vec<f64>,
    pub fixed_assignment: Option<Vec<usize>>,
    pub edges: Option<Vec<(usize, usize)>>,
    pub mixing: MixingKind,
    pub mu: f64,
    pub nu: f64,
    pub scenario: Scenario,
    pub t_window: usize,
    pub h_max: usize,
    pub straggle_prob: f64,
    pub fresh_push: bool,
    pub a: f64,
    pub theta: f64,
    pub alpha_cap: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub jobs: usize,
    pub common_init: bool,
    /// Non-fatal conditions worth surfacing before a run.
    pub warnings: Vec<String>,
}

/// Parse and validate a config document.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let p = raw.problem.partitions;
    let servers = raw.topology.servers.unwrap_or(p);
    let mut warnings = Vec::new();

    if raw.problem.partitions == 0 || raw.problem.workers_per_partition == 0 {
        return Err(ConfigError::Constraint(
            "partitions and workers_per_partition must be positive".into(),
        ));
    }
    if raw.problem.m % (p * raw.problem.workers_per_partition) != 0 {
        return Err(ConfigError::Constraint(format!(
            "m = {} must be divisible by partitions * workers = {}",
            raw.problem.m,
            p * raw.problem.workers_per_partition
        )));
    }
    if raw.problem.m <= raw.problem.n {
        return Err(ConfigError::Constraint(format!(
            "m = {} must exceed n = {}",
            raw.problem.m, raw.problem.n
        )));
    }
    if raw.coding.s >= raw.problem.workers_per_partition {
        return Err(ConfigError::Constraint(format!(
            "straggler budget s = {} must stay below workers_per_partition = {}",
            raw.coding.s, raw.problem.workers_per_partition
        )));
    }
    if raw.coding.replicas == 0 {
        return Err(ConfigError::Constraint("replicas must be positive".into()));
    }
    if !(raw.schedule.theta > 0.0 && raw.schedule.theta <= 1.0) {
        return Err(ConfigError::Constraint(format!(
            "theta = {} outside (0, 1]",
            raw.schedule.theta
        )));
    }
    if raw.schedule.a <= 0.0 {
        return Err(ConfigError::Constraint(
            "schedule offset a must be positive".into(),
        ));
    }
    if let Some(cap) = raw.schedule.alpha_cap {
        if cap <= 0.0 {
            return Err(ConfigError::Constraint("alpha_cap must be positive".into()));
        }
    }
    if !(0.0..=1.0).contains(&raw.stragglers.straggle_prob) {
        return Err(ConfigError::Constraint(format!(
            "straggle_prob = {} outside [0, 1]",
            raw.stragglers.straggle_prob
        )));
    }
    let scenario = match raw.stragglers.scenario {
        1 => Scenario::One,
        2 => Scenario::Two,
        3 => Scenario::Three,
        other => {
            return Err(ConfigError::Constraint(format!(
                "scenario must be 1, 2 or 3, got {other}"
            )))
        }
    };
    let mixing = match raw.topology.mixing.as_deref() {
        None | Some("metropolis") => MixingKind::DoublyStochasticMetropolis,
        Some("row_stochastic") => MixingKind::RowStochasticColumnBounded,
        Some(other) => {
            return Err(ConfigError::Constraint(format!(
                "mixing must be \"metropolis\" or \"row_stochastic\", got \"{other}\""
            )))
        }
    };
    if !(0.0..1.0).contains(&raw.topology.mu) {
        return Err(ConfigError::Constraint(format!(
            "mu = {} outside [0, 1)",
            raw.topology.mu
        )));
    }
    if raw.topology.nu <= 0.0 {
        return Err(ConfigError::Constraint("nu must be positive".into()));
    }
    let gamma = match &raw.topology.gamma {
        Some(g) => {
            let sum: f64 = g.iter().sum();
            if g.len() != p + 1
                || g.iter().any(|&x| !(0.0..=1.0).contains(&x))
                || (sum - 1.0).abs() > 1e-9
            {
                return Err(ConfigError::Constraint(format!(
                    "gamma must hold {} probabilities summing to 1",
                    p + 1
                )));
            }
            g.clone()
        }
        None => {
            let mut g = vec![0.0];
            g.extend(std::iter::repeat(1.0 / p as f64).take(p));
            g
        }
    };
    if let Some(fixed) = &raw.topology.fixed_assignment {
        if fixed.len() != servers || fixed.iter().any(|&x| x >= p) {
            return Err(ConfigError::Constraint(format!(
                "fixed_assignment needs {servers} entries below {p}"
            )));
        }
    }
    if let Some(edges) = &raw.topology.edges {
        for &(i, j) in edges {
            if i >= servers || j >= servers || i == j {
                return Err(ConfigError::Constraint(format!("bad edge ({i},{j})")));
            }
        }
        if !ServerGraph::from_edges(servers, edges).is_connected() {
            return Err(ConfigError::Constraint(
                "server graph is disconnected".into(),
            ));
        }
    }
    if raw.control.seeds.is_empty() {
        return Err(ConfigError::Constraint("seeds must not be empty".into()));
    }
    if raw.control.jobs == 0 {
        return Err(ConfigError::Constraint("jobs must be positive".into()));
    }

    // Condition p < 1 / gamma_min from the inconsistent-targets analysis:
    // warn, never reject.
    let gamma_min = gamma[1..]
        .iter()
        .copied()
        .filter(|&g| g > 0.0)
        .fold(f64::INFINITY, f64::min);
    if gamma_min.is_finite() && (p as f64) >= 1.0 / gamma_min {
        warnings.push(format!(
            "p = {p} is not below 1/gamma_min = {:.3}; the inconsistent-targets analysis does not cover this run",
            1.0 / gamma_min
        ));
    }

    let mut seeds = raw.control.seeds.clone();
    if let Ok(override_val) = std::env::var("SRDO_SEED_OVERRIDE") {
        let parsed: Result<Vec<u64>, _> = override_val
            .split(',')
            .map(|t| t.trim().parse::<u64>())
            .collect();
        match parsed {
            Ok(list) if !list.is_empty() => seeds = list,
            _ => {
                return Err(ConfigError::Constraint(format!(
                    "SRDO_SEED_OVERRIDE is not a comma-separated seed list: {override_val}"
                )))
            }
        }
    }

    Ok(RunConfig {
        m: raw.problem.m,
        n_dim: raw.problem.n,
        partitions: p,
        workers_per_partition: raw.problem.workers_per_partition,
        problem_seed: raw.problem.seed,
        s: raw.coding.s,
        coding_seed: raw.coding.seed,
        replicas: raw.coding.replicas,
        servers,
        gamma,
        fixed_assignment: raw.topology.fixed_assignment.clone(),
        edges: raw.topology.edges.clone(),
        mixing,
        mu: raw.topology.mu,
        nu: raw.topology.nu,
        scenario,
        t_window: raw.stragglers.t_window,
        h_max: raw.stragglers.h_max,
        straggle_prob: raw.stragglers.straggle_prob,
        fresh_push: raw.stragglers.fresh_push,
        a: raw.schedule.a,
        theta: raw.schedule.theta,
        alpha_cap: raw.schedule.alpha_cap,
        max_iters: raw.control.max_iters,
        tol: raw.control.tol,
        seeds,
        output_dir: raw.control.output_dir,
        jobs: raw.control.jobs,
        common_init: raw.control.common_init,
        warnings,
    })
}

impl RunConfig {
    pub fn with_scenario(&self, scenario: Scenario) -> RunConfig {
        RunConfig {
            scenario,
            ..self.clone()
        }
    }

    /// Materialize the run for one sweep seed. The problem varies with the
    /// seed; the coding schemes depend only on the coding seed, so a sweep
    /// exercises one fixed scheme set across many problem realizations.
    pub fn build_run(&self, seed: u64) -> Result<Run, ConfigError> {
        let mut problem_rng = Rng::stream(self.problem_seed, &[PROBLEM_STREAM, seed]);
        let problem = problem::generate(
            self.m,
            self.n_dim,
            self.partitions,
            self.workers_per_partition,
            &mut problem_rng,
        )?;
        let mut schemes = Vec::with_capacity(self.partitions);
        for partition in 0..self.partitions {
            let mut replicas = Vec::with_capacity(self.replicas);
            for r in 0..self.replicas {
                let mut rng = Rng::stream(
                    self.coding_seed,
                    &[CODING_STREAM, partition as u64, r as u64],
                );
                replicas.push(CodingScheme::build(
                    self.workers_per_partition,
                    self.s,
                    &mut rng,
                )?);
            }
            schemes.push(replicas);
        }
        let graph = match &self.edges {
            Some(edges) => ServerGraph::from_edges(self.servers, edges),
            None => ServerGraph::complete(self.servers),
        };
        Ok(Run {
            problem,
            topology: Topology {
                n_servers: self.servers,
                p_partitions: self.partitions,
                gamma: self.gamma.clone(),
                graph,
                fixed_assignment: self.fixed_assignment.clone(),
            },
            model: StragglerModel {
                s_per_partition: vec![self.s; self.partitions],
                t_window: self.t_window,
                h_max: self.h_max,
                mode: self.scenario,
                straggle_prob: self.straggle_prob,
                fresh_push: self.fresh_push,
            },
            policy: MixingPolicy {
                kind: self.mixing,
                mu: self.mu,
                nu: self.nu,
            },
            schemes,
            schedule: StepSchedule {
                offset: self.a,
                theta: self.theta,
                cap: self.alpha_cap,
            },
            seed,
            common_init: self.common_init,
            max_iters: self.max_iters,
            tol: self.tol,
        })
    }
}
