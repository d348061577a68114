//! The SRDO iteration: push weighted averages to workers, compute coded
//! gradients (possibly at stale points), pull and decode one partition per
//! server, take the gradient step or hold, then mix estimates through W.
//!
//! One run is strictly sequential and deterministic in (config, seed).
//! The per-iteration perturbation R_i(k) = x_i(k+1) - [v_i(k) - alpha_k
//! grad f^(i)(v_i(k))] and epsilon_i(k) = x_i(k+1) - v_i(k) are recorded for
//! every decode, together with the analytical bound on ||R_i(k)|| that
//! matches how the decode actually went (full-row form, or the two-term form
//! when fewer than n-s workers contributed).

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::coding::{decode, select_decode_row, CodingError, CodingScheme, StragglerSet};
use crate::linalg::{self, norm2, sub, Matrix};
use crate::metrics::{self, Trace};
use crate::network::{
    build_w, sample_assignment, sample_delay, sample_stragglers, tags, MixingPolicy, NetworkError,
    Scenario, StragglerModel, Topology,
};
use crate::problem::{partition_gradient, sub_gradient, Problem};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("iterate diverged at k = {k} (AE = {ae})")]
    Diverged {
        k: usize,
        ae: f64,
        trace: Box<Trace>,
    },
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

/// Diminishing coordinated step sizes alpha_k = (k + a)^(-theta), optionally
/// clamped from above.
#[derive(Clone, Debug)]
pub struct StepSchedule {
    pub offset: f64,
    pub theta: f64,
    pub cap: Option<f64>,
}

impl StepSchedule {
    pub fn alpha(&self, k: usize) -> f64 {
        let a = (k as f64 + self.offset).powf(-self.theta);
        match self.cap {
            Some(c) => a.min(c),
            None => a,
        }
    }

    /// The analysis cap alpha^2 <= mu (1 - gamma_0)^2 / (8 L^2), as a value
    /// for `cap`. Meaningful only for the column-bounded mixing variant
    /// (mu > 0).
    pub fn analysis_cap(mu: f64, gamma0: f64, lipschitz: f64) -> f64 {
        (mu * (1.0 - gamma0) * (1.0 - gamma0) / (8.0 * lipschitz * lipschitz)).sqrt()
    }
}

/// Per-server iterate and weighted average.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
struct CachedGradient {
    gradient: Vec<f64>,
    #[allow(dead_code)]
    source: usize,
    /// Iteration whose weighted average the gradient was evaluated at.
    eval_k: usize,
}

/// How a server obtained its decoded gradient this iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Full decode row over n-s fresh coded gradients.
    Full,
    /// Fewer than n-s contributors; row coefficients restricted to them.
    Restricted,
    /// Full decode row completed with cached stale coded gradients.
    FullWithStale,
    /// Restricted decode that also used cached stale coded gradients.
    RestrictedWithStale,
    /// Nothing decodable; the server held its weighted average.
    Hold,
}

#[derive(Clone, Debug)]
pub struct ServerRecord {
    pub partition: Option<usize>,
    pub mode: DecodeMode,
    pub straggler_count: usize,
    pub x_err: f64,
    pub v_err: f64,
    pub r_norm: Option<f64>,
    pub r_bound: Option<f64>,
    pub eps_norm: f64,
}

#[derive(Clone, Debug)]
pub struct IterationRecord {
    pub k: usize,
    pub alpha: f64,
    pub ae: f64,
    pub ce: f64,
    pub objective: f64,
    pub servers: Vec<ServerRecord>,
    pub total_stragglers: usize,
    pub decodes: usize,
    pub max_r: f64,
    pub max_r_bound: f64,
    pub r_bound_violations: usize,
}

impl IterationRecord {
    /// A record whose norms left the representable range marks the
    /// divergence point of the run.
    pub fn is_finite(&self) -> bool {
        self.ae.is_finite()
            && self.ce.is_finite()
            && self.objective.is_finite()
            && self.max_r.is_finite()
            && self.max_r_bound.is_finite()
    }
}

/// Everything needed to execute one run.
#[derive(Clone, Debug)]
pub struct Run {
    pub problem: Problem,
    pub topology: Topology,
    pub model: StragglerModel,
    pub policy: MixingPolicy,
    /// One scheme per partition replica group: schemes[partition][replica].
    pub schemes: Vec<Vec<CodingScheme>>,
    pub schedule: StepSchedule,
    pub seed: u64,
    /// All servers start from the same weighted average (uncoded-GD setup).
    pub common_init: bool,
    pub max_iters: usize,
    pub tol: f64,
}

impl Run {
    pub fn replicas(&self) -> usize {
        self.schemes[0].len()
    }

    fn group_tag(&self, partition: usize, replica: usize) -> usize {
        partition * self.replicas() + replica
    }

    /// Global Lipschitz constant, max over partitions.
    pub fn lipschitz(&self) -> f64 {
        self.problem
            .partitions
            .iter()
            .map(|p| p.lipschitz)
            .fold(0.0, f64::max)
    }
}

/// Initial states: v_i(0) uniform in [-1,1]^N (all equal under common_init),
/// x_i(0) = v_i(0).
pub fn init(run: &Run) -> Vec<ServerState> {
    let n = run.topology.n_servers;
    let dim = run.problem.dim();
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        let tag = if run.common_init { 0 } else { i as u64 };
        let mut rng = Rng::stream(run.seed, &[tags::INIT, tag]);
        let v = linalg::uniform_vector(dim, -1.0, 1.0, &mut rng);
        states.push(ServerState { x: v.clone(), v });
    }
    states
}

/// Coded gradient of worker j in partition `iota` at the given point:
/// the B-row combination of the partition's sub-gradients.
pub fn worker_gradient(
    problem: &Problem,
    scheme: &CodingScheme,
    iota: usize,
    j: usize,
    point: &[f64],
) -> Vec<f64> {
    let mut acc = vec![0.0; problem.dim()];
    for l in scheme.encode_support(j) {
        linalg::axpy(
            &mut acc,
            scheme.b[(j, l)],
            &sub_gradient(problem, iota, l, point),
        );
    }
    acc
}

struct DecodeOutcome {
    fhat: Vec<f64>,
    mode: DecodeMode,
    row: usize,
    /// Workers whose coefficients contributed.
    active: Vec<usize>,
    /// Support workers of the row that did not contribute (two-term bound).
    missing: Vec<usize>,
}

/// The in-flight state of a run.
pub struct Execution<'a> {
    run: &'a Run,
    pub states: Vec<ServerState>,
    /// v snapshots for iterations k-H..=k (front is oldest).
    v_hist: VecDeque<Vec<Vec<f64>>>,
    hist_base: usize,
    caches: Vec<Vec<Option<CachedGradient>>>,
    w: Matrix,
}

impl<'a> Execution<'a> {
    pub fn new(run: &'a Run) -> Result<Self, EngineError> {
        run.topology.validate()?;
        let states = init(run);
        let mut v_hist = VecDeque::new();
        v_hist.push_back(states.iter().map(|s| s.v.clone()).collect());
        let groups = run.topology.p_partitions * run.replicas();
        let workers = run.problem.workers_per_partition();
        let w = build_w(&run.policy, &run.topology.graph, 0)?;
        Ok(Execution {
            run,
            states,
            v_hist,
            hist_base: 0,
            caches: vec![vec![None; workers]; groups],
            w,
        })
    }

    fn v_at(&self, k: usize, server: usize) -> &[f64] {
        &self.v_hist[k - self.hist_base][server]
    }

    /// max over the staleness window [k-H, k] and servers of ||v_q - x*||.
    fn window_max_dist(&self) -> f64 {
        let x_star = &self.run.problem.x_star;
        self.v_hist
            .iter()
            .flat_map(|snap| snap.iter())
            .map(|v| norm2(&sub(v, x_star)))
            .fold(0.0, f64::max)
    }

    /// Push to every worker of one group, compute fresh coded gradients, and
    /// refresh the cache. Returns the straggler set.
    fn compute_group(&mut self, k: usize, iota: usize, replica: usize) -> StragglerSet {
        let run = self.run;
        let workers = run.problem.workers_per_partition();
        let group = run.group_tag(iota, replica);
        let stragglers = sample_stragglers(&run.model, workers, iota, replica, k, run.seed);
        let scheme = &run.schemes[iota][replica];
        let n_servers = run.topology.n_servers;
        for &j in stragglers.connected() {
            let d = sample_delay(&run.model, group, j, k, run.seed).min(k);
            let source = match &run.topology.fixed_assignment {
                Some(assign) => assign.iter().position(|&p| p == iota).unwrap_or_else(|| {
                    let mut rng = Rng::stream(
                        run.seed,
                        &[tags::PUSH_SOURCE, k as u64, group as u64, j as u64],
                    );
                    rng.below(n_servers as u64) as usize
                }),
                None => {
                    let mut rng = Rng::stream(
                        run.seed,
                        &[tags::PUSH_SOURCE, k as u64, group as u64, j as u64],
                    );
                    rng.below(n_servers as u64) as usize
                }
            };
            let eval_k = k - d;
            let point = self.v_at(eval_k, source).to_vec();
            let gradient = worker_gradient(&run.problem, scheme, iota, j, &point);
            self.caches[group][j] = Some(CachedGradient {
                gradient,
                source,
                eval_k,
            });
        }
        stragglers
    }

    /// Collect this iteration's decodable gradients for one server and
    /// decode them according to the scenario. None means hold.
    fn pull_and_decode(
        &self,
        k: usize,
        iota: usize,
        replica: usize,
        stragglers: &StragglerSet,
    ) -> Result<Option<DecodeOutcome>, EngineError> {
        let run = self.run;
        let scheme = &run.schemes[iota][replica];
        let group = run.group_tag(iota, replica);
        let workers = run.problem.workers_per_partition();
        let need = scheme.n_workers - scheme.s;

        let mut coded: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &j in stragglers.connected() {
            let entry = self.caches[group][j]
                .as_ref()
                .expect("fresh gradient cached");
            coded.insert(j, entry.gradient.clone());
        }
        let mut used_stale = false;
        if run.model.mode == Scenario::Three {
            for j in stragglers.stragglers() {
                if let Some(entry) = &self.caches[group][j] {
                    if k - entry.eval_k <= run.model.h_max {
                        coded.insert(j, entry.gradient.clone());
                        used_stale = true;
                    }
                }
            }
        }
        if run.model.mode == Scenario::One {
            assert!(
                coded.len() >= need,
                "scenario 1 guarantees at least n-s connected workers"
            );
        }
        if coded.is_empty() {
            return Ok(None);
        }
        let available = StragglerSet::new(coded.keys().copied().collect(), workers);
        let (row, active) = select_decode_row(scheme, &available);
        let fhat = decode(scheme, row, &coded, &active)?;
        let support = &scheme.subsets()[row];
        let missing: Vec<usize> = support
            .iter()
            .copied()
            .filter(|w| !active.contains(w))
            .collect();
        let mode = match (missing.is_empty(), used_stale) {
            (true, false) => DecodeMode::Full,
            (true, true) => DecodeMode::FullWithStale,
            (false, false) => DecodeMode::Restricted,
            (false, true) => DecodeMode::RestrictedWithStale,
        };
        Ok(Some(DecodeOutcome {
            fhat,
            mode,
            row,
            active,
            missing,
        }))
    }

    /// Bound on ||R_i(k)|| for the decode that happened: the Cauchy-Schwarz
    /// form alpha ||A||_inf ||B||_2inf 2L max ||v - x*|| for full-row
    /// decodes, and the two-term form with column-restricted coefficients
    /// when part of the row's support is missing.
    fn r_bound(
        &self,
        alpha: f64,
        iota: usize,
        replica: usize,
        outcome: &DecodeOutcome,
        v_i: &[f64],
    ) -> f64 {
        let run = self.run;
        let scheme = &run.schemes[iota][replica];
        let lipschitz = run.lipschitz();
        let window = self.window_max_dist();
        match outcome.mode {
            DecodeMode::Full | DecodeMode::FullWithStale | DecodeMode::Hold => {
                alpha * scheme.norm_a_inf() * scheme.norm_b_2inf() * 2.0 * lipschitz * window
            }
            DecodeMode::Restricted | DecodeMode::RestrictedWithStale => {
                let a_active = scheme.row_l1_restricted(outcome.row, &outcome.active);
                let a_missing = scheme.row_l1_restricted(outcome.row, &outcome.missing);
                let own = norm2(&sub(v_i, &run.problem.x_star));
                alpha
                    * lipschitz
                    * scheme.norm_b_2inf()
                    * (2.0 * a_active * window + a_missing * own)
            }
        }
    }

    /// Execute iteration k and append nothing; the caller owns the trace.
    pub fn step(&mut self, k: usize) -> Result<IterationRecord, EngineError> {
        let run = self.run;
        let n = run.topology.n_servers;
        let alpha = run.schedule.alpha(k);

        // Push and worker computation for every replica group.
        let mut straggler_sets: Vec<Vec<StragglerSet>> =
            Vec::with_capacity(run.topology.p_partitions);
        for iota in 0..run.topology.p_partitions {
            let mut per_replica = Vec::with_capacity(run.replicas());
            for r in 0..run.replicas() {
                per_replica.push(self.compute_group(k, iota, r));
            }
            straggler_sets.push(per_replica);
        }
        let total_stragglers: usize = straggler_sets
            .iter()
            .flat_map(|g| g.iter())
            .map(|s| s.num_stragglers())
            .sum();

        // Pull, decode, gradient step (or hold).
        let assignment = sample_assignment(&run.topology, k, run.seed);
        let mut new_x: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut server_records = Vec::with_capacity(n);
        let mut decodes = 0;
        let mut max_r = 0.0_f64;
        let mut max_r_bound = 0.0_f64;
        let mut violations = 0;
        for i in 0..n {
            let v_i = self.states[i].v.clone();
            let (x_next, record) = match assignment[i] {
                None => (
                    v_i.clone(),
                    ServerRecord {
                        partition: None,
                        mode: DecodeMode::Hold,
                        straggler_count: 0,
                        x_err: 0.0,
                        v_err: 0.0,
                        r_norm: None,
                        r_bound: None,
                        eps_norm: 0.0,
                    },
                ),
                Some(iota) => {
                    let replica = if run.replicas() > 1 {
                        let mut rng = Rng::stream(run.seed, &[tags::REPLICA, k as u64, i as u64]);
                        rng.below(run.replicas() as u64) as usize
                    } else {
                        0
                    };
                    let stragglers = &straggler_sets[iota][replica];
                    match self.pull_and_decode(k, iota, replica, stragglers)? {
                        None => (
                            v_i.clone(),
                            ServerRecord {
                                partition: Some(iota),
                                mode: DecodeMode::Hold,
                                straggler_count: stragglers.num_stragglers(),
                                x_err: 0.0,
                                v_err: 0.0,
                                r_norm: None,
                                r_bound: None,
                                eps_norm: 0.0,
                            },
                        ),
                        Some(outcome) => {
                            let mut x = v_i.clone();
                            linalg::axpy(&mut x, -alpha, &outcome.fhat);
                            decodes += 1;
                            // R_i(k) against the exact partition gradient at v_i(k).
                            let exact = partition_gradient(&run.problem, iota, &v_i);
                            let mut r = sub(&x, &v_i);
                            linalg::axpy(&mut r, alpha, &exact);
                            let r_norm = norm2(&r);
                            let bound = self.r_bound(alpha, iota, replica, &outcome, &v_i);
                            // Slack covers the 1e-6 relative tolerance of the
                            // power-iteration Lipschitz estimate inside the bound.
                            if r_norm > bound * (1.0 + 1e-5) + 1e-12 {
                                violations += 1;
                            }
                            max_r = max_r.max(r_norm);
                            max_r_bound = max_r_bound.max(bound);
                            let eps_norm = norm2(&sub(&x, &v_i));
                            (
                                x,
                                ServerRecord {
                                    partition: Some(iota),
                                    mode: outcome.mode,
                                    straggler_count: stragglers.num_stragglers(),
                                    x_err: 0.0,
                                    v_err: 0.0,
                                    r_norm: Some(r_norm),
                                    r_bound: Some(bound),
                                    eps_norm,
                                },
                            )
                        }
                    }
                }
            };
            new_x.push(x_next);
            server_records.push(record);
        }

        // Consensus through W.
        let mut new_v: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let mut v = vec![0.0; run.problem.dim()];
            for j in 0..n {
                let wij = self.w[(i, j)];
                if wij != 0.0 {
                    linalg::axpy(&mut v, wij, &new_x[j]);
                }
            }
            new_v.push(v);
        }

        for i in 0..n {
            server_records[i].x_err = norm2(&sub(&new_x[i], &run.problem.x0));
            server_records[i].v_err = norm2(&sub(&new_v[i], &run.problem.x0));
            self.states[i].x = new_x[i].clone();
            self.states[i].v = new_v[i].clone();
        }

        let xs: Vec<&[f64]> = new_x.iter().map(|v| v.as_slice()).collect();
        let ae = metrics::ae(&xs, &run.problem.x0)?;
        let ce = metrics::ce(&xs, &run.problem.x0)?;
        let dim = run.problem.dim();
        let mean_x: Vec<f64> = (0..dim)
            .map(|d| new_x.iter().map(|x| x[d]).sum::<f64>() / n as f64)
            .collect();
        let objective = crate::problem::objective(&run.problem, &mean_x);

        // Slide the staleness window.
        self.v_hist.push_back(new_v);
        while self.v_hist.len() > run.model.h_max + 2 {
            self.v_hist.pop_front();
            self.hist_base += 1;
        }

        Ok(IterationRecord {
            k,
            alpha,
            ae,
            ce,
            objective,
            servers: server_records,
            total_stragglers,
            decodes,
            max_r,
            max_r_bound,
            r_bound_violations: violations,
        })
    }

    fn finite(&self) -> bool {
        self.states
            .iter()
            .all(|s| s.x.iter().all(|v| v.is_finite()) && s.v.iter().all(|v| v.is_finite()))
    }
}

/// Run to convergence (max over servers of ||v_i(k+1) - v_i(k)|| <= tol,
/// with tol = 0 disabling the stopping rule), exhaustion of max_iters, or
/// divergence. Divergence carries the partial trace, truncated at the first
/// iteration whose states or recorded norms leave the representable range.
pub fn run(run_spec: &Run) -> Result<Trace, EngineError> {
    let mut exec = Execution::new(run_spec)?;
    let mut trace = Trace::new(run_spec.seed);
    for k in 0..run_spec.max_iters {
        let prev_v: Vec<Vec<f64>> = exec.states.iter().map(|s| s.v.clone()).collect();
        let record = exec.step(k)?;
        if !exec.finite() || !record.is_finite() {
            let ae = trace.records.last().map(|r| r.ae).unwrap_or(f64::INFINITY);
            trace.status = metrics::RunStatus::Diverged { k };
            return Err(EngineError::Diverged {
                k,
                ae,
                trace: Box::new(trace),
            });
        }
        trace.records.push(record);
        let eps = exec
            .states
            .iter()
            .zip(&prev_v)
            .map(|(s, pv)| norm2(&sub(&s.v, pv)))
            .fold(0.0, f64::max);
        if run_spec.tol > 0.0 && eps <= run_spec.tol {
            trace.status = metrics::RunStatus::Converged { k };
            return Ok(trace);
        }
    }
    trace.status = metrics::RunStatus::MaxIters;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{MixingKind, ServerGraph};
    use crate::problem::{full_gradient, generate};

    fn uncoded_run(seed: u64, common_init: bool) -> Run {
        let n = 3;
        let problem = generate(30, 4, n, 2, &mut Rng::seed_from(5)).unwrap();
        let schemes: Vec<Vec<CodingScheme>> = (0..n)
            .map(|i| vec![CodingScheme::build(2, 0, &mut Rng::seed_from(100 + i as u64)).unwrap()])
            .collect();
        Run {
            problem,
            topology: Topology {
                n_servers: n,
                p_partitions: n,
                gamma: vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                graph: ServerGraph::complete(n),
                fixed_assignment: Some((0..n).collect()),
            },
            model: StragglerModel {
                s_per_partition: vec![0; n],
                t_window: 0,
                h_max: 0,
                mode: Scenario::One,
                straggle_prob: 0.0,
                fresh_push: true,
            },
            policy: MixingPolicy {
                kind: MixingKind::DoublyStochasticMetropolis,
                mu: 0.0,
                nu: 0.01,
            },
            schemes,
            schedule: StepSchedule {
                offset: 500.0,
                theta: 1.0,
                cap: None,
            },
            seed,
            common_init,
            max_iters: 200,
            tol: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let run_spec = uncoded_run(9, false);
        let a = init(&run_spec);
        let b = init(&run_spec);
        assert_eq!(a.len(), 3);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.v, sb.v);
            assert_eq!(sa.x, sa.v);
            assert_eq!(sa.v.len(), 4);
        }
    }

    #[test]
    fn common_init_makes_states_equal() {
        let run_spec = uncoded_run(9, true);
        let states = init(&run_spec);
        for s in &states[1..] {
            assert_eq!(s.v, states[0].v);
        }
    }

    /// s=0, H=0, uniform W, common init: the SRDO weighted average follows
    /// centralized gradient descent with step alpha_k / n.
    #[test]
    fn uncoded_gd_equivalence() {
        let run_spec = uncoded_run(3, true);
        let n = run_spec.topology.n_servers as f64;
        let mut exec = Execution::new(&run_spec).unwrap();
        let mut reference = exec.states[0].v.clone();
        for k in 0..200 {
            exec.step(k).unwrap();
            let alpha = run_spec.schedule.alpha(k);
            let g = full_gradient(&run_spec.problem, &reference);
            linalg::axpy(&mut reference, -alpha / n, &g);
            for s in &exec.states {
                let err = norm2(&sub(&s.v, &reference));
                assert!(err <= 1e-10, "k={k}: {err}");
            }
        }
    }

    #[test]
    fn worker_gradient_single_support_is_sub_gradient() {
        let run_spec = uncoded_run(1, false);
        let x = vec![0.3, -0.2, 0.1, 0.9];
        let scheme = &run_spec.schemes[0][0];
        let g = worker_gradient(&run_spec.problem, scheme, 0, 1, &x);
        let direct = sub_gradient(&run_spec.problem, 0, 1, &x);
        assert_eq!(g, direct);
    }

    #[test]
    fn decode_sum_over_subset_matches_exact_partition_gradient() {
        let problem = generate(40, 4, 2, 4, &mut Rng::seed_from(8)).unwrap();
        let scheme = CodingScheme::build(4, 1, &mut Rng::seed_from(21)).unwrap();
        let x = vec![0.5, -1.0, 0.25, 0.0];
        let coded: BTreeMap<usize, Vec<f64>> = (0..4)
            .map(|j| (j, worker_gradient(&problem, &scheme, 0, j, &x)))
            .collect();
        let exact = partition_gradient(&problem, 0, &x);
        for subset in scheme.subsets() {
            let conn = StragglerSet::new(subset.clone(), 4);
            let (row, active) = select_decode_row(&scheme, &conn);
            let got = decode(&scheme, row, &coded, &active).unwrap();
            let err = norm2(&sub(&got, &exact)) / norm2(&exact).max(1e-30);
            assert!(err <= 1e-8, "subset {subset:?}: {err}");
        }
    }

    /// Dropping worker 0 still reproduces the exact partition gradient.
    #[test]
    fn decode_with_straggler_matches_exact() {
        let problem = generate(30, 4, 1, 3, &mut Rng::seed_from(2)).unwrap();
        let scheme = CodingScheme::build(3, 1, &mut Rng::seed_from(4)).unwrap();
        let x = vec![1.0, 0.0, -0.5, 2.0];
        let coded: BTreeMap<usize, Vec<f64>> = (1..3)
            .map(|j| (j, worker_gradient(&problem, &scheme, 0, j, &x)))
            .collect();
        let conn = StragglerSet::new(vec![1, 2], 3);
        let (row, active) = select_decode_row(&scheme, &conn);
        let got = decode(&scheme, row, &coded, &active).unwrap();
        let exact = partition_gradient(&problem, 0, &x);
        assert!(norm2(&sub(&got, &exact)) / norm2(&exact) <= 1e-8);
    }

    #[test]
    fn hold_rule_keeps_weighted_average() {
        // gamma_0 = 1: every server holds every step; consensus only.
        let mut run_spec = uncoded_run(11, false);
        run_spec.topology.fixed_assignment = None;
        run_spec.topology.gamma = vec![1.0, 0.0, 0.0, 0.0];
        let mut exec = Execution::new(&run_spec).unwrap();
        let v0: Vec<Vec<f64>> = exec.states.iter().map(|s| s.v.clone()).collect();
        let rec = exec.step(0).unwrap();
        assert_eq!(rec.decodes, 0);
        // x(1) = v(0) exactly, so v(1) = W v(0).
        for (i, s) in exec.states.iter().enumerate() {
            assert_eq!(s.x, v0[i]);
        }
    }

    /// Definition-1 R against the decode-sum form of the same quantity; the
    /// two routes agree once the decode row sums B back to the all-ones row.
    #[test]
    fn r_two_formula_consistency() {
        let n = 3;
        let problem = generate(36, 4, n, 3, &mut Rng::seed_from(6)).unwrap();
        let schemes: Vec<Vec<CodingScheme>> = (0..n)
            .map(|i| vec![CodingScheme::build(3, 1, &mut Rng::seed_from(50 + i as u64)).unwrap()])
            .collect();
        let run_spec = Run {
            problem,
            topology: Topology {
                n_servers: n,
                p_partitions: n,
                gamma: vec![0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                graph: ServerGraph::complete(n),
                fixed_assignment: Some((0..n).collect()),
            },
            model: StragglerModel {
                s_per_partition: vec![1; n],
                t_window: 10,
                h_max: 4,
                mode: Scenario::One,
                straggle_prob: 0.3,
                fresh_push: false,
            },
            policy: MixingPolicy {
                kind: MixingKind::DoublyStochasticMetropolis,
                mu: 0.0,
                nu: 0.01,
            },
            schemes,
            schedule: StepSchedule {
                offset: 1000.0,
                theta: 0.9,
                cap: None,
            },
            seed: 77,
            common_init: false,
            max_iters: 40,
            tol: 0.0,
        };
        let mut exec = Execution::new(&run_spec).unwrap();
        for k in 0..40 {
            let alpha = run_spec.schedule.alpha(k);
            // Reconstruct the decode outcome independently before stepping.
            let mut expected_r: Vec<Option<Vec<f64>>> = vec![None; n];
            for i in 0..n {
                let iota = i; // fixed assignment
                let workers = run_spec.problem.workers_per_partition();
                let group = run_spec.group_tag(iota, 0);
                let stragglers =
                    sample_stragglers(&run_spec.model, workers, iota, 0, k, run_spec.seed);
                // Scenario 1 uses only fresh gradients; mirror the push.
                let scheme = &run_spec.schemes[iota][0];
                let mut coded = BTreeMap::new();
                for &j in stragglers.connected() {
                    let d = sample_delay(&run_spec.model, group, j, k, run_spec.seed).min(k);
                    let point = exec.v_at(k - d, i).to_vec();
                    coded.insert(
                        j,
                        worker_gradient(&run_spec.problem, scheme, iota, j, &point),
                    );
                }
                let avail = StragglerSet::new(coded.keys().copied().collect(), workers);
                let (row, active) = select_decode_row(scheme, &avail);
                let fhat = decode(scheme, row, &coded, &active).unwrap();
                let v_i = exec.states[i].v.clone();
                let exact = partition_gradient(&run_spec.problem, iota, &v_i);
                // Eq (5.1) correction: R = -alpha (fhat - exact).
                let mut r = sub(&exact, &fhat);
                for val in r.iter_mut() {
                    *val *= alpha;
                }
                expected_r[i] = Some(r);
            }
            let record = exec.step(k).unwrap();
            for (i, rec) in record.servers.iter().enumerate() {
                let want = norm2(expected_r[i].as_ref().unwrap());
                let got = rec.r_norm.unwrap();
                assert!(
                    (got - want).abs() <= 1e-10 * want.max(1.0),
                    "k={k} server {i}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn epsilon_identity_when_decoded() {
        let run_spec = uncoded_run(13, false);
        let mut exec = Execution::new(&run_spec).unwrap();
        for k in 0..30 {
            let alpha = run_spec.schedule.alpha(k);
            let vs: Vec<Vec<f64>> = exec.states.iter().map(|s| s.v.clone()).collect();
            let record = exec.step(k).unwrap();
            for (i, rec) in record.servers.iter().enumerate() {
                if let Some(r_norm) = rec.r_norm {
                    // eps = -alpha grad + R; with exact decode R ~ 0 here.
                    let g = partition_gradient(&run_spec.problem, i, &vs[i]);
                    let expected = alpha * norm2(&g);
                    assert!((rec.eps_norm - expected).abs() <= 1e-9 * expected.max(1.0) + r_norm);
                }
            }
        }
    }

    #[test]
    fn empty_run_is_empty_trace() {
        let mut run_spec = uncoded_run(1, false);
        run_spec.max_iters = 0;
        let trace = run(&run_spec).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(trace.status, metrics::RunStatus::MaxIters);
    }

    #[test]
    fn identical_seeds_identical_traces() {
        let run_spec = uncoded_run(21, false);
        let a = run(&run_spec).unwrap();
        let b = run(&run_spec).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.ae.to_bits(), rb.ae.to_bits());
            assert_eq!(ra.ce.to_bits(), rb.ce.to_bits());
            assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
        }
    }

    #[test]
    fn divergence_reports_partial_trace() {
        let mut run_spec = uncoded_run(2, false);
        // A wildly unstable constant-ish step forces blowup.
        run_spec.schedule = StepSchedule {
            offset: 1.0,
            theta: 0.01,
            cap: None,
        };
        run_spec.max_iters = 5000;
        match run(&run_spec) {
            Err(EngineError::Diverged { k, trace, .. }) => {
                assert!(k > 0);
                assert_eq!(trace.records.len(), k);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stopping_rule_flags_convergence() {
        let mut run_spec = uncoded_run(4, true);
        run_spec.tol = 1e-9;
        run_spec.max_iters = 100_000;
        run_spec.schedule = StepSchedule {
            offset: 300.0,
            theta: 0.55,
            cap: None,
        };
        let trace = run(&run_spec).unwrap();
        assert!(matches!(trace.status, metrics::RunStatus::Converged { .. }));
    }

    #[test]
    fn scenario3_with_equal_points_matches_scenario1() {
        // When stale and fresh evaluation points coincide (fresh_push plus a
        // frozen trajectory at the planted solution), scenario 3's decode
        // equals the exact partition gradient just like scenario 1's.
        let problem = generate(30, 4, 1, 3, &mut Rng::seed_from(14)).unwrap();
        let scheme = CodingScheme::build(3, 1, &mut Rng::seed_from(15)).unwrap();
        let x = problem.x0.clone();
        let coded: BTreeMap<usize, Vec<f64>> = (0..3)
            .map(|j| (j, worker_gradient(&problem, &scheme, 0, j, &x)))
            .collect();
        let exact = partition_gradient(&problem, 0, &x);
        // "stale" copies are evaluated at the same point, so any mix decodes
        // to the same value.
        for subset in scheme.subsets() {
            let conn = StragglerSet::new(subset.clone(), 3);
            let (row, active) = select_decode_row(&scheme, &conn);
            let got = decode(&scheme, row, &coded, &active).unwrap();
            assert!(norm2(&sub(&got, &exact)) <= 1e-8);
        }
    }

    #[test]
    fn schedule_is_monotone_and_capped() {
        let sched = StepSchedule {
            offset: 300.0,
            theta: 0.55,
            cap: Some(0.01),
        };
        let mut prev = f64::INFINITY;
        for k in 0..1000 {
            let a = sched.alpha(k);
            assert!(a <= 0.01 + 1e-18);
            assert!(a <= prev);
            prev = a;
        }
        assert!(StepSchedule::analysis_cap(0.1, 0.0, 10.0) > 0.0);
    }
}
