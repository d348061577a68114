//! Time-varying parameter-server topology: server-partition assignment,
//! straggler sets, bounded delays, and the consensus mixing matrix.
//!
//! Sampling is stateless: every draw comes from a stream derived from
//! (root seed, iteration, entity, concern), so a realization is fully
//! determined by the configuration and seed, and the same draws are replayed
//! when only the gradient computation scenario changes.

use thiserror::Error;

use crate::coding::StragglerSet;
use crate::linalg::Matrix;
use crate::rng::Rng;

/// Stream tags, one per sampling concern.
pub mod tags {
    pub const ASSIGNMENT: u64 = 1;
    pub const STRAGGLERS: u64 = 2;
    pub const DELAY: u64 = 3;
    pub const PUSH_SOURCE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const REPLICA: u64 = 6;
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("server graph is disconnected")]
    Disconnected,
    #[error("gamma must have p+1 entries summing to 1, got {0:?}")]
    BadGamma(Vec<f64>),
}

/// Undirected server graph as an adjacency matrix.
#[derive(Clone, Debug)]
pub struct ServerGraph {
    pub n: usize,
    adj: Vec<bool>,
}

impl ServerGraph {
    pub fn complete(n: usize) -> Self {
        let mut g = ServerGraph {
            n,
            adj: vec![false; n * n],
        };
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    g.adj[i * n + j] = true;
                }
            }
        }
        g
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = ServerGraph {
            n,
            adj: vec![false; n * n],
        };
        for &(i, j) in edges {
            assert!(i < n && j < n && i != j, "bad edge ({i},{j})");
            g.adj[i * n + j] = true;
            g.adj[j * n + i] = true;
        }
        g
    }

    /// Random connected graph: a random spanning tree plus independent extra
    /// edges. Used by tests and the mixing-matrix verification sweep.
    pub fn random_connected(n: usize, extra_edge_prob: f64, rng: &mut Rng) -> Self {
        assert!(n >= 1);
        let mut edges = Vec::new();
        for v in 1..n {
            let u = rng.below(v as u64) as usize;
            edges.push((u, v));
        }
        for i in 0..n {
            for j in i + 1..n {
                if rng.next_f64() < extra_edge_prob {
                    edges.push((i, j));
                }
            }
        }
        ServerGraph::from_edges(n, &edges)
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| self.has_edge(i, j)).count()
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..self.n {
                if self.has_edge(i, j) && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Server-side topology: who pulls which partition, over which graph.
#[derive(Clone, Debug)]
pub struct Topology {
    pub n_servers: usize,
    pub p_partitions: usize,
    /// p+1 probabilities; entry 0 is the no-partition branch.
    pub gamma: Vec<f64>,
    pub graph: ServerGraph,
    /// Pins server i to partition fixed_assignment[i] at every pull step.
    pub fixed_assignment: Option<Vec<usize>>,
}

impl Topology {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if !self.graph.is_connected() {
            return Err(NetworkError::Disconnected);
        }
        let sum: f64 = self.gamma.iter().sum();
        if self.gamma.len() != self.p_partitions + 1
            || self.gamma.iter().any(|&g| !(0.0..=1.0).contains(&g))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(NetworkError::BadGamma(self.gamma.clone()));
        }
        Ok(())
    }

    /// Smallest nonzero pull probability, excluding the no-partition branch.
    pub fn gamma_min(&self) -> f64 {
        self.gamma[1..]
            .iter()
            .copied()
            .filter(|&g| g > 0.0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma[1..].iter().copied().fold(0.0, f64::max)
    }

    /// Sum of the partition probabilities, i.e. 1 - gamma_0.
    pub fn gamma_sum(&self) -> f64 {
        self.gamma[1..].iter().sum()
    }
}

/// Which gradient computation scenario a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    One,
    Two,
    Three,
}

/// Straggler and staleness model.
#[derive(Clone, Debug)]
pub struct StragglerModel {
    pub s_per_partition: Vec<usize>,
    /// Weak-straggler window: the first step of every window of this length
    /// is clamped to at most s stragglers.
    pub t_window: usize,
    /// Max staleness of any evaluation point used in a decode.
    pub h_max: usize,
    pub mode: Scenario,
    /// Per-worker per-step straggle probability.
    pub straggle_prob: f64,
    /// Deliver current weighted averages in the push step instead of sampling
    /// a delay (the fixed-connection simulation setup).
    pub fresh_push: bool,
}

/// Draw the straggler set of one partition replica group at iteration k.
/// Workers straggle independently with `straggle_prob`; in scenario 1 the
/// set is always clamped to at most s survivors chosen uniformly among the
/// drawn stragglers, and in the weak mode the same clamp applies to the
/// first step of every window of length `t_window`.
pub fn sample_stragglers(
    model: &StragglerModel,
    n_workers: usize,
    partition: usize,
    replica: usize,
    k: usize,
    root_seed: u64,
) -> StragglerSet {
    let s = model.s_per_partition[partition];
    let mut rng = Rng::stream(
        root_seed,
        &[tags::STRAGGLERS, k as u64, partition as u64, replica as u64],
    );
    let mut stragglers: Vec<usize> = (0..n_workers)
        .filter(|_| rng.next_f64() < model.straggle_prob)
        .collect();
    let window_start = model.t_window > 0 && k % model.t_window == 0;
    let clamp = model.mode == Scenario::One || window_start;
    if clamp && stragglers.len() > s {
        let keep = rng.sample_indices(stragglers.len(), s);
        stragglers = keep.into_iter().map(|i| stragglers[i]).collect();
    }
    let connected: Vec<usize> = (0..n_workers).filter(|w| !stragglers.contains(w)).collect();
    StragglerSet::new(connected, n_workers)
}

/// Per-server partition choice at iteration k; None is the no-partition
/// branch. A fixed assignment overrides the categorical draw.
pub fn sample_assignment(topology: &Topology, k: usize, root_seed: u64) -> Vec<Option<usize>> {
    if let Some(fixed) = &topology.fixed_assignment {
        return fixed.iter().map(|&p| Some(p)).collect();
    }
    (0..topology.n_servers)
        .map(|i| {
            let mut rng = Rng::stream(root_seed, &[tags::ASSIGNMENT, k as u64, i as u64]);
            let u = rng.next_f64();
            let mut acc = 0.0;
            for (idx, &g) in topology.gamma.iter().enumerate() {
                acc += g;
                if u < acc {
                    return if idx == 0 { None } else { Some(idx - 1) };
                }
            }
            Some(topology.p_partitions - 1)
        })
        .collect()
}

/// Push-staleness draw in [0, H], clamped to the available history.
pub fn sample_delay(
    model: &StragglerModel,
    partition: usize,
    worker: usize,
    k: usize,
    root_seed: u64,
) -> usize {
    if model.fresh_push || model.h_max == 0 {
        return 0;
    }
    let mut rng = Rng::stream(
        root_seed,
        &[tags::DELAY, k as u64, partition as u64, worker as u64],
    );
    (rng.below(model.h_max as u64 + 1) as usize).min(k)
}

/// Mixing-matrix family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixingKind {
    DoublyStochasticMetropolis,
    RowStochasticColumnBounded,
}

#[derive(Clone, Debug)]
pub struct MixingPolicy {
    pub kind: MixingKind,
    /// Column-sum slack targeted by the row-stochastic variant.
    pub mu: f64,
    /// Floor under every positive entry.
    pub nu: f64,
}

fn metropolis(graph: &ServerGraph) -> Matrix {
    let n = graph.n;
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if graph.has_edge(i, j) {
                let wij = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
                w[(i, j)] = wij;
                row_sum += wij;
            }
        }
        w[(i, i)] = 1.0 - row_sum;
    }
    w
}

/// Consensus weights for iteration k. Metropolis weights are doubly
/// stochastic. The row-stochastic variant scales the off-diagonal mass
/// toward the configured column-sum slack and then restores unit row sums;
/// note a nonnegative matrix with unit row sums has column sums averaging
/// exactly one, so the slack can only be realized by the off-diagonal part
/// (the full column sums of any such matrix cannot all sit below 1 - mu).
pub fn build_w(
    policy: &MixingPolicy,
    graph: &ServerGraph,
    _k: usize,
) -> Result<Matrix, NetworkError> {
    if !graph.is_connected() {
        return Err(NetworkError::Disconnected);
    }
    let base = metropolis(graph);
    match policy.kind {
        MixingKind::DoublyStochasticMetropolis => Ok(base),
        MixingKind::RowStochasticColumnBounded => {
            let n = graph.n;
            // Largest off-diagonal scale c keeping every column's
            // off-diagonal sum within 1 - mu, floored to stay connected.
            let mut c: f64 = 1.0;
            for j in 0..n {
                let off: f64 = (0..n).filter(|&i| i != j).map(|i| base[(i, j)]).sum();
                if off > 0.0 {
                    c = c.min((1.0 - policy.mu - base[(j, j)]).max(0.0) / off);
                }
            }
            let c = c.clamp(0.05, 1.0);
            let mut w = Matrix::zeros(n, n);
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    if i != j {
                        w[(i, j)] = c * base[(i, j)];
                        row += w[(i, j)];
                    }
                }
                w[(i, i)] = base[(i, i)];
                row += w[(i, i)];
                for j in 0..n {
                    w[(i, j)] /= row;
                }
            }
            Ok(w)
        }
    }
}
