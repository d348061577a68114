//! The distributed least-squares instance.
//!
//! The global objective is f(x) = ||G x - y||^2 (no 1/2 factor; gradients
//! carry the 2), split row-contiguously into p partition functions which are
//! split again into one sub-block per worker. y is planted as G x0 with
//! x0 uniform in [-1, 1]^N, so the system is consistent and x* = x0 up to
//! solver accuracy.

use std::fmt::Write as _;

use thiserror::Error;

use crate::linalg::{self, mat_mul, norm2, sub, Matrix};
use crate::rng::Rng;

const POWER_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("M = {m} must be divisible by p * workers = {parts}")]
    BadShape { m: usize, parts: usize },
    #[error("M = {m} must exceed N = {n} for an overdetermined system")]
    Underdetermined { m: usize, n: usize },
    #[error("G^T G stayed rank deficient after a regeneration attempt")]
    RankDeficient,
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// One worker's sub-block of a partition.
#[derive(Clone, Debug)]
pub struct Block {
    pub g: Matrix,
    pub y: Vec<f64>,
}

/// A group of workers jointly responsible for one summand f^(i).
#[derive(Clone, Debug)]
pub struct Partition {
    pub index: usize,
    pub blocks: Vec<Block>,
    /// Lipschitz constant of the partition gradient, 2 lambda_max(G_i^T G_i).
    pub lipschitz: f64,
}

#[derive(Clone, Debug)]
pub struct Problem {
    pub g: Matrix,
    pub y: Vec<f64>,
    /// Planted solution; the AE metric is measured against it.
    pub x0: Vec<f64>,
    /// Least-squares solution from the normal equations.
    pub x_star: Vec<f64>,
    pub partitions: Vec<Partition>,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.g.cols
    }

    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    pub fn workers_per_partition(&self) -> usize {
        self.partitions[0].blocks.len()
    }
}

fn try_generate(
    m: usize,
    n: usize,
    p: usize,
    workers: usize,
    rng: &mut Rng,
) -> Result<Problem, ProblemError> {
    let g = linalg::gaussian_matrix(m, n, rng);
    let x0 = linalg::uniform_vector(n, -1.0, 1.0, rng);
    let y = g.matvec(&x0);
    // Normal equations G^T G x = G^T y.
    let gtg = mat_mul(&g.transpose(), &g)?;
    let gty = g.matvec_t(&y);
    let x_star = match linalg::solve_least_squares(&gtg, &gty) {
        Ok((x, _)) => x,
        Err(linalg::LinalgError::RankDeficient { .. }) => return Err(ProblemError::RankDeficient),
        Err(e) => return Err(e.into()),
    };
    let rows_per_partition = m / p;
    let rows_per_block = rows_per_partition / workers;
    let mut partitions = Vec::with_capacity(p);
    for i in 0..p {
        let lo = i * rows_per_partition;
        let gi = g.row_slice(lo, lo + rows_per_partition);
        let gtgi = mat_mul(&gi.transpose(), &gi)?;
        let lipschitz = 2.0 * linalg::power_iteration_lmax(&gtgi, POWER_ITERS, POWER_TOL)?;
        let mut blocks = Vec::with_capacity(workers);
        for l in 0..workers {
            let blo = lo + l * rows_per_block;
            blocks.push(Block {
                g: g.row_slice(blo, blo + rows_per_block),
                y: y[blo..blo + rows_per_block].to_vec(),
            });
        }
        partitions.push(Partition {
            index: i,
            blocks,
            lipschitz,
        });
    }
    Ok(Problem {
        g,
        y,
        x0,
        x_star,
        partitions,
    })
}

/// Generate a planted instance. A rank-deficient draw (vanishingly rare for
/// M > N Gaussian matrices) is regenerated once from the same stream before
/// giving up.
pub fn generate(
    m: usize,
    n: usize,
    p: usize,
    workers: usize,
    rng: &mut Rng,
) -> Result<Problem, ProblemError> {
    if p == 0 || workers == 0 || m % (p * workers) != 0 {
        return Err(ProblemError::BadShape {
            m,
            parts: p * workers,
        });
    }
    if m <= n {
        return Err(ProblemError::Underdetermined { m, n });
    }
    match try_generate(m, n, p, workers, rng) {
        Err(ProblemError::RankDeficient) => try_generate(m, n, p, workers, rng),
        other => other,
    }
}

/// Gradient of one worker's sub-function: 2 G_il^T (G_il x - y_il).
pub fn sub_gradient(problem: &Problem, i: usize, l: usize, x: &[f64]) -> Vec<f64> {
    let block = &problem.partitions[i].blocks[l];
    let r = sub(&block.g.matvec(x), &block.y);
    linalg::scale(&block.g.matvec_t(&r), 2.0)
}

/// Sub-function value ||G_il x - y_il||^2 (used by finite-difference tests).
pub fn sub_objective(problem: &Problem, i: usize, l: usize, x: &[f64]) -> f64 {
    let block = &problem.partitions[i].blocks[l];
    let r = sub(&block.g.matvec(x), &block.y);
    linalg::dot(&r, &r)
}

pub fn partition_gradient(problem: &Problem, i: usize, x: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; problem.dim()];
    for l in 0..problem.partitions[i].blocks.len() {
        linalg::axpy(&mut acc, 1.0, &sub_gradient(problem, i, l, x));
    }
    acc
}

pub fn full_gradient(problem: &Problem, x: &[f64]) -> Vec<f64> {
    let mut acc = vec![0.0; problem.dim()];
    for i in 0..problem.num_partitions() {
        linalg::axpy(&mut acc, 1.0, &partition_gradient(problem, i, x));
    }
    acc
}

pub fn objective(problem: &Problem, x: &[f64]) -> f64 {
    let r = sub(&problem.g.matvec(x), &problem.y);
    linalg::dot(&r, &r)
}

/// Lipschitz constant of the partition gradient, cached at generation.
pub fn lipschitz(problem: &Problem, i: usize) -> f64 {
    problem.partitions[i].lipschitz
}

/// Largest diagnostic gradient bound observed along a trajectory; the
/// analysis set on which gradients stay bounded is never materialized.
pub fn max_gradient_norm(problem: &Problem, points: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .flat_map(|x| (0..problem.num_partitions()).map(move |i| (i, x)))
        .map(|(i, x)| norm2(&partition_gradient(problem, i, x)))
        .fold(0.0, f64::max)
}

/// Plain-text bundle for replay: dimension header then the rows of G, y, x0.
/// Not a stability-guaranteed format.
pub fn dump(problem: &Problem) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# problem M={} N={} p={} workers={}",
        problem.g.rows,
        problem.g.cols,
        problem.num_partitions(),
        problem.workers_per_partition()
    );
    for i in 0..problem.g.rows {
        let line: Vec<String> = problem
            .g
            .row(i)
            .iter()
            .map(|v| format!("{v:.17e}"))
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    let yline: Vec<String> = problem.y.iter().map(|v| format!("{v:.17e}")).collect();
    let _ = writeln!(out, "{}", yline.join(" "));
    let xline: Vec<String> = problem.x0.iter().map(|v| format!("{v:.17e}")).collect();
    let _ = writeln!(out, "{}", xline.join(" "));
    out
}
