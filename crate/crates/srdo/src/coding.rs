//! Gradient coding per partition: cyclic encode matrix B, decode matrix A
//! over all (n-s)-subsets, and decode-row selection under arbitrary
//! connectivity.
//!
//! Row j of B is the linear combination worker j computes over the
//! partition's sub-gradients; its support is the s+1 cyclically consecutive
//! block indices starting at j. A has one row per (n-s)-subset of workers,
//! fitted so that the weighted sum of the subset's coded gradients recovers
//! the plain sum of all sub-gradients: A B = 1 entrywise.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::linalg::{self, mat_mul, norm_2inf_rows, norm_inf_rows, Matrix};
use crate::rng::Rng;

/// Hard cap on the number of decode rows we will materialize.
pub const MAX_DECODE_ROWS: usize = 1_000_000;

/// Residual threshold for each fitted decode row and for A B = 1 overall.
pub const FIT_TOL: f64 = 1e-8;

const BUILD_B_RETRIES: usize = 8;

#[derive(Debug, Error)]
pub enum CodingError {
    #[error("invalid parameters: need 0 <= s < n_workers, got n={n}, s={s}")]
    BadParameters { n: usize, s: usize },
    #[error("C({n},{s}) = {count} decode rows exceeds the cap {MAX_DECODE_ROWS}")]
    TooManySubsets { n: usize, s: usize, count: usize },
    #[error("encode subsystem stayed singular after {BUILD_B_RETRIES} retries")]
    SingularEncode,
    #[error("decode fit residual {residual:e} above {FIT_TOL:e} for subset {subset:?}")]
    FitResidual { subset: Vec<usize>, residual: f64 },
    #[error("decode is missing the coded gradient of active worker {worker}")]
    MissingWorker { worker: usize },
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Connected workers of one partition at one pull step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StragglerSet {
    connected: Vec<usize>,
    pub total: usize,
}

impl StragglerSet {
    /// Build from arbitrary indices; sorts and deduplicates.
    pub fn new(mut connected: Vec<usize>, total: usize) -> Self {
        connected.sort_unstable();
        connected.dedup();
        assert!(connected.iter().all(|&w| w < total), "index out of range");
        StragglerSet { connected, total }
    }

    pub fn connected(&self) -> &[usize] {
        &self.connected
    }

    pub fn stragglers(&self) -> Vec<usize> {
        (0..self.total)
            .filter(|w| !self.connected.contains(w))
            .collect()
    }

    pub fn num_stragglers(&self) -> usize {
        self.total - self.connected.len()
    }
}

/// One partition's coding scheme. Immutable after construction.
#[derive(Clone, Debug)]
pub struct CodingScheme {
    pub n_workers: usize,
    pub s: usize,
    pub b: Matrix,
    pub a: Matrix,
    subsets: Vec<Vec<usize>>,
    subset_index: BTreeMap<Vec<usize>, usize>,
    norm_a_inf: f64,
    norm_b_2inf: f64,
}

/// Number of k-subsets of an n-set, saturating at usize::MAX.
fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// All k-subsets of 0..n in lexicographic order.
fn subsets_lex(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        // advance to the next lexicographic combination
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] != i + n - k {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Cyclic encode matrix: row i has support {i, i+1, .., i+s} mod n, leading
/// coefficient 1, remaining coefficients solving the s x s system drawn from
/// a random H with zero row sums (so the all-ones vector lies in null(H),
/// alongside every row of B). A singular draw is retried with fresh
/// randomness, at most eight times.
pub fn build_b_cyc(n_workers: usize, s: usize, rng: &mut Rng) -> Result<Matrix, CodingError> {
    if s >= n_workers {
        return Err(CodingError::BadParameters { n: n_workers, s });
    }
    if s == 0 {
        return Ok(Matrix::identity(n_workers));
    }
    'retry: for _ in 0..BUILD_B_RETRIES {
        let mut h = linalg::gaussian_matrix(s, n_workers, rng);
        for r in 0..s {
            let partial: f64 = (0..n_workers - 1).map(|c| h[(r, c)]).sum();
            h[(r, n_workers - 1)] = -partial;
        }
        let mut b = Matrix::zeros(n_workers, n_workers);
        for i in 0..n_workers {
            let supp: Vec<usize> = (0..=s).map(|t| (i + t) % n_workers).collect();
            // Solve h[:, supp[1..]] x = -h[:, supp[0]].
            let mut sys = Matrix::zeros(s, s);
            let mut rhs = vec![0.0; s];
            for r in 0..s {
                for (c, &col) in supp[1..].iter().enumerate() {
                    sys[(r, c)] = h[(r, col)];
                }
                rhs[r] = -h[(r, supp[0])];
            }
            let x = match linalg::solve_least_squares(&sys, &rhs) {
                Ok((x, _)) => x,
                Err(linalg::LinalgError::RankDeficient { .. }) => continue 'retry,
                Err(e) => return Err(e.into()),
            };
            b[(i, supp[0])] = 1.0;
            for (c, &col) in supp[1..].iter().enumerate() {
                b[(i, col)] = x[c];
            }
        }
        return Ok(b);
    }
    Err(CodingError::SingularEncode)
}

/// Decode matrix over all (n-s)-subsets in lexicographic order. Row for
/// subset I is the least-squares fit x of x^T B(I,:) = 1^T placed on the
/// columns of I; the fit residual must stay below [`FIT_TOL`].
pub fn build_a(b: &Matrix, s: usize) -> Result<(Matrix, BTreeMap<Vec<usize>, usize>), CodingError> {
    let n = b.rows;
    if s >= n {
        return Err(CodingError::BadParameters { n, s });
    }
    let count = binomial(n, s);
    if count > MAX_DECODE_ROWS {
        return Err(CodingError::TooManySubsets { n, s, count });
    }
    let subsets = subsets_lex(n, n - s);
    debug_assert_eq!(subsets.len(), count);
    let ones = vec![1.0; n];
    let mut a = Matrix::zeros(count, n);
    let mut subset_index = BTreeMap::new();
    for (r, subset) in subsets.iter().enumerate() {
        // x^T B(I,:) = 1^T  <=>  B(I,:)^T x = 1
        let sys = b.select_rows(subset).transpose();
        let (x, residual) = linalg::solve_least_squares(&sys, &ones)?;
        if residual > FIT_TOL {
            return Err(CodingError::FitResidual {
                subset: subset.clone(),
                residual,
            });
        }
        for (c, &w) in subset.iter().enumerate() {
            a[(r, w)] = x[c];
        }
        subset_index.insert(subset.clone(), r);
    }
    Ok((a, subset_index))
}

/// Max entrywise deviation of A B from the all-ones matrix.
pub fn verify_scheme(scheme: &CodingScheme) -> f64 {
    let ab = mat_mul(&scheme.a, &scheme.b).expect("scheme dimensions");
    ab.data()
        .iter()
        .map(|v| (v - 1.0).abs())
        .fold(0.0, f64::max)
}

impl CodingScheme {
    pub fn build(n_workers: usize, s: usize, rng: &mut Rng) -> Result<Self, CodingError> {
        let b = build_b_cyc(n_workers, s, rng)?;
        let (a, subset_index) = build_a(&b, s)?;
        let subsets = subsets_lex(n_workers, n_workers - s);
        let norm_a_inf = norm_inf_rows(&a);
        let norm_b_2inf = norm_2inf_rows(&b);
        Ok(CodingScheme {
            n_workers,
            s,
            b,
            a,
            subsets,
            subset_index,
            norm_a_inf,
            norm_b_2inf,
        })
    }

    pub fn subsets(&self) -> &[Vec<usize>] {
        &self.subsets
    }

    pub fn subset_index(&self) -> &BTreeMap<Vec<usize>, usize> {
        &self.subset_index
    }

    /// ||A||_inf, cached.
    pub fn norm_a_inf(&self) -> f64 {
        self.norm_a_inf
    }

    /// ||B||_{2,inf}, cached.
    pub fn norm_b_2inf(&self) -> f64 {
        self.norm_b_2inf
    }

    /// l1 norm of one decode row restricted to the given columns.
    pub fn row_l1_restricted(&self, row: usize, cols: &[usize]) -> f64 {
        cols.iter().map(|&c| self.a[(row, c)].abs()).sum()
    }

    /// Support of B's row j (indices with nonzero coefficient).
    pub fn encode_support(&self, j: usize) -> Vec<usize> {
        (0..self.n_workers)
            .filter(|&l| self.b[(j, l)] != 0.0)
            .collect()
    }

    /// Plain-text dump of B and A for debugging: one row per line,
    /// space-separated decimals.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# B {}x{}", self.b.rows, self.b.cols);
        for i in 0..self.b.rows {
            let line: Vec<String> = self.b.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        let _ = writeln!(out, "# A {}x{}", self.a.rows, self.a.cols);
        for i in 0..self.a.rows {
            let line: Vec<String> = self.a.row(i).iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

/// Pick the decode row for the given connectivity.
///
/// With at least n-s connected workers this is the row of the
/// lexicographically smallest (n-s)-subset of the connected set, and every
/// worker of that subset is active. With fewer (the scenario 2/3 fallback)
/// it is the row of the lexicographically smallest (n-s)-subset containing
/// the connected set, and only the connected workers are active; the row's
/// other coefficients go unused.
pub fn select_decode_row(scheme: &CodingScheme, connected: &StragglerSet) -> (usize, Vec<usize>) {
    let need = scheme.n_workers - scheme.s;
    let conn = connected.connected();
    let subset: Vec<usize> = if conn.len() >= need {
        conn[..need].to_vec()
    } else {
        // Greedy fill with the smallest indices keeps the subset
        // lexicographically minimal among those containing `conn`.
        let mut subset = Vec::with_capacity(need);
        let mut free = need - conn.len();
        for w in 0..scheme.n_workers {
            if conn.contains(&w) {
                subset.push(w);
            } else if free > 0 {
                subset.push(w);
                free -= 1;
            }
            if subset.len() == need {
                break;
            }
        }
        subset
    };
    let active = if conn.len() >= need {
        subset.clone()
    } else {
        conn.to_vec()
    };
    let row = scheme.subset_index[&subset];
    (row, active)
}

/// Weighted sum of the active workers' coded gradients with the decode row's
/// coefficients.
pub fn decode(
    scheme: &CodingScheme,
    row: usize,
    coded_gradients: &BTreeMap<usize, Vec<f64>>,
    active: &[usize],
) -> Result<Vec<f64>, CodingError> {
    let mut out: Option<Vec<f64>> = None;
    for &j in active {
        let g = coded_gradients
            .get(&j)
            .ok_or(CodingError::MissingWorker { worker: j })?;
        let acc = out.get_or_insert_with(|| vec![0.0; g.len()]);
        linalg::axpy(acc, scheme.a[(row, j)], g);
    }
    Ok(out.unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm2, sub, uniform_vector};

    fn scheme(n: usize, s: usize, seed: u64) -> CodingScheme {
        CodingScheme::build(n, s, &mut Rng::seed_from(seed)).unwrap()
    }

    #[test]
    fn b_is_identity_for_s0() {
        let b = build_b_cyc(3, 0, &mut Rng::seed_from(1)).unwrap();
        assert_eq!(b, Matrix::identity(3));
    }

    #[test]
    fn b_rows_have_consecutive_cyclic_support() {
        let b = build_b_cyc(3, 1, &mut Rng::seed_from(5)).unwrap();
        for i in 0..3 {
            let nz: Vec<usize> = (0..3).filter(|&j| b[(i, j)] != 0.0).collect();
            assert_eq!(nz.len(), 2, "row {i} must have s+1 nonzeros");
            assert_eq!(nz, {
                let mut v = vec![i, (i + 1) % 3];
                v.sort_unstable();
                v
            });
            assert_eq!(b[(i, i)], 1.0, "leading coefficient");
        }
    }

    #[test]
    fn a_is_plain_sum_for_s0() {
        let b = Matrix::identity(3);
        let (a, index) = build_a(&b, 0).unwrap();
        assert_eq!(a.rows, 1);
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(index[&vec![0, 1, 2]], 0);
    }

    #[test]
    fn a_has_one_row_per_subset_with_s_zeros() {
        let sch = scheme(3, 1, 2);
        assert_eq!(sch.a.rows, 3); // C(3,1)
        for r in 0..3 {
            let zeros = (0..3).filter(|&c| sch.a[(r, c)] == 0.0).count();
            assert_eq!(zeros, 1);
        }
    }

    #[test]
    fn ab_is_all_ones_for_n5_s2_seed7() {
        let sch = scheme(5, 2, 7);
        assert_eq!(sch.a.rows, 10);
        assert!(verify_scheme(&sch) <= FIT_TOL);
    }

    #[test]
    fn every_subset_row_recovers_ones() {
        let sch = scheme(5, 2, 11);
        for (subset, &row) in sch.subset_index() {
            for l in 0..5 {
                let s: f64 = subset
                    .iter()
                    .map(|&j| sch.a[(row, j)] * sch.b[(j, l)])
                    .sum();
                assert!((s - 1.0).abs() <= 1e-8, "subset {subset:?} col {l}: {s}");
            }
        }
    }

    #[test]
    fn corrupted_b_fails_verification() {
        let mut sch = scheme(3, 1, 3);
        sch.b[(0, 0)] = 0.0;
        assert!(verify_scheme(&sch) > 1e-3);
    }

    #[test]
    fn select_row_full_connectivity_takes_lexicographic_min() {
        let sch = scheme(3, 1, 2);
        let (row, active) = select_decode_row(&sch, &StragglerSet::new(vec![0, 1, 2], 3));
        assert_eq!(sch.subsets()[row], vec![0, 1]);
        assert_eq!(active, vec![0, 1]);
    }

    #[test]
    fn select_row_partial_connectivity() {
        let sch = scheme(3, 1, 2);
        let (row, active) = select_decode_row(&sch, &StragglerSet::new(vec![1, 2], 3));
        assert_eq!(sch.subsets()[row], vec![1, 2]);
        assert_eq!(active, vec![1, 2]);
    }

    #[test]
    fn select_row_under_connected_contains_gamma() {
        let sch = scheme(3, 1, 2);
        let (row, active) = select_decode_row(&sch, &StragglerSet::new(vec![2], 3));
        // Oracle: lexicographically smallest size-2 subset containing {2}.
        let min_containing = sch
            .subsets()
            .iter()
            .find(|ss| ss.contains(&2))
            .unwrap()
            .clone();
        assert_eq!(sch.subsets()[row], min_containing);
        assert_eq!(sch.subsets()[row], vec![0, 2]);
        assert_eq!(active, vec![2]);
    }

    #[test]
    fn select_row_empty_connected_yields_first_row_empty_active() {
        let sch = scheme(3, 1, 2);
        let (row, active) = select_decode_row(&sch, &StragglerSet::new(vec![], 3));
        assert_eq!(row, 0);
        assert!(active.is_empty());
    }

    /// Coded gradients at a common point must decode to the plain sum of the
    /// underlying vectors, for every connected set of size >= n-s.
    #[test]
    fn decode_exactness_all_subsets() {
        let n = 5;
        let sch = scheme(n, 2, 7);
        let mut rng = Rng::seed_from(99);
        let parts: Vec<Vec<f64>> = (0..n)
            .map(|_| uniform_vector(4, -1.0, 1.0, &mut rng))
            .collect();
        let exact: Vec<f64> = (0..4).map(|d| parts.iter().map(|p| p[d]).sum()).collect();
        let coded: BTreeMap<usize, Vec<f64>> = (0..n)
            .map(|j| {
                let mut g = vec![0.0; 4];
                for l in 0..n {
                    linalg::axpy(&mut g, sch.b[(j, l)], &parts[l]);
                }
                (j, g)
            })
            .collect();
        for subset in sch.subsets() {
            let conn = StragglerSet::new(subset.clone(), n);
            let (row, active) = select_decode_row(&sch, &conn);
            let got = decode(&sch, row, &coded, &active).unwrap();
            let err = norm2(&sub(&got, &exact)) / norm2(&exact);
            assert!(err <= 1e-8, "subset {subset:?}: {err}");
        }
    }

    #[test]
    fn decode_s0_is_plain_sum() {
        let sch = scheme(4, 0, 1);
        let coded: BTreeMap<usize, Vec<f64>> = (0..4).map(|j| (j, vec![j as f64, 1.0])).collect();
        let (row, active) = select_decode_row(&sch, &StragglerSet::new(vec![0, 1, 2, 3], 4));
        let got = decode(&sch, row, &coded, &active).unwrap();
        assert_eq!(got, vec![6.0, 4.0]);
    }

    #[test]
    fn decode_missing_worker_is_error() {
        let sch = scheme(3, 1, 2);
        let coded: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        assert!(matches!(
            decode(&sch, 0, &coded, &[0]),
            Err(CodingError::MissingWorker { worker: 0 })
        ));
    }

    #[test]
    fn subset_cap_rejected() {
        // C(40, 20) is astronomically past the cap.
        let b = Matrix::identity(40);
        assert!(matches!(
            build_a(&b, 20),
            Err(CodingError::TooManySubsets { .. })
        ));
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(matches!(
            build_b_cyc(3, 3, &mut Rng::seed_from(0)),
            Err(CodingError::BadParameters { .. })
        ));
    }

    #[test]
    fn dump_round_trips_shape() {
        let sch = scheme(3, 1, 4);
        let text = sch.dump();
        assert!(text.contains("# B 3x3"));
        assert!(text.contains("# A 3x3"));
        assert_eq!(text.lines().count(), 2 + 3 + 3);
    }

    #[test]
    fn subsets_lex_order_and_count() {
        let ss = subsets_lex(5, 3);
        assert_eq!(ss.len(), 10);
        assert_eq!(ss[0], vec![0, 1, 2]);
        assert_eq!(ss[9], vec![2, 3, 4]);
        for w in ss.windows(2) {
            assert!(w[0] < w[1], "not lexicographic: {:?} then {:?}", w[0], w[1]);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Every constructed scheme satisfies A B = 1 and each subset row
            /// recombines B back to the all-ones row.
            #[test]
            fn schemes_decode_for_every_subset(
                n in 2usize..7,
                s_raw in 0usize..3,
                seed in 0u64..500,
            ) {
                let s = s_raw.min(n - 1);
                let scheme = CodingScheme::build(n, s, &mut crate::rng::Rng::seed_from(seed)).unwrap();
                prop_assert!(verify_scheme(&scheme) <= FIT_TOL);
                for (subset, &row) in scheme.subset_index() {
                    for l in 0..n {
                        let c: f64 = subset
                            .iter()
                            .map(|&j| scheme.a[(row, j)] * scheme.b[(j, l)])
                            .sum();
                        prop_assert!((c - 1.0).abs() <= FIT_TOL);
                    }
                }
            }
        }
    }
}
