//! Error metrics and analytical bound checkers over run traces.
//!
//! AE and CE follow the simulation protocol: worst-server distance to the
//! planted solution and to the mean iterate, both relative to ||x0||. The
//! martingale checkers verify the geometric-decay conclusions of the two
//! windowed supermartingale lemmas numerically; the rate envelope and eta
//! evaluator reproduce the strongly convex convergence-rate expressions as
//! diagnostics over a finished trace.

use std::fmt::Write as _;

use thiserror::Error;

use crate::engine::IterationRecord;
use crate::linalg::{norm2, sub};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("AE/CE are undefined for a zero reference vector")]
    ZeroReference,
    #[error("martingale params invalid: {0}")]
    BadParams(String),
    #[error("eta denominator {0} is not positive; the formula's precondition fails")]
    EtaDenominator(f64),
}

// --- error metrics ---------------------------------------------------------

/// max_i ||x_i - x0|| / ||x0||
pub fn ae(states: &[&[f64]], x0: &[f64]) -> Result<f64, MetricsError> {
    let denom = norm2(x0);
    if denom == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok(states
        .iter()
        .map(|x| norm2(&sub(x, x0)))
        .fold(0.0, f64::max)
        / denom)
}

/// max_i ||x_i - mean(x)|| / ||x0||
pub fn ce(states: &[&[f64]], x0: &[f64]) -> Result<f64, MetricsError> {
    let denom = norm2(x0);
    if denom == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    if states.is_empty() {
        return Ok(0.0);
    }
    let dim = states[0].len();
    let n = states.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|d| states.iter().map(|x| x[d]).sum::<f64>() / n)
        .collect();
    Ok(states
        .iter()
        .map(|x| norm2(&sub(x, &mean)))
        .fold(0.0, f64::max)
        / denom)
}

// --- run trace --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Converged { k: usize },
    MaxIters,
    Diverged { k: usize },
}

impl RunStatus {
    pub fn label(&self) -> String {
        match self {
            RunStatus::Converged { k } => format!("converged:{k}"),
            RunStatus::MaxIters => "max_iters".to_string(),
            RunStatus::Diverged { k } => format!("diverged:{k}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub seed: u64,
    pub records: Vec<IterationRecord>,
    pub status: RunStatus,
}

impl Trace {
    pub fn new(seed: u64) -> Self {
        Trace {
            seed,
            records: Vec::new(),
            status: RunStatus::MaxIters,
        }
    }

    pub fn final_ae(&self) -> Option<f64> {
        self.records.last().map(|r| r.ae)
    }

    pub fn final_ce(&self) -> Option<f64> {
        self.records.last().map(|r| r.ce)
    }

    pub fn total_r_bound_violations(&self) -> usize {
        self.records.iter().map(|r| r.r_bound_violations).sum()
    }

    /// sum_i ||v_i(k) - x0||^2 per iteration (the lemma quantity for planted
    /// consistent systems, where x* = x0).
    pub fn sum_v_dist_sq(&self) -> Vec<f64> {
        self.records
            .iter()
            .map(|r| r.servers.iter().map(|s| s.v_err * s.v_err).sum())
            .collect()
    }
}

// --- martingale lemma checkers ----------------------------------------------

/// Parameters of the windowed recursion
/// v_{k+1} <= a1 v_k + a2_k max_{k-B <= khat <= k} u_khat (+ a3).
#[derive(Clone, Debug)]
pub struct MartingaleParams {
    pub a1: f64,
    /// Non-increasing sequence, indexed like the series.
    pub a2: Vec<f64>,
    /// Zero for the plain geometric-decay lemma.
    pub a3: f64,
    /// Window length B.
    pub window: usize,
    /// First index at which the hypothesis holds.
    pub k_star: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MartingaleOutcome {
    /// Hypothesis and envelope both hold everywhere.
    Holds,
    /// The recursion inequality itself fails at index k (not an envelope
    /// failure).
    HypothesisViolated { k: usize },
    /// The geometric envelope fails at index k.
    EnvelopeViolated { k: usize, value: f64, envelope: f64 },
}

#[derive(Clone, Debug)]
pub struct MartingaleReport {
    pub rho: f64,
    pub eta: f64,
    pub v0: f64,
    pub outcome: MartingaleOutcome,
}

/// Verify the decay conclusion: with rho = (a1 + a2_max)^(1/(B+1)) and
/// eta = a3 / (1 - a1 - a2_max), fit the smallest V0 making the base window
/// [k_star, k_star+B] satisfy v_k <= rho^k V0 + eta, then check the envelope
/// at every later index. The hypothesis inequality is checked first; the
/// envelope conclusion presumes the window series is v itself (pass
/// `u = None` for that default).
pub fn check_martingale_decay(
    v: &[f64],
    u: Option<&[f64]>,
    params: &MartingaleParams,
) -> Result<MartingaleReport, MetricsError> {
    let window_series = u.unwrap_or(v);
    if window_series.len() != v.len() {
        return Err(MetricsError::BadParams(
            "window series length differs from v".into(),
        ));
    }
    if params.a2.len() < v.len().saturating_sub(1) {
        return Err(MetricsError::BadParams("a2 shorter than the series".into()));
    }
    if params.a2.windows(2).any(|w| w[1] > w[0] + 1e-15) {
        return Err(MetricsError::BadParams("a2 must be non-increasing".into()));
    }
    if v.len() <= params.k_star + params.window {
        return Err(MetricsError::BadParams(
            "series shorter than the base window".into(),
        ));
    }
    let a2_max = params.a2[params.k_star];
    if params.a1 < 0.0 || a2_max < 0.0 || params.a3 < 0.0 {
        return Err(MetricsError::BadParams(
            "coefficients must be nonnegative".into(),
        ));
    }
    if params.a1 + a2_max > 1.0 + 1e-12 {
        return Err(MetricsError::BadParams(format!(
            "a1 + a2 = {} exceeds 1",
            params.a1 + a2_max
        )));
    }
    let rho = (params.a1 + a2_max).powf(1.0 / (params.window as f64 + 1.0));
    let eta = if params.a3 == 0.0 {
        0.0
    } else {
        let slack = 1.0 - params.a1 - a2_max;
        if slack <= 0.0 {
            return Err(MetricsError::BadParams(
                "a3 > 0 requires a1 + a2 strictly below 1".into(),
            ));
        }
        params.a3 / slack
    };

    // 1) the hypothesis itself
    for k in params.k_star..v.len() - 1 {
        let lo = k.saturating_sub(params.window).max(params.k_star.min(k));
        let win = window_series[lo..=k].iter().copied().fold(0.0, f64::max);
        let rhs = params.a1 * v[k] + params.a2[k] * win + params.a3;
        if v[k + 1] > rhs * (1.0 + 1e-12) + 1e-300 {
            return Ok(MartingaleReport {
                rho,
                eta,
                v0: f64::NAN,
                outcome: MartingaleOutcome::HypothesisViolated { k },
            });
        }
    }

    // 2) minimal V0 over the base window
    let base_end = params.k_star + params.window;
    let mut v0 = 0.0_f64;
    for k in params.k_star..=base_end {
        let excess = v[k] - eta;
        if excess > 0.0 {
            let denom = rho.powi(k as i32);
            if denom > 0.0 {
                v0 = v0.max(excess / denom);
            }
        }
    }

    // 3) the geometric envelope everywhere after the base window
    for k in base_end + 1..v.len() {
        let envelope = rho.powi(k as i32) * v0 + eta;
        if v[k] > envelope * (1.0 + 1e-9) + 1e-300 {
            return Ok(MartingaleReport {
                rho,
                eta,
                v0,
                outcome: MartingaleOutcome::EnvelopeViolated {
                    k,
                    value: v[k],
                    envelope,
                },
            });
        }
    }
    Ok(MartingaleReport {
        rho,
        eta,
        v0,
        outcome: MartingaleOutcome::Holds,
    })
}

// --- convergence-rate envelopes ----------------------------------------------

/// Inputs to the strongly convex rate expressions, gathered from a run.
#[derive(Clone, Debug)]
pub struct RateParams {
    pub n_servers: usize,
    pub p_partitions: usize,
    pub lipschitz: f64,
    /// Column-sum slack of the mixing matrix (zero for doubly stochastic).
    pub mu: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// 1 - gamma_0.
    pub gamma_sum: f64,
    /// max over partitions of ||A||_inf ||B||_2inf.
    pub scheme_norm: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

#[derive(Clone, Debug)]
pub struct RateEnvelope {
    /// Per-iteration multiplicative factor.
    pub factors: Vec<f64>,
    /// Cumulative product from k0, scaled by the measured value at k0.
    pub envelope: Vec<f64>,
    pub k0: usize,
    /// Iterations (absolute index) where the measured series exceeds the
    /// envelope; diagnostic only.
    pub exceeded: Vec<usize>,
}

/// Per-step factor 1 - mu + 4 L alpha SN (1 + 2 L alpha SN) / (1 - gamma_0)^2.
pub fn rate_factor_type1(params: &RateParams, alpha: f64) -> f64 {
    let c = params.lipschitz * alpha * params.scheme_norm;
    1.0 - params.mu + 4.0 * c * (1.0 + 2.0 * c) / (params.gamma_sum * params.gamma_sum)
}

/// Multiplicative envelope for sum_i ||v_i(k) - x*||^2 along a trace,
/// anchored at the measured value at k0.
pub fn rate_envelope_type1(
    measured: &[f64],
    alphas: &[f64],
    params: &RateParams,
    k0: usize,
) -> RateEnvelope {
    assert_eq!(measured.len(), alphas.len());
    assert!(k0 < measured.len());
    let factors: Vec<f64> = alphas
        .iter()
        .map(|&a| rate_factor_type1(params, a))
        .collect();
    let mut envelope = vec![f64::NAN; measured.len()];
    let mut exceeded = Vec::new();
    let mut acc = measured[k0];
    envelope[k0] = acc;
    for k in k0 + 1..measured.len() {
        acc *= factors[k - 1];
        envelope[k] = acc;
        if measured[k] > acc {
            exceeded.push(k);
        }
    }
    RateEnvelope {
        factors,
        envelope,
        k0,
        exceeded,
    }
}

/// Closed-form limit bound for the inconsistent-targets case:
/// eta = [ (2 n alpha L min(|I| gmax, 1) + alpha p gmin n smax
///          + 2 L n min(p gmax, 1) alpha^2 / (1-g0)^2) max_dist^2 ]
///       / [ mu - 4 L alpha SN (1 + 2 L alpha SN) / (1-g0)^2 ]
pub fn eta_estimate(
    params: &RateParams,
    alpha: f64,
    mismatched_partitions: usize,
    max_partition_dist: f64,
) -> Result<f64, MetricsError> {
    let gs2 = params.gamma_sum * params.gamma_sum;
    let c = params.lipschitz * alpha * params.scheme_norm;
    let denominator = params.mu - 4.0 * c * (1.0 + 2.0 * c) / gs2;
    if denominator <= 0.0 {
        return Err(MetricsError::EtaDenominator(denominator));
    }
    let n = params.n_servers as f64;
    let p = params.p_partitions as f64;
    let numerator = (2.0
        * n
        * alpha
        * params.lipschitz
        * (mismatched_partitions as f64 * params.gamma_max).min(1.0)
        + alpha * p * params.gamma_min * n * params.sigma_max
        + 2.0 * params.lipschitz * n * (p * params.gamma_max).min(1.0) * alpha * alpha / gs2)
        * max_partition_dist
        * max_partition_dist;
    Ok(numerator / denominator)
}

// --- scenario comparison ------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ScenarioComparison {
    /// Mean final AE for scenarios 1, 2, 3.
    pub mean_ae: [f64; 3],
    /// Final AE per seed, [seed][scenario].
    pub per_seed: Vec<[f64; 3]>,
    /// Seeds whose individual ordering ae1 <= ae3 <= ae2 fails (allowed;
    /// the assertion is on means).
    pub per_seed_violations: Vec<usize>,
    /// ae1 <= ae3 <= ae2 on the means.
    pub ordering_holds: bool,
}

/// Compare final AE across the three scenarios on shared realizations.
pub fn scenario_residual_compare(final_aes: &[[f64; 3]]) -> ScenarioComparison {
    let n = final_aes.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for row in final_aes {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let per_seed_violations = final_aes
        .iter()
        .enumerate()
        .filter(|(_, ae)| !(ae[0] <= ae[2] && ae[2] <= ae[1]))
        .map(|(i, _)| i)
        .collect();
    ScenarioComparison {
        mean_ae: mean,
        per_seed: final_aes.to_vec(),
        per_seed_violations,
        ordering_holds: mean[0] <= mean[2] && mean[2] <= mean[1],
    }
}

// --- report rendering ----------------------------------------------------------

/// Trace CSV: documented header, one row per iteration with 17 significant
/// digits, and a final status trailer row.
pub fn trace_csv(trace: &Trace) -> String {
    let mut out = String::from("k,alpha,ae,ce,objective,max_r,max_r_bound,stragglers,decodes\n");
    for r in &trace.records {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
            r.k,
            r.alpha,
            r.ae,
            r.ce,
            r.objective,
            r.max_r,
            r.max_r_bound,
            r.total_stragglers,
            r.decodes
        );
    }
    let _ = writeln!(out, "status,{}", trace.status.label());
    out
}

/// Aggregate CSV over a seed sweep: one row per seed plus mean and stddev
/// rows over the final AE/CE.
pub fn summary_csv(traces: &[Trace]) -> String {
    let mut out = String::from("seed,final_ae,final_ce,iterations,status\n");
    let mut aes = Vec::new();
    let mut ces = Vec::new();
    for t in traces {
        let ae = t.final_ae().unwrap_or(f64::NAN);
        let ce = t.final_ce().unwrap_or(f64::NAN);
        aes.push(ae);
        ces.push(ce);
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{},{}",
            t.seed,
            ae,
            ce,
            t.records.len(),
            t.status.label()
        );
    }
    let stats = |vals: &[f64]| -> (f64, f64) {
        let n = vals.len().max(1) as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (mae, sae) = stats(&aes);
    let (mce, sce) = stats(&ces);
    let _ = writeln!(out, "mean,{mae:.16e},{mce:.16e},,");
    let _ = writeln!(out, "stddev,{sae:.16e},{sce:.16e},,");
    out
}

/// Human-readable summary of the bound checkers on one trace.
pub fn bound_report(trace: &Trace) -> String {
    let violations = trace.total_r_bound_violations();
    let decodes: usize = trace.records.iter().map(|r| r.decodes).sum();
    let worst_margin = trace
        .records
        .iter()
        .filter(|r| r.max_r_bound > 0.0)
        .map(|r| r.max_r / r.max_r_bound)
        .fold(0.0, f64::max);
    let mut out = String::new();
    let _ = writeln!(out, "seed {}: {}", trace.seed, trace.status.label());
    let _ = writeln!(
        out,
        "  iterations {}  decodes {}  R-bound violations {}  worst ||R||/bound {:.3e}",
        trace.records.len(),
        decodes,
        violations,
        worst_margin
    );
    if let (Some(ae), Some(ce)) = (trace.final_ae(), trace.final_ce()) {
        let _ = writeln!(out, "  final AE {ae:.6e}  final CE {ce:.6e}");
    }
    out
}
