//! Experiment execution and verification behind the command line: seed
//! sweeps with per-seed trace CSVs plus an aggregate summary, the scenario
//! sweep with its ordering report, and the bound-verification pass.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence, 4 bound or
//! scheme verification failure.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::coding::{verify_scheme, FIT_TOL};
use crate::config::{ConfigError, RunConfig};
use crate::engine::{self, EngineError, Run};
use crate::metrics::{self, scenario_residual_compare, RunStatus, Trace};
use crate::network::{build_w, MixingKind, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("engine: {0}")]
    Engine(String),
}

pub struct ExperimentOutcome {
    pub traces: Vec<Trace>,
    pub diverged: bool,
    pub files: Vec<PathBuf>,
}

fn execute_seed(run: &Run) -> (Trace, bool) {
    match engine::run(run) {
        Ok(trace) => (trace, false),
        Err(EngineError::Diverged { trace, .. }) => (*trace, true),
        Err(e) => {
            // Construction errors surface before any iteration; treat as a
            // trace-less failure.
            let mut t = Trace::new(run.seed);
            t.status = RunStatus::Diverged { k: 0 };
            eprintln!("run failed: {e}");
            (t, true)
        }
    }
}

/// Run every configured seed, bounded by `jobs` worker threads, and write
/// trace_<seed>.csv per seed plus summary.csv. File contents depend only on
/// (config, seed).
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentOutcome, CliError> {
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(out_dir)?;
    let runs: Result<Vec<Run>, ConfigError> =
        cfg.seeds.iter().map(|&seed| cfg.build_run(seed)).collect();
    let runs = runs?;
    let results = run_parallel(&runs, cfg.jobs);

    let mut files = Vec::new();
    let mut traces = Vec::new();
    let mut diverged = false;
    for (run, (trace, bad)) in runs.iter().zip(results) {
        let path = out_dir.join(format!("trace_{}.csv", run.seed));
        fs::write(&path, metrics::trace_csv(&trace))?;
        files.push(path);
        traces.push(trace);
        diverged |= bad;
    }
    let summary = out_dir.join("summary.csv");
    fs::write(&summary, metrics::summary_csv(&traces))?;
    files.push(summary);
    Ok(ExperimentOutcome {
        traces,
        diverged,
        files,
    })
}

fn run_parallel(runs: &[Run], jobs: usize) -> Vec<(Trace, bool)> {
    if jobs <= 1 || runs.len() <= 1 {
        return runs.iter().map(execute_seed).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let (tx, rx) = std::sync::mpsc::channel::<(usize, (Trace, bool))>();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(runs.len()) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= runs.len() {
                    break;
                }
                let out = execute_seed(&runs[i]);
                let _ = tx.send((i, out));
            });
        }
    });
    drop(tx);
    let mut results: Vec<Option<(Trace, bool)>> = (0..runs.len()).map(|_| None).collect();
    for (i, out) in rx {
        results[i] = Some(out);
    }
    results
        .into_iter()
        .map(|r| r.expect("seed executed"))
        .collect()
}

/// Scenario sweep: the same config executed under scenarios 1-3 with shared
/// seeds and shared sampling streams, then the ordering report over the mean
/// final AE.
pub fn run_scenario_sweep(
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<metrics::ScenarioComparison, CliError> {
    fs::create_dir_all(out_dir)?;
    let mut final_aes: Vec<[f64; 3]> = vec![[f64::NAN; 3]; cfg.seeds.len()];
    for (sc_idx, scenario) in [Scenario::One, Scenario::Two, Scenario::Three]
        .into_iter()
        .enumerate()
    {
        let sub = cfg.with_scenario(scenario);
        for (seed_idx, &seed) in sub.seeds.iter().enumerate() {
            let run = sub.build_run(seed)?;
            let (trace, _) = execute_seed(&run);
            let path = out_dir.join(format!("trace_s{}_{}.csv", sc_idx + 1, seed));
            fs::write(&path, metrics::trace_csv(&trace))?;
            final_aes[seed_idx][sc_idx] = trace.final_ae().unwrap_or(f64::INFINITY);
        }
    }
    let report = scenario_residual_compare(&final_aes);
    let mut text = String::from("seed,ae_scenario1,ae_scenario2,ae_scenario3\n");
    for (i, row) in report.per_seed.iter().enumerate() {
        text.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            cfg.seeds[i], row[0], row[1], row[2]
        ));
    }
    text.push_str(&format!(
        "mean,{:.16e},{:.16e},{:.16e}\n",
        report.mean_ae[0], report.mean_ae[1], report.mean_ae[2]
    ));
    text.push_str(&format!(
        "ordering_ae1_le_ae3_le_ae2,{}\n",
        report.ordering_holds
    ));
    fs::write(out_dir.join("ordering.csv"), text)?;
    Ok(report)
}

pub struct VerifyOutcome {
    pub hard_failures: Vec<String>,
    pub report: String,
}

/// Run the experiment with every checker enabled. Hard assertions: the
/// scheme condition A B = 1, mixing-matrix row sums (plus column sums for
/// the doubly stochastic kind and the positive-entry floor), the
/// per-iteration bound on ||R_i(k)||, and non-divergence. The rate envelope
/// is reported, not asserted. `corrupt_scheme` zeroes one encode coefficient
/// to prove the pass fails loudly.
pub fn verify_bounds(cfg: &RunConfig, corrupt_scheme: bool) -> Result<VerifyOutcome, CliError> {
    let mut hard = Vec::new();
    let mut report = String::new();

    for &seed in &cfg.seeds {
        let mut run = cfg.build_run(seed)?;
        if corrupt_scheme {
            let b = &mut run.schemes[0][0].b;
            let col = (0..b.cols).find(|&c| b[(0, c)] != 0.0).unwrap_or(0);
            b[(0, col)] = 0.0;
        }
        for (i, replicas) in run.schemes.iter().enumerate() {
            for (r, scheme) in replicas.iter().enumerate() {
                let dev = verify_scheme(scheme);
                report.push_str(&format!(
                    "seed {seed} partition {i} replica {r}: max |AB - 1| = {dev:.3e}\n"
                ));
                if dev > FIT_TOL {
                    hard.push(format!(
                        "seed {seed}: scheme for partition {i} replica {r} violates AB = 1 ({dev:.3e})"
                    ));
                }
            }
        }
        let w = build_w(&run.policy, &run.topology.graph, 0)
            .map_err(|e| CliError::Engine(e.to_string()))?;
        let n = run.topology.n_servers;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| w[(i, j)]).sum();
            if (row - 1.0).abs() > 1e-12 {
                hard.push(format!("seed {seed}: W row {i} sums to {row}"));
            }
            let col: f64 = (0..n).map(|j| w[(j, i)]).sum();
            if run.policy.kind == MixingKind::DoublyStochasticMetropolis
                && (col - 1.0).abs() > 1e-12
            {
                hard.push(format!("seed {seed}: W column {i} sums to {col}"));
            }
            for j in 0..n {
                let v = w[(i, j)];
                if v > 0.0 && i != j && v < run.policy.nu {
                    hard.push(format!("seed {seed}: W[{i},{j}] = {v} below nu"));
                }
            }
        }
        match engine::run(&run) {
            Ok(trace) => {
                let violations = trace.total_r_bound_violations();
                report.push_str(&metrics::bound_report(&trace));
                if violations > 0 {
                    hard.push(format!(
                        "seed {seed}: {violations} iterations violate the R bound"
                    ));
                }
            }
            Err(EngineError::Diverged { k, ae, trace }) => {
                report.push_str(&metrics::bound_report(&trace));
                hard.push(format!("seed {seed}: diverged at k = {k} (AE {ae:.3e})"));
            }
            Err(e) => hard.push(format!("seed {seed}: {e}")),
        }
    }
    Ok(VerifyOutcome {
        hard_failures: hard,
        report,
    })
}

/// Build and print one scheme: B, A, and the max deviation of A B from 1.
pub fn scheme_report(n: usize, s: usize, seed: u64) -> Result<String, CliError> {
    let scheme = crate::coding::CodingScheme::build(n, s, &mut crate::rng::Rng::seed_from(seed))
        .map_err(ConfigError::Coding)?;
    let mut out = scheme.dump();
    out.push_str(&format!("max |AB - 1| = {:.3e}\n", verify_scheme(&scheme)));
    Ok(out)
}
