//! Runs suites, writes one CSV trace per method and a JSON manifest.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use viji_core::jacobian::{PairStrategy, Update};
use viji_core::metrics::{MetricEvaluator, MetricObserver};
use viji_core::operators::Oracle;
use viji_core::solve::{
    extragradient_run, perseus1_run, viji_minmax_run, viji_run, DeltaMode, HistorySource, JacobianProvider,
    OutputMode, SolverConfig, Trace,
};
use viji_core::{Domain, Vector};

use crate::config::{MethodConfig, MethodEntry, Problem, SuiteConfig};

/// CSV columns, in order.
pub const CSV_HEADER: [&str; 8] = [
    "iter",
    "wall_s",
    "op_evals",
    "jvp_evals",
    "lambda",
    "step_norm",
    "metric_name",
    "metric_value",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub iter: usize,
    pub wall_s: f64,
    pub op_evals: u64,
    pub jvp_evals: u64,
    pub lambda: f64,
    pub step_norm: f64,
    pub metric_name: String,
    pub metric_value: f64,
}

impl Row {
    pub fn oracle_calls(&self) -> u64 {
        self.op_evals + self.jvp_evals
    }
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub label: String,
    pub output: Vector,
    pub trace: Trace,
    pub rows: Vec<Row>,
}

fn second_order_cfg(iters: usize, seed: u64, lip: f64, delta: f64, eta: f64) -> SolverConfig {
    SolverConfig {
        iters,
        lip,
        delta,
        eta,
        delta_mode: DeltaMode::Fixed,
        opt: OutputMode::Last,
        seed,
        ..Default::default()
    }
}

fn dual_extrapolation(
    oracle: &Oracle,
    dom: &Domain,
    cfg: &SolverConfig,
    provider: &JacobianProvider,
    obs: &mut MetricObserver<'_>,
) -> viji_core::Result<(Vector, Trace)> {
    if dom.is_bounded() {
        viji_run(oracle, dom, cfg, provider, obs)
    } else {
        viji_minmax_run(oracle, cfg, provider, obs)
    }
}

fn broyden(update: Update, memory: usize, j0: f64) -> JacobianProvider {
    JacobianProvider::Broyden {
        update,
        strategy: PairStrategy::History,
        memory,
        j0,
        history: HistorySource::Evaluations,
    }
}

/// Runs one method on a fresh oracle and collects its sampled rows.
pub fn run_method(problem: &Problem, entry: &MethodEntry, plot_every: usize, seed: u64, timing: bool) -> anyhow::Result<MethodRun> {
    let oracle = Oracle::from_arc(problem.op.clone());
    let eval = MetricEvaluator {
        metric: problem.metric.clone(),
        op: problem.op.as_ref(),
        dom: problem.dom.clone(),
        bilinear: problem.bilinear.clone(),
    };
    let mut obs = MetricObserver::new(eval, plot_every);
    let iters = entry.iterations();
    let dom = &problem.dom;
    let (output, trace) = match &entry.method {
        MethodConfig::Eg { lr } => extragradient_run(&oracle, dom, *lr, iters, None, &mut obs),
        MethodConfig::Perseus1 { l0, eta } => {
            // zero Jacobian: only the first-order regulariser is active
            let cfg = second_order_cfg(iters, seed, 0.0, *l0, *eta);
            perseus1_run(&oracle, dom, &cfg, *l0, &mut obs)
        }
        MethodConfig::Perseus2 { l1, eta } => {
            let cfg = second_order_cfg(iters, seed, *l1, 0.0, *eta);
            dual_extrapolation(&oracle, dom, &cfg, &JacobianProvider::Exact, &mut obs)
        }
        MethodConfig::ViqaBroyden {
            l1,
            delta,
            j0,
            memory,
            eta,
        } => {
            let cfg = second_order_cfg(iters, seed, *l1, *delta, *eta);
            dual_extrapolation(&oracle, dom, &cfg, &broyden(Update::Plain, *memory, *j0), &mut obs)
        }
        MethodConfig::ViqaDamped {
            l1,
            delta,
            j0,
            memory,
            eta,
        } => {
            let cfg = second_order_cfg(iters, seed, *l1, *delta, *eta);
            dual_extrapolation(&oracle, dom, &cfg, &broyden(Update::Damped, *memory, *j0), &mut obs)
        }
        MethodConfig::Viji { config, provider } => {
            let cfg = SolverConfig {
                iters,
                seed: config.seed ^ seed,
                ..config.clone()
            };
            dual_extrapolation(&oracle, dom, &cfg, provider, &mut obs)
        }
    }
    .with_context(|| format!("method {}", entry.label()))?;
    let rows = rows_from_trace(&trace, plot_every, problem.metric.name(), timing);
    Ok(MethodRun {
        label: entry.label(),
        output,
        trace,
        rows,
    })
}

/// One row per `plot_every` iterations plus the final iteration.
pub fn rows_from_trace(trace: &Trace, plot_every: usize, metric_name: &str, timing: bool) -> Vec<Row> {
    let n = trace.records.len();
    let mut rows: Vec<Row> = trace
        .records
        .iter()
        .enumerate()
        .filter(|(i, r)| r.k % plot_every == 0 || i + 1 == n)
        .map(|(i, r)| Row {
            iter: r.k,
            wall_s: if timing { r.wall_s } else { 0.0 },
            op_evals: r.op_evals,
            jvp_evals: r.jvp_evals,
            lambda: r.lambda,
            step_norm: r.step_norm,
            metric_name: metric_name.to_string(),
            metric_value: match r.metric {
                Some(m) if r.k % plot_every == 0 => m,
                _ if i + 1 == n => trace.final_metric.unwrap_or(f64::NAN),
                _ => f64::NAN,
            },
        })
        .collect();
    if rows.is_empty() {
        rows.push(Row {
            iter: 0,
            wall_s: 0.0,
            op_evals: 0,
            jvp_evals: 0,
            lambda: 0.0,
            step_norm: 0.0,
            metric_name: metric_name.to_string(),
            metric_value: trace.final_metric.unwrap_or(f64::NAN),
        });
    }
    rows
}

pub fn write_csv(path: &Path, rows: &[Row]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> anyhow::Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    anyhow::ensure!(header == CSV_HEADER, "unexpected CSV header {header:?}");
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub solver: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// CSV path relative to the manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    pub iterations: usize,
    /// The run stopped early at a point with `|F| <= 1e-14`.
    pub stationary: bool,
    pub op_evals: u64,
    pub jvp_evals: u64,
    /// `op_evals + jvp_evals`, the second x-axis.
    pub oracle_calls: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_metric: Option<f64>,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub suite: String,
    pub seed: u64,
    pub problem: crate::config::ProblemConfig,
    pub metric_name: String,
    pub plot_every: usize,
    /// Column names of the two x-axes.
    pub x_axes: Vec<String>,
    pub methods: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn all_ok(&self) -> bool {
        self.methods.iter().all(|m| m.status == Status::Ok)
    }
}

pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Result of one method inside a suite.
pub type MethodResult = anyhow::Result<MethodRun>;

/// Runs every method of the suite in parallel. Each worker writes its own
/// CSV when `out_dir` is given; the manifest is written once at the end.
pub fn run_suite(suite: &SuiteConfig, out_dir: Option<&Path>) -> anyhow::Result<(Manifest, Vec<MethodResult>)> {
    suite.validate()?;
    let problem = suite.problem.build()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let results: Vec<(MethodResult, Option<PathBuf>)> = suite
        .methods
        .par_iter()
        .map(|entry| {
            let res = run_method(&problem, entry, suite.plot_every, suite.seed, suite.timing);
            match (res, out_dir) {
                (Ok(run), Some(dir)) => {
                    let path = dir.join(format!("{}.csv", file_stem(&run.label)));
                    match write_csv(&path, &run.rows) {
                        Ok(()) => (Ok(run), Some(path)),
                        Err(e) => (Err(e), None),
                    }
                }
                (res, _) => (res, None),
            }
        })
        .collect();
    let methods = suite
        .methods
        .iter()
        .zip(&results)
        .map(|(entry, (res, path))| match res {
            Ok(run) => {
                let last = run.trace.records.last();
                let (op, jvp) = last.map_or((0, 0), |r| (r.op_evals, r.jvp_evals));
                ManifestEntry {
                    label: run.label.clone(),
                    solver: entry.method.name().into(),
                    status: Status::Ok,
                    error: None,
                    csv: path.as_ref().and_then(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()),
                    iterations: run.trace.iterations(),
                    stationary: run.trace.stationary,
                    op_evals: op,
                    jvp_evals: jvp,
                    oracle_calls: op + jvp,
                    final_metric: run.trace.final_metric,
                    wall_s: if suite.timing { last.map_or(0.0, |r| r.wall_s) } else { 0.0 },
                }
            }
            Err(e) => ManifestEntry {
                label: entry.label(),
                solver: entry.method.name().into(),
                status: Status::Failed,
                error: Some(format!("{e:#}")),
                csv: None,
                iterations: 0,
                stationary: false,
                op_evals: 0,
                jvp_evals: 0,
                oracle_calls: 0,
                final_metric: None,
                wall_s: 0.0,
            },
        })
        .collect();
    let manifest = Manifest {
        suite: suite.name.clone(),
        seed: suite.seed,
        problem: suite.problem.clone(),
        metric_name: problem.metric.name().into(),
        plot_every: suite.plot_every,
        x_axes: vec!["iter".into(), "op_evals+jvp_evals".into()],
        methods,
    };
    if let Some(dir) = out_dir {
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok((manifest, results.into_iter().map(|(r, _)| r).collect()))
}

/// Metric of each run at the largest sample whose cumulative oracle count
/// does not exceed `budget`.
pub fn metric_at_budget(rows: &[Row], budget: u64) -> Option<f64> {
    rows.iter().rfind(|r| r.oracle_calls() <= budget && r.metric_value.is_finite())
        .map(|r| r.metric_value)
}
