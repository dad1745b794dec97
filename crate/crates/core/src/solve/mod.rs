//! Dual-extrapolation drivers and baselines.
//!
//! Every driver shares the same outer loop: the dual state `s` accumulates
//! `-lambda_k F(x_k)`, the anchor is `v = dual_step(x0, s)` (or `z0 + s` on the
//! full space), a model around `v` is solved to its acceptance criterion, and
//! the step size comes from a fixed interior point of the bracket
//! `lo <= lambda * denominator <= hi`.

mod baseline;
mod minmax;
mod restart;
mod tensor;
mod viji;

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::jacobian::{
    broyden_build, pairs_from_history, pairs_from_jvp, JacobianApprox, PairBuffer, PairStrategy, Update,
};
use crate::model::{Model, ModelParams};
use crate::operators::Oracle;
use crate::rng;
use crate::subsolve::{ConditionCheck, ExtragradientOptions};

pub use baseline::{extragradient_run, perseus1_run};
pub use minmax::viji_minmax_run;
pub use restart::{restart_schedule, restart_steps, viji_restarted_run, RestartStage, RestartTrace};
pub use tensor::{tensor_output_bound_coefficient, vihi_run, TensorConfig};
pub use viji::viji_run;

/// Which point a run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum OutputMode {
    /// `sum_k lambda_k x_k / sum_k lambda_k`.
    Average,
    Last,
    /// `x_k` with the smallest `|x_k - v_k|`.
    MinStep,
}

impl TryFrom<u8> for OutputMode {
    type Error = Error;

    fn try_from(opt: u8) -> Result<Self> {
        match opt {
            0 => Ok(OutputMode::Average),
            1 => Ok(OutputMode::Last),
            2 => Ok(OutputMode::MinStep),
            o => Err(Error::InvalidArgument(format!("opt must be 0, 1 or 2, got {o}"))),
        }
    }
}

impl From<OutputMode> for u8 {
    fn from(m: OutputMode) -> u8 {
        match m {
            OutputMode::Average => 0,
            OutputMode::Last => 1,
            OutputMode::MinStep => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaMode {
    /// `beta_k = delta`.
    ConstantDelta,
    /// `beta_k = L/2 |x_k - v_k|`, with the directional inexactness
    /// `|(grad F(v) - J)(x - v)| <= L/2 |x - v|^2` checked every iteration.
    ExactMode,
}

/// Step-size bracket family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaRule {
    /// `[1/32, 1/22]` against `L/2 r + beta`.
    Viji,
    /// `[1/16, 1/12]` against `L r + delta`.
    MinMax,
    /// `[1/(4(5p-2)), 1/(2(5p+1))]` against the order-`p` denominator.
    Tensor { p: usize },
}

impl LambdaRule {
    pub fn bracket(&self) -> (f64, f64) {
        match *self {
            LambdaRule::Viji => (1.0 / 32.0, 1.0 / 22.0),
            LambdaRule::MinMax => (1.0 / 16.0, 1.0 / 12.0),
            LambdaRule::Tensor { p } => {
                let p = p as f64;
                (1.0 / (4.0 * (5.0 * p - 2.0)), 1.0 / (2.0 * (5.0 * p + 1.0)))
            }
        }
    }

    /// Harmonic midpoint `2 / (a + b)` of `[1/a, 1/b]`: 1/27, 1/14, ...
    pub fn interior(&self) -> f64 {
        let (lo, hi) = self.bracket();
        2.0 / (1.0 / lo + 1.0 / hi)
    }
}

/// `lambda = c / denom` with `c` the interior point of the bracket.
pub fn lambda_from_denominator(denom: f64, rule: LambdaRule) -> Result<f64> {
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::ZeroDenominator);
    }
    let lambda = rule.interior() / denom;
    let (lo, hi) = rule.bracket();
    let prod = lambda * denom;
    if prod < lo * (1.0 - 1e-12) || prod > hi * (1.0 + 1e-12) {
        return Err(Error::BracketViolation { lambda: prod, lo, hi });
    }
    Ok(lambda)
}

/// Step size for the first-order model: the denominator is `L/2 r + beta`
/// for [`LambdaRule::Viji`] and `L r + beta` for [`LambdaRule::MinMax`].
pub fn lambda_select(lip: f64, step_norm: f64, beta: f64, rule: LambdaRule) -> Result<f64> {
    let denom = match rule {
        LambdaRule::MinMax => lip * step_norm + beta,
        _ => 0.5 * lip * step_norm + beta,
    };
    lambda_from_denominator(denom, rule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum JacobianProvider {
    /// Dense Jacobian of the operator at the anchor.
    Exact,
    Zero,
    /// Exact Jacobian plus `delta u w^T` for seeded unit vectors `u`, `w`.
    Perturbed { delta: f64, seed: u64 },
    /// Limited-memory Broyden with `J0 = j0 I`.
    Broyden {
        update: Update,
        strategy: PairStrategy,
        memory: usize,
        j0: f64,
        #[serde(default)]
        history: HistorySource,
    },
}

/// Which evaluations feed the history pair window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistorySource {
    /// Every operator evaluation, anchors and iterates alike.
    #[default]
    Evaluations,
    /// Only the accepted iterates `x_k`.
    Iterates,
}

/// How the inexactness level `delta` handed to the model is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeltaMode {
    /// `SolverConfig::delta` as given.
    Fixed,
    /// The worst-case bound of the Broyden family for `|grad F| <= l0`.
    Certified { l0: f64 },
    /// `|grad F(v) - J|_op` measured at each anchor with a dense Jacobian.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Lipschitz constant of the Jacobian (`L_1`).
    pub lip: f64,
    pub delta: f64,
    pub delta_mode: DeltaMode,
    pub eta: f64,
    pub beta_mode: BetaMode,
    pub opt: OutputMode,
    pub iters: usize,
    /// Starting point; defaults to the domain centre.
    pub x0: Option<Vec<f64>>,
    /// Try the ray search before extragradient on bounded domains.
    pub ray_search: bool,
    pub ray_eps: Option<f64>,
    pub eg_max_iters: usize,
    pub eg_step: Option<f64>,
    pub tau_tol: f64,
    pub refine_budget: usize,
    /// Rebuild quasi-Newton pairs once when the exact-mode check fails.
    pub retry_rebuild: bool,
    pub stationarity_tol: f64,
    /// Keep `(v_k, x_k, F(x_k))` for every iteration in the trace.
    pub keep_iterates: bool,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lip: 1.0,
            delta: 0.0,
            delta_mode: DeltaMode::Fixed,
            eta: 10.0,
            beta_mode: BetaMode::ConstantDelta,
            opt: OutputMode::Average,
            iters: 100,
            x0: None,
            ray_search: true,
            ray_eps: None,
            eg_max_iters: 20_000,
            eg_step: None,
            tau_tol: 0.5,
            refine_budget: 100,
            retry_rebuild: true,
            stationarity_tol: 1e-14,
            keep_iterates: false,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lip >= 0.0 && self.lip.is_finite()) {
            return bad(format!("lip must be nonnegative, got {}", self.lip));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be nonnegative, got {}", self.delta));
        }
        if !(self.eta >= 1.0 && self.eta.is_finite()) {
            return bad(format!("eta must be at least 1, got {}", self.eta));
        }
        if !(self.tau_tol > 0.0 && self.tau_tol < 1.0) {
            return bad(format!("tau_tol must lie in (0, 1), got {}", self.tau_tol));
        }
        if let Some(e) = self.ray_eps {
            if !(e > 0.0) {
                return bad(format!("ray_eps must be positive, got {e}"));
            }
        }
        if let DeltaMode::Certified { l0 } = self.delta_mode {
            if !(l0 > 0.0) {
                return bad(format!("certified delta needs l0 > 0, got {l0}"));
            }
        }
        Ok(())
    }

    pub(crate) fn start(&self, dom: &Domain) -> Result<Vector> {
        match &self.x0 {
            Some(x) => {
                crate::error::check_dim(dom.dim(), x.len())?;
                Ok(Vector::from_column_slice(x))
            }
            None => Ok(dom.center()),
        }
    }

    pub(crate) fn eg_options(&self) -> ExtragradientOptions {
        ExtragradientOptions {
            max_iters: self.eg_max_iters,
            step0: self.eg_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub k: usize,
    pub lambda: f64,
    pub step_norm: f64,
    pub op_evals: u64,
    pub jvp_evals: u64,
    pub wall_s: f64,
    /// Observer metric at the current output point, on sampled iterations.
    pub metric: Option<f64>,
    /// Running `sum_k |x_k - v_k|^2`.
    pub sum_sq_steps: f64,
    /// Subproblem work (extragradient steps or shifted solves).
    pub inner_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterateRecord {
    pub v: Vector,
    pub x: Vector,
    pub fx: Vector,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub records: Vec<IterRecord>,
    pub mode: OutputMode,
    pub output: Vector,
    /// Dual state after the last completed iteration.
    pub dual: Vector,
    pub stationary: bool,
    pub iterates: Option<Vec<IterateRecord>>,
    /// Metric at the returned point, when the observer provides one.
    pub final_metric: Option<f64>,
}

impl Trace {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn sum_sq_steps(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.sum_sq_steps)
    }
}

/// Subproblem acceptance event, replayed to observers for independent checks.
pub enum Acceptance<'a> {
    Condition {
        model: &'a dyn Model,
        /// Raw parameters when the model is the first-order one.
        params: Option<&'a ModelParams>,
        dom: &'a Domain,
        x: &'a Vector,
        check: ConditionCheck,
    },
    MinMax {
        model: &'a ModelParams,
        z: &'a Vector,
        lhs: f64,
        rhs: f64,
        tau_tol: f64,
    },
}

/// Hooks into a run. All methods default to no-ops.
pub trait Observer {
    /// Sample the metric every this many iterations (0 = never).
    fn sample_every(&self) -> usize {
        0
    }

    /// Metric at the current output point.
    fn metric(&mut self, _k: usize, _output: &Vector) -> Option<f64> {
        None
    }

    fn accepted(&mut self, _k: usize, _event: &Acceptance<'_>) {}
}

/// Observer that records nothing.
pub struct NoObserver;

impl Observer for NoObserver {}

/// Running output accumulator for the three output modes.
struct Outputs {
    weighted: Vector,
    weight: f64,
    last: Vector,
    best: (f64, Vector),
}

impl Outputs {
    fn new(x0: &Vector) -> Self {
        Outputs {
            weighted: Vector::zeros(x0.len()),
            weight: 0.0,
            last: x0.clone(),
            best: (f64::INFINITY, x0.clone()),
        }
    }

    fn push(&mut self, x: &Vector, lambda: f64, step: f64) {
        self.weighted.axpy(lambda, x, 1.0);
        self.weight += lambda;
        self.last.copy_from(x);
        if step < self.best.0 {
            self.best = (step, x.clone());
        }
    }

    fn current(&self, mode: OutputMode) -> Vector {
        match mode {
            OutputMode::Average if self.weight > 0.0 => &self.weighted / self.weight,
            OutputMode::Average | OutputMode::Last => self.last.clone(),
            OutputMode::MinStep => self.best.1.clone(),
        }
    }
}

/// Result of one inner step of a driver.
pub(crate) struct Step {
    pub x: Vector,
    pub fx: Vector,
    /// Step-size denominator (already including `beta`).
    pub denom: f64,
    pub inner: usize,
}

pub(crate) enum Anchor<'a> {
    /// `v = project(x0 + s)`.
    Dual(&'a Domain),
    /// `v = x0 + s`.
    Free,
}

/// The shared outer loop.
pub(crate) fn dual_loop<S>(
    oracle: &Oracle,
    anchor: Anchor<'_>,
    x0: &Vector,
    cfg: &SolverConfig,
    rule: LambdaRule,
    observer: &mut dyn Observer,
    mut step: S,
) -> Result<(Vector, Trace)>
where
    S: FnMut(usize, &Vector, &Vector, &mut dyn Observer) -> Result<Step>,
{
    cfg.validate()?;
    let d = oracle.dim();
    crate::error::check_dim(d, x0.len())?;
    let start = Instant::now();
    let base = oracle.counts();
    let every = observer.sample_every();
    let mut s = Vector::zeros(d);
    let mut outputs = Outputs::new(x0);
    let mut records = Vec::with_capacity(cfg.iters);
    let mut iterates = cfg.keep_iterates.then(Vec::new);
    let mut sum_sq = 0.0;
    let finish = |point: Vector,
                  s: Vector,
                  records: Vec<IterRecord>,
                  iterates: Option<Vec<IterateRecord>>,
                  stationary: bool,
                  observer: &mut dyn Observer| {
        let final_metric = observer.metric(records.len(), &point);
        Ok((
            point.clone(),
            Trace {
                records,
                mode: cfg.opt,
                output: point,
                dual: s,
                stationary,
                iterates,
                final_metric,
            },
        ))
    };
    for k in 1..=cfg.iters {
        let v = match anchor {
            Anchor::Dual(dom) => dom.dual_step(x0, &s),
            Anchor::Free => Ok(x0 + &s),
        }
        .map_err(|e| e.at(k))?;
        let fv = oracle.eval(&v).map_err(|e| e.at(k))?;
        if fv.norm() <= cfg.stationarity_tol {
            return finish(v, s, records, iterates, true, observer);
        }
        let st = step(k, &v, &fv, observer).map_err(|e| e.at(k))?;
        let r = (&st.x - &v).norm();
        sum_sq += r * r;
        // zero step with zero denominator: the anchor already solves the VI
        if st.fx.norm() <= cfg.stationarity_tol || (r == 0.0 && st.denom == 0.0) {
            return finish(st.x, s, records, iterates, true, observer);
        }
        let lambda = lambda_from_denominator(st.denom, rule).map_err(|e| e.at(k))?;
        s.axpy(-lambda, &st.fx, 1.0);
        outputs.push(&st.x, lambda, r);
        let c = oracle.counts();
        let metric = if every > 0 && k % every == 0 {
            observer.metric(k, &outputs.current(cfg.opt))
        } else {
            None
        };
        records.push(IterRecord {
            k,
            lambda,
            step_norm: r,
            op_evals: c.evals - base.evals,
            jvp_evals: c.jvps - base.jvps,
            wall_s: start.elapsed().as_secs_f64(),
            metric,
            sum_sq_steps: sum_sq,
            inner_iters: st.inner,
        });
        if let Some(list) = iterates.as_mut() {
            list.push(IterateRecord { v, x: st.x, fx: st.fx });
        }
    }
    let out = outputs.current(cfg.opt);
    finish(out, s, records, iterates, false, observer)
}

/// Builds Jacobian approximations at each anchor and keeps the pair history.
pub(crate) struct ProviderState {
    provider: JacobianProvider,
    history: VecDeque<(Vector, Vector)>,
    perturbation: Option<DMatrix<f64>>,
    seed: u64,
}

fn mix(seed: u64, k: usize, attempt: u64) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl ProviderState {
    pub fn new(provider: JacobianProvider, dim: usize, seed: u64) -> Result<Self> {
        let perturbation = match &provider {
            JacobianProvider::Perturbed { delta, seed } => {
                if !(*delta >= 0.0) {
                    return Err(Error::InvalidArgument(format!("perturbation must be nonnegative, got {delta}")));
                }
                let mut r = rng::seeded(*seed);
                let u = rng::unit_sphere(dim, &mut r);
                let w = rng::unit_sphere(dim, &mut r);
                Some(&u * w.transpose() * *delta)
            }
            JacobianProvider::Broyden { memory, j0, .. } => {
                if *memory > 64 {
                    return Err(Error::InvalidArgument(format!("memory {memory} exceeds 64")));
                }
                if !(*j0 >= 0.0) {
                    return Err(Error::InvalidArgument(format!("J0 scale must be nonnegative, got {j0}")));
                }
                None
            }
            _ => None,
        };
        Ok(ProviderState {
            provider,
            history: VecDeque::new(),
            perturbation,
            seed,
        })
    }

    /// Approximation at anchor `v`; `attempt > 0` forces fresh pairs.
    pub fn build(&self, oracle: &Oracle, v: &Vector, k: usize, attempt: u64) -> Result<JacobianApprox> {
        let d = oracle.dim();
        match &self.provider {
            JacobianProvider::Exact => Ok(JacobianApprox::dense(oracle.dense_jacobian(v)?)),
            JacobianProvider::Zero => Ok(JacobianApprox::Zero { dim: d }),
            JacobianProvider::Perturbed { .. } => {
                let e = self.perturbation.as_ref().expect("perturbation built with the provider");
                Ok(JacobianApprox::dense(oracle.dense_jacobian(v)? + e))
            }
            JacobianProvider::Broyden {
                update,
                strategy,
                memory,
                j0,
                ..
            } => {
                let j0v = Vector::from_element(d, *j0);
                let use_jvp = *strategy == PairStrategy::JvpSampling || attempt > 0;
                let pairs = if use_jvp {
                    pairs_from_jvp(oracle, v, (*memory).min(d.saturating_sub(1)), mix(self.seed, k, attempt))?
                } else {
                    let window: Vec<(Vector, Vector)> = self.history.iter().cloned().collect();
                    if window.len() < 2 {
                        // nothing to difference yet: J = J0
                        PairBuffer {
                            pairs: Vec::new(),
                            strategy: PairStrategy::History,
                        }
                    } else {
                        pairs_from_history(&window, (*memory).min(window.len() - 1))?
                    }
                };
                Ok(JacobianApprox::LowRank(broyden_build(&j0v, &pairs, *update, *memory)?))
            }
        }
    }

    /// Records operator evaluations for the history window.
    pub fn observe(&mut self, point: &Vector, value: &Vector, is_iterate: bool) {
        if let JacobianProvider::Broyden {
            strategy: PairStrategy::History,
            memory,
            history,
            ..
        } = &self.provider
        {
            if *history == HistorySource::Iterates && !is_iterate {
                return;
            }
            self.history.push_back((point.clone(), value.clone()));
            while self.history.len() > memory + 1 {
                self.history.pop_front();
            }
        }
    }

    /// `delta` for the model at this anchor.
    pub fn delta(&self, cfg: &SolverConfig, oracle: &Oracle, v: &Vector, jac: &JacobianApprox) -> Result<f64> {
        match cfg.delta_mode {
            DeltaMode::Fixed => Ok(cfg.delta),
            DeltaMode::Certified { l0 } => Ok(match &self.provider {
                JacobianProvider::Broyden { update, memory, .. } => crate::jacobian::delta_bound(*update, *memory, l0),
                JacobianProvider::Zero => l0,
                JacobianProvider::Exact => 0.0,
                JacobianProvider::Perturbed { delta, .. } => *delta,
            }),
            DeltaMode::Measured => {
                let exact = oracle.operator().jacobian(v).ok_or(Error::Unsupported("a dense Jacobian"))?;
                Ok(crate::linalg::op_norm(&(exact - jac.to_dense())))
            }
        }
    }
}
