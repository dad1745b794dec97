//! Self-contained invariant suites behind the `check` command.
//!
//! Each suite draws its instances from a seed, compares the solver's fast
//! paths against dense references and returns a [`SuiteReport`].

use std::time::Instant;

use nalgebra::DMatrix;

use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::jacobian::{broyden_build, broyden_dense, pairs_from_history, pairs_from_jvp, PairBuffer, Update};
use crate::linalg::op_norm;
use crate::metrics::gap_affine_ball;
use crate::model::ModelParams;
use crate::operators::{make_affine, CubicBilinear, Oracle};
use crate::rng;
use crate::solve::{
    viji_minmax_run, viji_run, Acceptance, JacobianProvider, LambdaRule, Observer, OutputMode, SolverConfig,
};

pub const SUITES: [&str; 6] = ["woodbury", "broyden", "taylor", "condition", "lambda", "gap-bound"];

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    /// Multiplies the measured inexactness handed to the Taylor-bound suite.
    /// Values below one understate it and should make the suite fail.
    pub taylor_delta_scale: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            seed: 0,
            taylor_delta_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Worst observed value of the suite's key ratio.
    pub worst: f64,
    pub elapsed_s: f64,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: &'static str, cases: usize, failures: usize, worst: f64, start: Instant, detail: String) -> Self {
        SuiteReport {
            name,
            passed: failures == 0 && cases > 0,
            cases,
            failures,
            worst,
            elapsed_s: start.elapsed().as_secs_f64(),
            detail,
        }
    }
}

/// Runs every suite whose name contains `filter` (all when `None`).
pub fn run_suites(filter: Option<&str>, opts: &CheckOptions) -> Result<Vec<SuiteReport>> {
    let names: Vec<&'static str> = SUITES
        .iter()
        .copied()
        .filter(|n| filter.is_none_or(|f| n.contains(f)))
        .collect();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no suite matches {:?}; known suites: {}",
            filter.unwrap_or(""),
            SUITES.join(", ")
        )));
    }
    names.into_iter().map(|n| run_suite(n, opts)).collect()
}

pub fn run_suite(name: &str, opts: &CheckOptions) -> Result<SuiteReport> {
    match name {
        "woodbury" => woodbury_suite(opts.seed),
        "broyden" => broyden_suite(opts.seed),
        "taylor" => taylor_suite(opts.seed, opts.taylor_delta_scale),
        "condition" => condition_suite(opts.seed),
        "lambda" => lambda_suite(opts.seed),
        "gap-bound" => gap_bound_suite(opts.seed),
        other => Err(Error::InvalidArgument(format!("unknown suite {other:?}"))),
    }
}

fn random_pairs(d: usize, m: usize, scale: f64, r: &mut rng::SolverRng) -> PairBuffer {
    PairBuffer {
        pairs: (0..m)
            .map(|_| (rng::gaussian(d, r), rng::gaussian(d, r) * scale))
            .collect(),
        strategy: crate::jacobian::PairStrategy::JvpSampling,
    }
}

fn uniform(r: &mut rng::SolverRng, lo: f64, hi: f64) -> f64 {
    use rand::Rng;
    lo + (hi - lo) * r.random::<f64>()
}

fn woodbury_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let (d, m, n) = (40, 5, 50);
    let mut r = rng::substream(seed, 1);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..n {
        let update = if i % 2 == 0 { Update::Plain } else { Update::Damped };
        let j0 = Vector::from_element(d, uniform(&mut r, 0.1, 1.0));
        let jac = broyden_build(&j0, &random_pairs(d, m, 0.5, &mut r), update, m)?;
        let sigma = uniform(&mut r, 1.0, 3.0);
        let b = rng::gaussian(d, &mut r);
        let x = jac.solve_shifted(sigma, &b)?;
        let dense = jac.to_dense() + DMatrix::identity(d, d) * sigma;
        let x_ref = dense.lu().solve(&b).ok_or_else(|| Error::IllConditioned("dense reference".into()))?;
        let rel = (&x - &x_ref).norm() / x_ref.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if rel > 1e-8 {
            failures += 1;
        }
    }
    Ok(SuiteReport::new(
        "woodbury",
        n,
        failures,
        worst,
        start,
        format!("{n} shifted solves d={d} r={m}, max relative error {worst:.2e}"),
    ))
}

/// One random build: factored equals the dense recursion; norm growth and
/// inexactness stay within their bounds.
struct BroydenCase {
    recursion_err: f64,
    norm_ratio: f64,
    delta_ratio: f64,
}

fn broyden_case(
    oracle: &Oracle,
    x: &Vector,
    pairs: &PairBuffer,
    update: Update,
    m: usize,
    l0: f64,
    j0_scale: f64,
) -> Result<BroydenCase> {
    let d = oracle.dim();
    let alpha = match update {
        Update::Plain => 1.0,
        Update::Damped => (m + 1) as f64,
    };
    let j0 = Vector::from_element(d, j0_scale);
    let jac = broyden_build(&j0, pairs, update, m)?;
    let dense = broyden_dense(&DMatrix::from_diagonal(&j0), pairs, update, m);
    let fact = jac.to_dense();
    let recursion_err = (&fact - &dense).amax() / dense.amax().max(1.0);
    let norm_ratio = op_norm(&fact) / (j0_scale.abs() + m as f64 * l0 / alpha);
    let exact = oracle.dense_jacobian(x)?;
    let delta_ratio = op_norm(&(exact - fact)) / crate::jacobian::delta_bound(update, m, l0);
    Ok(BroydenCase {
        recursion_err,
        norm_ratio,
        delta_ratio,
    })
}

fn broyden_suite(seed: u64) -> Result<SuiteReport> {
    use rand::Rng;
    let start = Instant::now();
    let mut r = rng::substream(seed, 2);
    let n = 100;
    let (mut failures, mut worst_rec, mut worst_norm, mut worst_delta) = (0, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        let update = if i % 2 == 0 { Update::Plain } else { Update::Damped };
        let m = r.random_range(1..=5usize);
        let alpha = if update == Update::Plain { 1.0 } else { (m + 1) as f64 };
        let (oracle, l0, x, pairs) = if i % 4 < 2 {
            // affine operator, JVP pairs when they fit, history otherwise
            let d = r.random_range(2..=8usize);
            let a = DMatrix::from_fn(d, d, |_, _| rng::gaussian(1, &mut r)[0]);
            let l0 = op_norm(&a);
            let oracle = make_affine(a, rng::gaussian(d, &mut r))?;
            let x = rng::gaussian(d, &mut r);
            let pairs = if m < d {
                pairs_from_jvp(&oracle, &x, m, r.random())?
            } else {
                let traj: Vec<_> = (0..=m)
                    .map(|_| {
                        let p = rng::gaussian(d, &mut r);
                        let f = oracle.eval(&p).expect("affine evaluation");
                        (p, f)
                    })
                    .collect();
                pairs_from_history(&traj, m)?
            };
            (oracle, l0, x, pairs)
        } else {
            // cubic-bilinear on the unit ball: |grad F| <= rho + |A| <= rho + 2
            let game = r.random_range(2..=4usize);
            let rho = uniform(&mut r, 0.1, 2.0);
            let oracle = Oracle::new(CubicBilinear::new(game, rho)?);
            let l0 = rho + 2.0;
            let traj: Vec<_> = (0..=m)
                .map(|_| {
                    let p = rng::in_ball(2 * game, 1.0, &mut r);
                    let f = oracle.eval(&p).expect("bilinear evaluation");
                    (p, f)
                })
                .collect();
            let x = traj[m].0.clone();
            (oracle, l0, x, pairs_from_history(&traj, m)?)
        };
        let j0_scale = uniform(&mut r, 0.0, l0 / alpha);
        let c = broyden_case(&oracle, &x, &pairs, update, m, l0, j0_scale)?;
        worst_rec = worst_rec.max(c.recursion_err);
        worst_norm = worst_norm.max(c.norm_ratio);
        worst_delta = worst_delta.max(c.delta_ratio);
        if c.recursion_err > 1e-12 || c.norm_ratio > 1.0 + 1e-12 || c.delta_ratio > 1.0 + 1e-12 {
            failures += 1;
        }
    }
    Ok(SuiteReport::new(
        "broyden",
        n,
        failures,
        worst_delta,
        start,
        format!(
            "{n} builds: recursion error {worst_rec:.1e}, norm growth ratio {worst_norm:.3}, inexactness ratio {worst_delta:.3}"
        ),
    ))
}

/// Samples `(x, v)` pairs on the cubic-bilinear game and checks
/// `|F(x) - F(v) - J (x - v)| <= rho/2 |x - v|^2 + delta |x - v|` with the
/// measured `delta = |grad F(v) - J|`, scaled by `delta_scale`.
pub fn taylor_samples(seed: u64, n: usize, delta_scale: f64) -> Result<(usize, f64)> {
    let game = 10;
    let rho = 1.0;
    let oracle = Oracle::new(CubicBilinear::new(game, rho)?);
    let d = 2 * game;
    let mut r = rng::substream(seed, 3);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let v = rng::in_ball(d, 2.0, &mut r);
        // spread the step length over several scales so both terms matter
        let len = 10f64.powf(uniform(&mut r, -3.0, 0.5));
        let x = &v + rng::unit_sphere(d, &mut r) * len;
        let err_scale = [0.0, 0.01, 0.3][i % 3];
        let e = DMatrix::from_fn(d, d, |_, _| rng::gaussian(1, &mut r)[0] * err_scale);
        let jac = oracle.dense_jacobian(&v)? + &e;
        let delta = op_norm(&e) * delta_scale;
        let s = &x - &v;
        let lhs = (oracle.eval(&x)? - oracle.eval(&v)? - &jac * &s).norm();
        let rn = s.norm();
        let rhs = 0.5 * rho * rn * rn + delta * rn;
        worst = worst.max(lhs / rhs.max(f64::MIN_POSITIVE));
        if lhs > rhs + 1e-9 {
            failures += 1;
        }
    }
    Ok((failures, worst))
}

fn taylor_suite(seed: u64, delta_scale: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let n = 1000;
    let (failures, worst) = taylor_samples(seed, n, delta_scale)?;
    Ok(SuiteReport::new(
        "taylor",
        n,
        failures,
        worst,
        start,
        format!("{n} samples on d=10 cubic-bilinear, {failures} violations, worst ratio {worst:.3}"),
    ))
}

/// Re-verifies every accepted subproblem solution from the raw model data,
/// without the solver's own evaluation routines.
#[derive(Debug, Default)]
pub struct ReplayObserver {
    pub checked: usize,
    pub violations: Vec<String>,
    /// Worst `lhs / (rhs + tolerance)` seen; at most one when all pass.
    pub worst: f64,
}

fn manual_sup(dom: &Domain, w: &Vector, x: &Vector) -> Result<f64> {
    match dom {
        Domain::Ball { center, radius } => Ok(w.dot(&(x - center)) + radius * w.norm()),
        Domain::Box { lower, upper } => Ok((0..w.len())
            .map(|i| w[i] * x[i] - (w[i] * lower[i]).min(w[i] * upper[i]))
            .sum()),
        Domain::FullSpace { .. } => Err(Error::UnboundedDomain),
    }
}

fn raw_omega(mp: &ModelParams, x: &Vector) -> (Vector, f64) {
    let s = x - &mp.anchor;
    let r = s.norm();
    let j = mp.jac.to_dense();
    let w = &mp.f_anchor + &j * &s + &s * (mp.eta * mp.delta + 5.0 * mp.lip * r);
    (w, r)
}

impl ReplayObserver {
    fn record(&mut self, k: usize, lhs: f64, rhs: f64, tol: f64, what: &str) {
        self.checked += 1;
        self.worst = self.worst.max(lhs / (rhs + tol));
        if !(lhs <= rhs + tol) {
            self.violations.push(format!("iteration {k}: {what} {lhs:.3e} > {rhs:.3e}"));
        }
    }
}

impl Observer for ReplayObserver {
    fn accepted(&mut self, k: usize, event: &Acceptance<'_>) {
        match event {
            Acceptance::Condition { model, params, dom, x, .. } => {
                let (lhs, rhs) = match params {
                    Some(mp) => {
                        let (w, r) = raw_omega(mp, x);
                        (manual_sup(dom, &w, x), 0.5 * mp.lip * r.powi(3) + mp.delta * r * r)
                    }
                    None => match model.eval(x) {
                        Ok(w) => (manual_sup(dom, &w, x), model.condition_rhs((*x - model.anchor()).norm())),
                        Err(e) => (Err(e), 0.0),
                    },
                };
                match lhs {
                    Ok(lhs) => self.record(k, lhs, rhs, 1e-12 + 1e-9 * rhs, "condition"),
                    Err(e) => self.violations.push(format!("iteration {k}: {e}")),
                }
            }
            Acceptance::MinMax { model, z, tau_tol, .. } => {
                let (w, r) = raw_omega(model, z);
                let rhs = tau_tol * (0.5 * model.lip * r * r + model.delta * r).min(model.f_anchor.norm());
                self.record(k, w.norm(), rhs, 1e-12 + 1e-9 * rhs, "residual");
            }
        }
    }
}

fn monotone_affine(d: usize, r: &mut rng::SolverRng) -> Result<(DMatrix<f64>, Vector)> {
    let a = DMatrix::from_fn(d, d, |_, _| rng::gaussian(1, r)[0]);
    let b = DMatrix::from_fn(d, d, |_, _| rng::gaussian(1, r)[0]);
    // PSD part plus skew part, scaled to unit norm
    let m = &b * b.transpose() * 0.1 + (&a - a.transpose());
    let m = &m / op_norm(&m);
    Ok((m, rng::gaussian(d, r)))
}

fn replay_matrix(seed: u64) -> Result<Vec<(String, ReplayObserver)>> {
    use crate::jacobian::PairStrategy;
    let mut r = rng::substream(seed, 4);
    let mut out = Vec::new();
    let (m, q) = monotone_affine(6, &mut r)?;
    let oracle = make_affine(m, q)?;
    let ball = Domain::centered_ball(6, 1.0)?;
    let boxed = Domain::new_box(Vector::from_element(6, -0.5), Vector::from_element(6, 0.5))?;
    let damped = JacobianProvider::Broyden {
        update: Update::Damped,
        strategy: PairStrategy::History,
        memory: 3,
        j0: 0.1,
        history: Default::default(),
    };
    let cases: Vec<(&str, &Domain, JacobianProvider, f64)> = vec![
        ("ball exact", &ball, JacobianProvider::Exact, 0.0),
        ("ball perturbed", &ball, JacobianProvider::Perturbed { delta: 0.1, seed: 5 }, 0.1),
        ("ball damped", &ball, damped.clone(), 2.0),
        ("box perturbed", &boxed, JacobianProvider::Perturbed { delta: 0.1, seed: 6 }, 0.1),
        ("box zero", &boxed, JacobianProvider::Zero, 1.0),
    ];
    for (name, dom, provider, delta) in cases {
        let cfg = SolverConfig {
            iters: 60,
            delta,
            lip: 0.5,
            seed,
            ..Default::default()
        };
        let mut obs = ReplayObserver::default();
        viji_run(&oracle, dom, &cfg, &provider, &mut obs).map_err(|e| Error::InvalidArgument(format!("{name}: {e}")))?;
        out.push((name.to_string(), obs));
    }
    let game = Oracle::new(CubicBilinear::new(5, 1e-1)?);
    let cfg = SolverConfig {
        iters: 100,
        delta: 0.6,
        lip: 1e-1,
        opt: OutputMode::Last,
        eta: 1.0,
        seed,
        ..Default::default()
    };
    let mut obs = ReplayObserver::default();
    viji_minmax_run(&game, &cfg, &damped, &mut obs)?;
    out.push(("min-max damped".to_string(), obs));
    Ok(out)
}

fn condition_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let runs = replay_matrix(seed)?;
    let cases: usize = runs.iter().map(|(_, o)| o.checked).sum();
    let failures: usize = runs.iter().map(|(_, o)| o.violations.len()).sum();
    let worst = runs.iter().map(|(_, o)| o.worst).fold(0.0, f64::max);
    let first = runs
        .iter()
        .find_map(|(n, o)| o.violations.first().map(|v| format!("; first violation in {n}: {v}")))
        .unwrap_or_default();
    Ok(SuiteReport::new(
        "condition",
        cases,
        failures,
        worst,
        start,
        format!("{cases} accepted iterates across {} runs re-verified{first}", runs.len()),
    ))
}

fn lambda_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = rng::substream(seed, 5);
    let (m, q) = monotone_affine(5, &mut r)?;
    let oracle = make_affine(m, q)?;
    let dom = Domain::centered_ball(5, 1.0)?;
    let mut cases = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut tally = |rule: LambdaRule, lip: f64, delta: f64, recs: &[crate::solve::IterRecord]| {
        let (lo, hi) = rule.bracket();
        for rec in recs {
            let denom = match rule {
                LambdaRule::MinMax => lip * rec.step_norm + delta,
                _ => 0.5 * lip * rec.step_norm + delta,
            };
            let c = rec.lambda * denom;
            cases += 1;
            worst = worst.max((c - 0.5 * (lo + hi)).abs() / (hi - lo));
            if !(c >= lo * (1.0 - 1e-12) && c <= hi * (1.0 + 1e-12)) {
                failures += 1;
            }
        }
    };
    for (lip, delta) in [(1.0, 0.0), (1.0, 0.1), (0.1, 1.0)] {
        let cfg = SolverConfig {
            iters: 40,
            lip,
            delta,
            seed,
            ..Default::default()
        };
        let provider = JacobianProvider::Perturbed { delta, seed: 7 };
        let (_, trace) = viji_run(&oracle, &dom, &cfg, &provider, &mut crate::solve::NoObserver)?;
        tally(LambdaRule::Viji, lip, delta, &trace.records);
        let (_, trace) = viji_minmax_run(&oracle, &cfg, &provider, &mut crate::solve::NoObserver)?;
        tally(LambdaRule::MinMax, lip, delta, &trace.records);
    }
    Ok(SuiteReport::new(
        "lambda",
        cases,
        failures,
        worst,
        start,
        format!("{cases} step sizes inside their brackets"),
    ))
}

/// `16 sqrt 2 L D^3 / T^{3/2} + 16 sqrt 2 delta D^2 / T`.
pub fn averaged_gap_bound(lip: f64, delta: f64, diam: f64, t: usize) -> f64 {
    let t = t as f64;
    16.0 * 2f64.sqrt() * (lip * diam.powi(3) / t.powf(1.5) + delta * diam * diam / t)
}

fn gap_bound_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = rng::substream(seed, 6);
    let d = 10;
    let (m, q) = monotone_affine(d, &mut r)?;
    let oracle = make_affine(m.clone(), q.clone())?;
    let dom = Domain::centered_ball(d, 1.0)?;
    let t = 100;
    let lip = 1.0;
    let mut cases = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for delta in [0.0, 0.1] {
        let cfg = SolverConfig {
            iters: t,
            lip,
            delta,
            seed,
            ..Default::default()
        };
        let provider = JacobianProvider::Perturbed { delta, seed: 11 };
        let (x, _) = viji_run(&oracle, &dom, &cfg, &provider, &mut crate::solve::NoObserver)?;
        let gap = gap_affine_ball(&m, &q, &dom, &x)?.gap;
        let bound = averaged_gap_bound(lip, delta, 2.0, t);
        cases += 1;
        worst = worst.max(gap / bound);
        if gap > bound {
            failures += 1;
        }
        parts.push(format!("delta={delta}: gap {gap:.2e} <= {bound:.2e}"));
    }
    Ok(SuiteReport::new("gap-bound", cases, failures, worst, start, parts.join(", ")))
}
