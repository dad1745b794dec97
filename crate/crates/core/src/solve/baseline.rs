use std::time::Instant;

use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::operators::Oracle;

use super::{viji_minmax_run, viji_run, DeltaMode, IterRecord, JacobianProvider, Observer, OutputMode, SolverConfig, Trace};

/// Projected extragradient with constant step `lr`, two operator calls per
/// iteration. Reports the last iterate.
pub fn extragradient_run(
    oracle: &Oracle,
    dom: &Domain,
    lr: f64,
    iters: usize,
    x0: Option<&Vector>,
    observer: &mut dyn Observer,
) -> Result<(Vector, Trace)> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    crate::error::check_dim(dom.dim(), oracle.dim())?;
    let start = Instant::now();
    let base = oracle.counts();
    let every = observer.sample_every();
    let mut x = match x0 {
        Some(x) => dom.project(x)?,
        None => dom.center(),
    };
    let mut records = Vec::with_capacity(iters);
    let mut stationary = false;
    let mut sum_sq = 0.0;
    for k in 1..=iters {
        let fx = oracle.eval(&x).map_err(|e| e.at(k))?;
        if fx.norm() <= 1e-14 {
            stationary = true;
            break;
        }
        let y = dom.project(&(&x - &fx * lr))?;
        let fy = oracle.eval(&y).map_err(|e| e.at(k))?;
        let next = dom.project(&(&x - &fy * lr))?;
        let step = (&y - &x).norm();
        sum_sq += step * step;
        x = next;
        let metric = if every > 0 && k % every == 0 { observer.metric(k, &x) } else { None };
        let c = oracle.counts();
        records.push(IterRecord {
            k,
            lambda: lr,
            step_norm: step,
            op_evals: c.evals - base.evals,
            jvp_evals: c.jvps - base.jvps,
            wall_s: start.elapsed().as_secs_f64(),
            metric,
            sum_sq_steps: sum_sq,
            inner_iters: 0,
        });
    }
    let final_metric = observer.metric(records.len(), &x);
    let trace = Trace {
        records,
        mode: OutputMode::Last,
        output: x.clone(),
        dual: Vector::zeros(x.len()),
        stationary,
        iterates: None,
        final_metric,
    };
    Ok((x, trace))
}

/// First-order baseline: zero Jacobian with `delta = l0`, which bounds
/// `|grad F - 0|` for an `l0`-Lipschitz operator. Runs the min-max variant
/// on the full space.
pub fn perseus1_run(
    oracle: &Oracle,
    dom: &Domain,
    cfg: &SolverConfig,
    l0: f64,
    observer: &mut dyn Observer,
) -> Result<(Vector, Trace)> {
    if !(l0 > 0.0) {
        return Err(Error::InvalidArgument(format!("L0 must be positive, got {l0}")));
    }
    let cfg = SolverConfig {
        delta: l0,
        delta_mode: DeltaMode::Fixed,
        ..cfg.clone()
    };
    if dom.is_bounded() {
        viji_run(oracle, dom, &cfg, &JacobianProvider::Zero, observer)
    } else {
        viji_minmax_run(oracle, &cfg, &JacobianProvider::Zero, observer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::gap_affine_ball;
    use crate::operators::{make_affine, FnOperator};
    use crate::solve::NoObserver;
    use nalgebra::DMatrix;

    #[test]
    fn zero_operator_is_stationary() {
        let oracle = Oracle::new(FnOperator::new(3, |x: &Vector| Vector::zeros(x.len())));
        let dom = Domain::centered_ball(3, 1.0).unwrap();
        let x0 = Vector::from_column_slice(&[0.1, 0.2, 0.3]);
        let (out, trace) = extragradient_run(&oracle, &dom, 0.5, 10, Some(&x0), &mut NoObserver).unwrap();
        assert_eq!(out, x0);
        assert!(trace.stationary);
        let cfg = SolverConfig::default();
        let (out, trace) = perseus1_run(&oracle, &dom, &cfg, 1.0, &mut NoObserver).unwrap();
        assert_eq!(out, Vector::zeros(3));
        assert!(trace.stationary);
    }

    #[test]
    fn counts_two_evals_per_iteration() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let oracle = make_affine(m, Vector::from_column_slice(&[0.5, -0.2])).unwrap();
        let dom = Domain::centered_ball(2, 1.0).unwrap();
        let (_, trace) = extragradient_run(&oracle, &dom, 0.3, 37, None, &mut NoObserver).unwrap();
        assert_eq!(oracle.counts().evals, 74);
        assert_eq!(trace.records.last().unwrap().op_evals, 74);
    }

    struct GapObserver {
        m: DMatrix<f64>,
        q: Vector,
        dom: Domain,
        gaps: Vec<f64>,
    }

    impl Observer for GapObserver {
        fn sample_every(&self) -> usize {
            1
        }

        fn metric(&mut self, _k: usize, x: &Vector) -> Option<f64> {
            let g = gap_affine_ball(&self.m, &self.q, &self.dom, x).unwrap().gap;
            self.gaps.push(g);
            Some(g)
        }
    }

    #[test]
    fn skew_gap_decreases() {
        // skew M, q = 0: x* = 0 and the gap is |x| |M x| type, decreasing under EG
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, -0.5, -1.0, 0.0, 0.3, 0.5, -0.3, 0.0]);
        let q = Vector::zeros(3);
        let oracle = make_affine(m.clone(), q.clone()).unwrap();
        let dom = Domain::centered_ball(3, 1.0).unwrap();
        let lr = 0.5 / crate::linalg::op_norm(&m);
        let mut obs = GapObserver {
            m,
            q,
            dom: dom.clone(),
            gaps: Vec::new(),
        };
        let x0 = Vector::from_column_slice(&[0.6, -0.3, 0.2]);
        extragradient_run(&oracle, &dom, lr, 50, Some(&x0), &mut obs).unwrap();
        let gaps = &obs.gaps[..50];
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} > {}", w[1], w[0]);
        }
        assert!(gaps[49] < 0.5 * gaps[0]);
    }
}
