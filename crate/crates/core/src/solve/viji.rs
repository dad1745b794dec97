use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::operators::Oracle;
use crate::subsolve::{
    default_eps, extragradient_subsolve, ray_search_solve, verify_condition, RayParams, SubsolveOutcome,
};

use super::{dual_loop, Acceptance, Anchor, BetaMode, JacobianProvider, LambdaRule, Observer, ProviderState, SolverConfig, Step, Trace};

/// Dual extrapolation with an inexact-Jacobian model on a bounded domain.
pub fn viji_run(
    oracle: &Oracle,
    dom: &Domain,
    cfg: &SolverConfig,
    provider: &JacobianProvider,
    observer: &mut dyn Observer,
) -> Result<(Vector, Trace)> {
    if !dom.is_bounded() {
        return Err(Error::UnboundedDomain);
    }
    crate::error::check_dim(dom.dim(), oracle.dim())?;
    let x0 = cfg.start(dom)?;
    let tau_max = dom.diameter()?;
    let mut state = ProviderState::new(provider.clone(), oracle.dim(), cfg.seed)?;
    let retry = cfg.retry_rebuild && matches!(provider, JacobianProvider::Broyden { .. });
    dual_loop(oracle, Anchor::Dual(dom), &x0, cfg, LambdaRule::Viji, observer, |k, v, fv, obs| {
        state.observe(v, fv, false);
        let mut attempt = 0;
        loop {
            let jac = state.build(oracle, v, k, attempt)?;
            let delta = state.delta(cfg, oracle, v, &jac)?;
            let mp = ModelParams::new(v.clone(), fv.clone(), jac, cfg.eta, delta, cfg.lip)?;
            let out = solve_bounded(&mp, Some(&mp), dom, cfg, tau_max)?;
            let d = &out.x - v;
            let r = d.norm();
            let beta = match cfg.beta_mode {
                BetaMode::ConstantDelta => delta,
                BetaMode::ExactMode => {
                    let lhs = (oracle.jvp(v, &d)? - mp.jac.apply(&d)?).norm();
                    let rhs = 0.5 * cfg.lip * r * r;
                    if lhs > rhs * (1.0 + 1e-10) + 1e-14 {
                        if retry && attempt == 0 {
                            attempt = 1;
                            continue;
                        }
                        return Err(Error::InexactnessViolation { lhs, rhs });
                    }
                    0.5 * cfg.lip * r
                }
            };
            obs.accepted(
                k,
                &Acceptance::Condition {
                    model: &mp,
                    params: Some(&mp),
                    dom,
                    x: &out.x,
                    check: out.check,
                },
            );
            let fx = oracle.eval(&out.x)?;
            state.observe(&out.x, &fx, true);
            return Ok(Step {
                x: out.x,
                fx,
                denom: 0.5 * cfg.lip * r + beta,
                inner: out.iters,
            });
        }
    })
}

/// Ray search (when `ray` is given and enabled) verified against `model`,
/// falling back to extragradient warm-started from the ray-search point.
pub(crate) fn solve_bounded(
    model: &dyn Model,
    ray: Option<&ModelParams>,
    dom: &Domain,
    cfg: &SolverConfig,
    tau_max: f64,
) -> Result<SubsolveOutcome> {
    let mut warm = None;
    let mut spent = 0;
    if let (true, Some(mp)) = (cfg.ray_search, ray) {
        let params = RayParams {
            eta: mp.eta,
            delta: mp.delta,
            lip: mp.lip,
            eps: cfg.ray_eps.unwrap_or_else(|| default_eps(tau_max)),
            tau_max,
        };
        match ray_search_solve(&mp.f_anchor, &mp.jac, params, dom, &mp.anchor) {
            Ok(out) => {
                spent = out.solves;
                let check = verify_condition(model, dom, &out.y)?;
                if check.ok {
                    return Ok(SubsolveOutcome {
                        x: out.y,
                        check,
                        iters: out.solves,
                    });
                }
                warm = Some(out.y);
            }
            Err(Error::IllConditioned(_) | Error::BisectionBudget { .. } | Error::NoSignChange { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let mut out = extragradient_subsolve(model, dom, cfg.eg_options(), warm.as_ref())?;
    out.iters += spent;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobian::{PairStrategy, Update};
    use crate::operators::make_affine;
    use crate::solve::{NoObserver, OutputMode};
    use nalgebra::DMatrix;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn skew_affine() -> Oracle {
        let m = DMatrix::from_row_slice(3, 3, &[0.2, 1.0, 0.0, -1.0, 0.2, 0.5, 0.0, -0.5, 0.2]);
        make_affine(m, v(&[0.3, -0.1, 0.2])).unwrap()
    }

    #[test]
    fn fixed_point_start_is_stationary() {
        // F(x0) = 0 with x0 interior
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 1.0]);
        let x0 = v(&[0.2, -0.1]);
        let q = -(&m * &x0);
        let oracle = make_affine(m, q).unwrap();
        let dom = Domain::centered_ball(2, 1.0).unwrap();
        let cfg = SolverConfig {
            x0: Some(vec![0.2, -0.1]),
            iters: 50,
            ..Default::default()
        };
        let (out, trace) = viji_run(&oracle, &dom, &cfg, &JacobianProvider::Exact, &mut NoObserver).unwrap();
        assert!((out - x0).norm() < 1e-15);
        assert!(trace.stationary);
        assert_eq!(trace.iterations(), 0);
    }

    #[test]
    fn unbounded_domain_rejected() {
        let oracle = skew_affine();
        let cfg = SolverConfig::default();
        assert!(matches!(
            viji_run(&oracle, &Domain::full(3), &cfg, &JacobianProvider::Exact, &mut NoObserver),
            Err(Error::UnboundedDomain)
        ));
    }

    #[test]
    fn dual_state_is_reconstructible() {
        let oracle = skew_affine();
        let dom = Domain::centered_ball(3, 1.0).unwrap();
        let cfg = SolverConfig {
            iters: 30,
            delta: 0.05,
            keep_iterates: true,
            ..Default::default()
        };
        let provider = JacobianProvider::Perturbed { delta: 0.05, seed: 3 };
        let (_, trace) = viji_run(&oracle, &dom, &cfg, &provider, &mut NoObserver).unwrap();
        let its = trace.iterates.as_ref().unwrap();
        let mut s = Vector::zeros(3);
        for (rec, it) in trace.records.iter().zip(its) {
            assert!(rec.lambda > 0.0);
            let vk = dom.dual_step(&Vector::zeros(3), &s).unwrap();
            assert!((vk - &it.v).amax() < 1e-15);
            s -= &it.fx * rec.lambda;
        }
        assert!((s - &trace.dual).amax() < 1e-15);
        for w in trace.records.windows(2) {
            assert!(w[1].op_evals >= w[0].op_evals && w[1].jvp_evals >= w[0].jvp_evals);
        }
    }

    #[test]
    fn exact_mode_detects_bad_jacobian() {
        let oracle = skew_affine();
        let dom = Domain::centered_ball(3, 1.0).unwrap();
        let cfg = SolverConfig {
            iters: 5,
            beta_mode: BetaMode::ExactMode,
            lip: 0.01,
            ..Default::default()
        };
        let err = viji_run(&oracle, &dom, &cfg, &JacobianProvider::Perturbed { delta: 0.5, seed: 1 }, &mut NoObserver)
            .unwrap_err();
        match err {
            Error::AtIteration { iter, cause } => {
                assert_eq!(iter, 1);
                assert!(matches!(*cause, Error::InexactnessViolation { .. }));
            }
            e => panic!("unexpected {e}"),
        }
        // exact Jacobian passes the same check
        let ok = viji_run(&oracle, &dom, &cfg, &JacobianProvider::Exact, &mut NoObserver);
        assert!(ok.is_ok());
    }

    #[test]
    fn output_modes_differ_as_expected() {
        let oracle = skew_affine();
        let dom = Domain::centered_ball(3, 1.0).unwrap();
        let mut outs = Vec::new();
        for opt in [OutputMode::Average, OutputMode::Last, OutputMode::MinStep] {
            let cfg = SolverConfig {
                iters: 20,
                opt,
                keep_iterates: true,
                ..Default::default()
            };
            let (out, trace) = viji_run(&oracle, &dom, &cfg, &JacobianProvider::Exact, &mut NoObserver).unwrap();
            let its = trace.iterates.unwrap();
            match opt {
                OutputMode::Last => assert_eq!(out, its.last().unwrap().x),
                OutputMode::MinStep => {
                    let best = trace
                        .records
                        .iter()
                        .zip(&its)
                        .min_by(|a, b| a.0.step_norm.total_cmp(&b.0.step_norm))
                        .unwrap();
                    assert_eq!(out, best.1.x);
                }
                OutputMode::Average => {
                    let w: f64 = trace.records.iter().map(|r| r.lambda).sum();
                    let avg = trace.records.iter().zip(&its).fold(Vector::zeros(3), |acc, (r, it)| acc + &it.x * r.lambda) / w;
                    assert!((&out - avg).amax() < 1e-14);
                }
            }
            outs.push(out);
        }
    }

    #[test]
    fn broyden_history_run_completes() {
        let oracle = skew_affine();
        let dom = Domain::centered_ball(3, 1.0).unwrap();
        let cfg = SolverConfig {
            iters: 40,
            delta: 1.0,
            ..Default::default()
        };
        let provider = JacobianProvider::Broyden {
            update: Update::Damped,
            strategy: PairStrategy::History,
            memory: 2,
            j0: 0.1,
            history: Default::default(),
        };
        let (_, trace) = viji_run(&oracle, &dom, &cfg, &provider, &mut NoObserver).unwrap();
        assert_eq!(trace.iterations(), 40);
        // history pairs need no JVPs
        assert_eq!(trace.records.last().unwrap().jvp_evals, 0);
    }
}
