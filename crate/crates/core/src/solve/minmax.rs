use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::jacobian::JacobianApprox;
use crate::model::ModelParams;
use crate::operators::Oracle;
use crate::subsolve::minmax_solve;

use super::{dual_loop, Acceptance, Anchor, JacobianProvider, LambdaRule, Observer, ProviderState, SolverConfig, Step, Trace};

/// Unconstrained variant: `v = z0 + s`, the subproblem is solved to the
/// residual criterion, and the step size uses the `[1/16, 1/12]` bracket
/// against `L |z - v| + delta`.
pub fn viji_minmax_run(
    oracle: &Oracle,
    cfg: &SolverConfig,
    provider: &JacobianProvider,
    observer: &mut dyn Observer,
) -> Result<(Vector, Trace)> {
    let d = oracle.dim();
    let z0 = cfg.start(&Domain::full(d))?;
    let mut state = ProviderState::new(provider.clone(), d, cfg.seed)?;
    dual_loop(oracle, Anchor::Free, &z0, cfg, LambdaRule::MinMax, observer, |k, v, fv, obs| {
        state.observe(v, fv, false);
        let jac = state.build(oracle, v, k, 0)?;
        let delta = state.delta(cfg, oracle, v, &jac)?;
        let mut mp = ModelParams::new(v.clone(), fv.clone(), jac, cfg.eta, delta, cfg.lip)?;
        let out = match minmax_solve(&mp, cfg.tau_tol, cfg.refine_budget) {
            // a badly conditioned factored form is retried through its dense materialisation
            Err(Error::IllConditioned(_)) if matches!(mp.jac, JacobianApprox::LowRank(_)) => {
                mp.jac = JacobianApprox::dense(mp.jac.to_dense());
                minmax_solve(&mp, cfg.tau_tol, cfg.refine_budget)?
            }
            r => r?,
        };
        obs.accepted(
            k,
            &Acceptance::MinMax {
                model: &mp,
                z: &out.z,
                lhs: out.lhs,
                rhs: out.rhs,
                tau_tol: cfg.tau_tol,
            },
        );
        let fz = oracle.eval(&out.z)?;
        state.observe(&out.z, &fz, true);
        let r = (&out.z - v).norm();
        Ok(Step {
            x: out.z,
            fx: fz,
            denom: cfg.lip * r + delta,
            inner: out.solves,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobian::{PairStrategy, Update};
    use crate::operators::CubicBilinear;
    use crate::solve::NoObserver;

    #[test]
    fn saddle_start_is_stationary() {
        let op = CubicBilinear::new(2, 1e-3).unwrap();
        let z = op.saddle_point();
        let oracle = Oracle::new(op.clone());
        let cfg = SolverConfig {
            x0: Some(z.iter().copied().collect()),
            iters: 10,
            lip: 1e-3,
            delta: 0.2,
            ..Default::default()
        };
        let (out, trace) = viji_minmax_run(&oracle, &cfg, &JacobianProvider::Zero, &mut NoObserver).unwrap();
        assert!(trace.stationary);
        assert!(op.restricted_gap(&out, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn damped_broyden_reduces_gap() {
        let op = CubicBilinear::new(5, 1e-2).unwrap();
        let oracle = Oracle::new(op.clone());
        let cfg = SolverConfig {
            iters: 300,
            lip: 1e-2,
            delta: 0.22,
            opt: crate::solve::OutputMode::Last,
            ..Default::default()
        };
        let provider = JacobianProvider::Broyden {
            update: Update::Damped,
            strategy: PairStrategy::History,
            memory: 4,
            j0: 0.22,
            history: Default::default(),
        };
        let (out, trace) = viji_minmax_run(&oracle, &cfg, &provider, &mut NoObserver).unwrap();
        let g0 = op.restricted_gap(&Vector::zeros(10), 1.0).unwrap();
        let g = op.restricted_gap(&out, 1.0).unwrap();
        assert!(g < 0.5 * g0, "{g} vs {g0}");
        // two operator calls per iteration
        assert_eq!(trace.records.last().unwrap().op_evals, 600);
    }
}
