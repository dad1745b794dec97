use serde::{Deserialize, Serialize};

use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, TensorModel};
use crate::operators::Oracle;

use super::viji::solve_bounded;
use super::{dual_loop, Acceptance, Anchor, JacobianProvider, LambdaRule, Observer, ProviderState, SolverConfig, Step, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorConfig {
    pub order: usize,
    /// `delta_i` for `i = 1..p-1`.
    pub deltas: Vec<f64>,
    /// `eta_i` for `i = 1..p-1`; empty means `5p` each.
    #[serde(default)]
    pub etas: Vec<f64>,
}

impl TensorConfig {
    pub fn exact(order: usize) -> Self {
        TensorConfig {
            order,
            deltas: vec![0.0; order.saturating_sub(1)],
            etas: Vec::new(),
        }
    }

    fn etas(&self) -> Vec<f64> {
        if self.etas.is_empty() {
            vec![5.0 * self.order as f64; self.order.saturating_sub(1)]
        } else {
            self.etas.clone()
        }
    }
}

/// `2^{p-1} p^{(p-1)/2} (20p - 8) / p!`, the constant of the order-`p` rate
/// `gap <= C L_{p-1} D^{p+1} / T^{(p+1)/2}`.
pub fn tensor_output_bound_coefficient(p: usize) -> f64 {
    let pf = p as f64;
    let fact: f64 = (1..=p).map(|k| k as f64).product();
    2f64.powi(p as i32 - 1) * pf.powf((pf - 1.0) / 2.0) * (20.0 * pf - 8.0) / fact
}

/// Order-`p` method. `cfg.lip` is `L_{p-1}`; the first derivative comes from
/// `provider`, higher ones from the oracle's exact contractions.
pub fn vihi_run(
    oracle: &Oracle,
    dom: &Domain,
    cfg: &SolverConfig,
    tensor: &TensorConfig,
    provider: &JacobianProvider,
    observer: &mut dyn Observer,
) -> Result<(Vector, Trace)> {
    let p = tensor.order;
    if p < 2 {
        return Err(Error::InvalidArgument(format!("order must be at least 2, got {p}")));
    }
    if !dom.is_bounded() {
        return Err(Error::UnboundedDomain);
    }
    if oracle.max_order() < p - 1 {
        return Err(Error::Unsupported("higher-order derivative contractions"));
    }
    let etas = tensor.etas();
    let x0 = cfg.start(dom)?;
    let tau_max = dom.diameter()?;
    let state = ProviderState::new(provider.clone(), oracle.dim(), cfg.seed)?;
    dual_loop(oracle, Anchor::Dual(dom), &x0, cfg, LambdaRule::Tensor { p }, observer, |k, v, fv, obs| {
        let jac = state.build(oracle, v, k, 0)?;
        let model = TensorModel::new(
            v.clone(),
            fv.clone(),
            oracle,
            p,
            tensor.deltas.clone(),
            etas.clone(),
            cfg.lip,
            Some(jac.clone()),
        )?;
        // the order-2 model is the first-order model; reuse its ray search
        let ray = if p == 2 {
            Some(ModelParams::new(v.clone(), fv.clone(), jac, etas[0], tensor.deltas[0], cfg.lip)?)
        } else {
            None
        };
        let out = solve_bounded(&model, ray.as_ref(), dom, cfg, tau_max)?;
        obs.accepted(
            k,
            &Acceptance::Condition {
                model: &model,
                params: ray.as_ref(),
                dom,
                x: &out.x,
                check: out.check,
            },
        );
        let fx = oracle.eval(&out.x)?;
        let r = (&out.x - v).norm();
        Ok(Step {
            denom: model.lambda_denominator(r),
            x: out.x,
            fx,
            inner: out.iters,
        })
    })
}
