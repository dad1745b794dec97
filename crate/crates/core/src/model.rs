//! The regularised inexact model around an anchor `v`:
//!
//! `Omega(x) = F(v) + J (x - v) + eta delta (x - v) + 5 L |x - v| (x - v)`
//!
//! and its order-`p` generalisation built from higher derivative
//! contractions.

use crate::domain::Vector;
use crate::error::{check_dim, Error, Result};
use crate::jacobian::JacobianApprox;
use crate::linalg::{min_eigenvalue, sym_part};
use crate::operators::Oracle;

/// Everything a subproblem solver needs to know about the model.
pub trait Model {
    fn anchor(&self) -> &Vector;

    fn f_anchor(&self) -> &Vector;

    fn eval(&self, x: &Vector) -> Result<Vector>;

    /// Right-hand side of the acceptance condition at step length `r`.
    fn condition_rhs(&self, r: f64) -> f64;

    /// Step-size denominator at step length `r`.
    fn lambda_denominator(&self, r: f64) -> f64;

    /// Lipschitz constant of the model on `|x - v| <= radius`, if cheaply known.
    fn lipschitz_bound(&self, radius: f64) -> Option<f64>;
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub anchor: Vector,
    pub f_anchor: Vector,
    pub jac: JacobianApprox,
    pub eta: f64,
    pub delta: f64,
    pub lip: f64,
}

fn check_constants(eta: f64, delta: f64, lip: f64) -> Result<()> {
    if !(eta >= 1.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("eta must be at least 1, got {eta}")));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be nonnegative, got {delta}")));
    }
    if !(lip >= 0.0 && lip.is_finite()) {
        return Err(Error::InvalidArgument(format!("L must be nonnegative, got {lip}")));
    }
    Ok(())
}

impl ModelParams {
    pub fn new(anchor: Vector, f_anchor: Vector, jac: JacobianApprox, eta: f64, delta: f64, lip: f64) -> Result<Self> {
        check_dim(anchor.len(), f_anchor.len())?;
        check_dim(anchor.len(), jac.dim())?;
        check_constants(eta, delta, lip)?;
        Ok(ModelParams {
            anchor,
            f_anchor,
            jac,
            eta,
            delta,
            lip,
        })
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    /// `F(v) + J (x - v)`.
    pub fn psi_eval(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        Ok(&self.f_anchor + self.jac.apply(&(x - &self.anchor))?)
    }

    pub fn omega_eval(&self, x: &Vector) -> Result<Vector> {
        let d = x - &self.anchor;
        let psi = self.psi_eval(x)?;
        Ok(psi + &d * self.shift(d.norm()))
    }

    /// Scalar shift `eta delta + 5 L tau` of the regularised system.
    pub fn shift(&self, tau: f64) -> f64 {
        self.eta * self.delta + 5.0 * self.lip * tau
    }

    /// `lambda_min(sym(grad Omega(x)) - B)` where `B` is the lower-bound matrix
    /// `4 L r I + 5 L d d^T / r + (eta - 1) delta I`, `d = x - v`, `r = |d|`.
    /// The rank-one parts cancel, leaving `sym(J) + (delta + L r) I`.
    pub fn monotonicity_margin(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let r = (x - &self.anchor).norm();
        let s = sym_part(&self.jac.to_dense());
        Ok(min_eigenvalue(&s) + self.delta + self.lip * r)
    }
}

impl Model for ModelParams {
    fn anchor(&self) -> &Vector {
        &self.anchor
    }

    fn f_anchor(&self) -> &Vector {
        &self.f_anchor
    }

    fn eval(&self, x: &Vector) -> Result<Vector> {
        self.omega_eval(x)
    }

    fn condition_rhs(&self, r: f64) -> f64 {
        0.5 * self.lip * r.powi(3) + self.delta * r * r
    }

    fn lambda_denominator(&self, r: f64) -> f64 {
        0.5 * self.lip * r + self.delta
    }

    fn lipschitz_bound(&self, radius: f64) -> Option<f64> {
        Some(self.jac.norm_bound() + self.eta * self.delta + 10.0 * self.lip * radius)
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Order-`p` model:
///
/// `Omega_p(x) = F(v) + sum_{i<p} G_i[d]^i / i! + sum_{i<p} eta_i delta_i / i! |d|^{i-1} d
///              + 5 L / (p-1)! |d|^{p-1} d`.
///
/// `G_1` comes from the supplied Jacobian approximation when present, the
/// higher terms from exact contractions of the oracle.
#[derive(Debug)]
pub struct TensorModel<'a> {
    pub anchor: Vector,
    pub f_anchor: Vector,
    pub oracle: &'a Oracle,
    pub order: usize,
    /// `delta_i`, `i = 1..p-1`.
    pub deltas: Vec<f64>,
    /// `eta_i`, `i = 1..p-1`.
    pub etas: Vec<f64>,
    pub lip: f64,
    pub jac: Option<JacobianApprox>,
}

impl<'a> TensorModel<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        anchor: Vector,
        f_anchor: Vector,
        oracle: &'a Oracle,
        order: usize,
        deltas: Vec<f64>,
        etas: Vec<f64>,
        lip: f64,
        jac: Option<JacobianApprox>,
    ) -> Result<Self> {
        if order < 2 {
            return Err(Error::InvalidArgument(format!("model order must be at least 2, got {order}")));
        }
        check_dim(oracle.dim(), anchor.len())?;
        check_dim(anchor.len(), f_anchor.len())?;
        if deltas.len() != order - 1 || etas.len() != order - 1 {
            return Err(Error::InvalidArgument(format!(
                "order {order} needs {} inexactness levels and weights",
                order - 1
            )));
        }
        for (&e, &dl) in etas.iter().zip(&deltas) {
            check_constants(e, dl, lip)?;
        }
        let needed = if jac.is_some() && order == 2 { 0 } else { order - 1 };
        if oracle.max_order() < needed {
            return Err(Error::Unsupported("higher-order derivative contractions"));
        }
        if let Some(j) = &jac {
            check_dim(anchor.len(), j.dim())?;
        }
        Ok(TensorModel {
            anchor,
            f_anchor,
            oracle,
            order,
            deltas,
            etas,
            lip,
            jac,
        })
    }

    /// `F(v) + sum_{i<p} G_i[d]^i / i!`.
    pub fn psi_eval(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.anchor.len(), x.len())?;
        let d = x - &self.anchor;
        let mut out = self.f_anchor.clone();
        for i in 1..self.order {
            let term = match (i, &self.jac) {
                (1, Some(j)) => j.apply(&d)?,
                _ => self.oracle.contraction(i, &self.anchor, &d)?,
            };
            out += term / factorial(i);
        }
        Ok(out)
    }

    pub fn omega_eval(&self, x: &Vector) -> Result<Vector> {
        let d = x - &self.anchor;
        let r = d.norm();
        let mut coef = 5.0 * self.lip / factorial(self.order - 1) * r.powi(self.order as i32 - 1);
        for i in 1..self.order {
            coef += self.etas[i - 1] * self.deltas[i - 1] / factorial(i) * r.powi(i as i32 - 1);
        }
        Ok(self.psi_eval(x)? + d * coef)
    }
}

impl Model for TensorModel<'_> {
    fn anchor(&self) -> &Vector {
        &self.anchor
    }

    fn f_anchor(&self) -> &Vector {
        &self.f_anchor
    }

    fn eval(&self, x: &Vector) -> Result<Vector> {
        self.omega_eval(x)
    }

    fn condition_rhs(&self, r: f64) -> f64 {
        let p = self.order;
        let mut rhs = self.lip / factorial(p) * r.powi(p as i32 + 1);
        for i in 1..p {
            rhs += self.deltas[i - 1] / factorial(i) * r.powi(i as i32 + 1);
        }
        rhs
    }

    fn lambda_denominator(&self, r: f64) -> f64 {
        let p = self.order;
        let mut den = self.lip / factorial(p) * r.powi(p as i32 - 1);
        for i in 1..p {
            den += self.deltas[i - 1] / factorial(i) * r.powi(i as i32 - 1);
        }
        den
    }

    fn lipschitz_bound(&self, radius: f64) -> Option<f64> {
        if self.order != 2 {
            return None;
        }
        let jn = match &self.jac {
            Some(j) => j.norm_bound(),
            None => return None,
        };
        Some(jn + self.etas[0] * self.deltas[0] + 10.0 * self.lip * radius)
    }
}
