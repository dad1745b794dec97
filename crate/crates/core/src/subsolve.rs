//! Subproblem solvers for the regularised model.
//!
//! * [`verify_condition`] checks the acceptance condition
//!   `sup_x <Omega(x+), x+ - x> <= rhs(|x+ - v|)` in closed form.
//! * [`extragradient_subsolve`] is a projected extragradient loop that stops
//!   as soon as that condition holds.
//! * [`ray_search_solve`] bisects on the step length `tau`, solving
//!   `(J + (eta delta + 5 L tau) I) d = -F(v)` by shifted solves.
//! * [`minmax_solve`] targets the residual criterion used for unconstrained
//!   saddle problems.

use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::jacobian::JacobianApprox;
use crate::model::{Model, ModelParams};

/// Absolute slack added to the right-hand side of the acceptance check.
pub const CONDITION_SLACK: f64 = 1e-12;

/// Default relative residual target for the ray search: `1e-9 max(1, tau_max)`.
pub fn default_eps(tau_max: f64) -> f64 {
    1e-9 * tau_max.max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionCheck {
    pub ok: bool,
    pub lhs: f64,
    pub rhs: f64,
}

impl ConditionCheck {
    pub fn ratio(&self) -> f64 {
        if self.rhs > 0.0 {
            self.lhs / self.rhs
        } else if self.lhs <= 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

pub fn verify_condition(model: &dyn Model, dom: &Domain, x_next: &Vector) -> Result<ConditionCheck> {
    if !dom.is_bounded() {
        return Err(Error::UnboundedDomain);
    }
    let omega = model.eval(x_next)?;
    check_with(model, dom, x_next, &omega)
}

fn check_with(model: &dyn Model, dom: &Domain, x: &Vector, omega: &Vector) -> Result<ConditionCheck> {
    let lhs = dom.linear_sup(omega, x)?;
    let rhs = model.condition_rhs((x - model.anchor()).norm());
    Ok(ConditionCheck {
        ok: lhs <= rhs + CONDITION_SLACK,
        lhs,
        rhs,
    })
}

#[derive(Debug, Clone)]
pub struct SubsolveOutcome {
    pub x: Vector,
    pub check: ConditionCheck,
    /// Inner iterations (extragradient steps or ray-search solves).
    pub iters: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ExtragradientOptions {
    pub max_iters: usize,
    /// Constant step; `None` picks `1 / (2 Lip)` from the model, or
    /// backtracking when the model has no cheap Lipschitz bound.
    pub step0: Option<f64>,
}

impl Default for ExtragradientOptions {
    fn default() -> Self {
        ExtragradientOptions {
            max_iters: 20_000,
            step0: None,
        }
    }
}

/// Projected extragradient on the model VI, stopping on the acceptance
/// condition. `warm` seeds the starting point (projected onto `dom`).
pub fn extragradient_subsolve(
    model: &dyn Model,
    dom: &Domain,
    opts: ExtragradientOptions,
    warm: Option<&Vector>,
) -> Result<SubsolveOutcome> {
    let diam = dom.diameter()?;
    let v = model.anchor();
    if model.f_anchor().iter().all(|&g| g == 0.0) {
        let check = verify_condition(model, dom, v)?;
        return Ok(SubsolveOutcome {
            x: v.clone(),
            check,
            iters: 0,
        });
    }
    let fixed = opts.step0.or_else(|| model.lipschitz_bound(diam).map(|l| 0.5 / l.max(1e-300)));
    let mut step = fixed.unwrap_or(1.0);
    let mut x = match warm {
        Some(w) => dom.project(w)?,
        None => v.clone(),
    };
    let mut gx = model.eval(&x)?;
    let mut best = f64::INFINITY;
    for it in 0..opts.max_iters {
        let check = check_with(model, dom, &x, &gx)?;
        if check.ok {
            return Ok(SubsolveOutcome { x, check, iters: it });
        }
        best = best.min(check.ratio());
        let (_, gy) = loop {
            let y = dom.project(&(&x - &gx * step))?;
            let gy = model.eval(&y)?;
            if fixed.is_some() {
                break (y, gy);
            }
            // backtracking: step * |Omega(y) - Omega(x)| <= 0.9 |y - x|
            let dy = (&y - &x).norm();
            if step * (&gy - &gx).norm() <= 0.9 * dy || dy == 0.0 || step < 1e-16 {
                break (y, gy);
            }
            step *= 0.5;
        };
        x = dom.project(&(&x - &gy * step))?;
        gx = model.eval(&x)?;
    }
    let check = check_with(model, dom, &x, &gx)?;
    if check.ok {
        return Ok(SubsolveOutcome {
            x,
            check,
            iters: opts.max_iters,
        });
    }
    Err(Error::MaxIters {
        iters: opts.max_iters,
        best_ratio: best.min(check.ratio()),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RayParams {
    pub eta: f64,
    pub delta: f64,
    pub lip: f64,
    pub eps: f64,
    pub tau_max: f64,
}

#[derive(Debug, Clone)]
pub struct RaySearchOutcome {
    pub y: Vector,
    pub tau: f64,
    /// `|tau - |y - v||` at the accepted tau.
    pub upsilon: f64,
    /// Shifted-solve calls performed.
    pub solves: usize,
    /// Final upper end of the bracket (after any doubling).
    pub tau_hi: f64,
    pub converged: bool,
}

/// Upper bound on the ray-search root for `sym(J) >= 0` on the full space:
/// `tau <= min(|g| / (eta delta), sqrt(|g| / (5 L)))`, with a small margin.
pub fn unbounded_tau_max(g: &Vector, eta: f64, delta: f64, lip: f64) -> f64 {
    let gn = g.norm();
    let a = if eta * delta > 0.0 { gn / (eta * delta) } else { f64::INFINITY };
    let b = if lip > 0.0 { (gn / (5.0 * lip)).sqrt() } else { f64::INFINITY };
    let t = a.min(b);
    if t.is_finite() && t > 0.0 {
        1.01 * t
    } else {
        1.0
    }
}

/// Bisection on `phi(tau) = tau - |y_tau - v|`, with
/// `y_tau = project(v - (J + (eta delta + 5 L tau) I)^{-1} g)`.
pub fn ray_search_solve(
    g: &Vector,
    jac: &JacobianApprox,
    params: RayParams,
    dom: &Domain,
    v: &Vector,
) -> Result<RaySearchOutcome> {
    let out = ray_search_core(g, jac, params, dom, v)?;
    if out.converged {
        Ok(out)
    } else {
        let iters = out.solves;
        Err(Error::BisectionBudget {
            iters,
            upsilon: out.upsilon,
            eps: params.eps,
        })
    }
}

fn bisection_budget(hi: f64, eps: f64) -> usize {
    (hi / eps).log2().ceil().max(0.0) as usize + 1
}

fn ray_search_core(
    g: &Vector,
    jac: &JacobianApprox,
    p: RayParams,
    dom: &Domain,
    v: &Vector,
) -> Result<RaySearchOutcome> {
    if !(p.eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", p.eps)));
    }
    if !(p.tau_max > 0.0) {
        return Err(Error::InvalidArgument(format!("tau_max must be positive, got {}", p.tau_max)));
    }
    if g.iter().all(|&x| x == 0.0) {
        return Ok(RaySearchOutcome {
            y: v.clone(),
            tau: 0.0,
            upsilon: 0.0,
            solves: 0,
            tau_hi: p.tau_max,
            converged: true,
        });
    }
    let solves = std::cell::Cell::new(0usize);
    let point = |tau: f64| -> Result<(Vector, f64)> {
        solves.set(solves.get() + 1);
        let d = jac.solve_shifted(p.eta * p.delta + 5.0 * p.lip * tau, g)?;
        let y = dom.project(&(v - d))?;
        let phi = tau - (&y - v).norm();
        Ok((y, phi))
    };
    let mut hi = p.tau_max;
    let (mut y_hi, mut phi_hi) = point(hi)?;
    let mut doublings = 0;
    while phi_hi < -p.eps {
        if dom.is_bounded() || doublings == 8 {
            return Err(Error::NoSignChange { tau_max: hi });
        }
        hi *= 2.0;
        doublings += 1;
        (y_hi, phi_hi) = point(hi)?;
    }
    if phi_hi.abs() <= p.eps {
        return Ok(RaySearchOutcome {
            y: y_hi,
            tau: hi,
            upsilon: phi_hi.abs(),
            solves: solves.get(),
            tau_hi: hi,
            converged: true,
        });
    }
    let tau_hi = hi;
    let mut lo = 0.0;
    let mut best = (y_hi, hi, phi_hi.abs());
    let budget = bisection_budget(hi, p.eps);
    for _ in 0..budget {
        let mid = 0.5 * (lo + hi);
        let (y, phi) = point(mid)?;
        if phi.abs() < best.2 {
            best = (y.clone(), mid, phi.abs());
        }
        if phi.abs() <= p.eps {
            return Ok(RaySearchOutcome {
                y,
                tau: mid,
                upsilon: phi.abs(),
                solves: solves.get(),
                tau_hi,
                converged: true,
            });
        }
        if phi > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(RaySearchOutcome {
        y: best.0,
        tau: best.1,
        upsilon: best.2,
        solves: solves.get(),
        tau_hi,
        converged: false,
    })
}

#[derive(Debug, Clone)]
pub struct MinmaxOutcome {
    pub z: Vector,
    /// `|Omega(z)|`.
    pub lhs: f64,
    /// `tau_tol * min{L/2 r^2 + delta r, |F(v)|}`.
    pub rhs: f64,
    pub solves: usize,
    pub refinements: usize,
}

/// Right-hand side of the min-max residual criterion.
pub fn minmax_rhs(mp: &ModelParams, z: &Vector, tau_tol: f64) -> f64 {
    let r = (z - &mp.anchor).norm();
    tau_tol * (0.5 * mp.lip * r * r + mp.delta * r).min(mp.f_anchor.norm())
}

/// Ray search followed by damped fixed-point refinement of `tau` until
/// `|Omega(z)| <= tau_tol min{L/2 |z-v|^2 + delta |z-v|, |F(v)|}`.
pub fn minmax_solve(mp: &ModelParams, tau_tol: f64, refine_budget: usize) -> Result<MinmaxOutcome> {
    if !(tau_tol > 0.0 && tau_tol < 1.0) {
        return Err(Error::InvalidArgument(format!("tau_tol must lie in (0, 1), got {tau_tol}")));
    }
    let v = &mp.anchor;
    let g = &mp.f_anchor;
    if g.iter().all(|&x| x == 0.0) {
        return Ok(MinmaxOutcome {
            z: v.clone(),
            lhs: 0.0,
            rhs: 0.0,
            solves: 0,
            refinements: 0,
        });
    }
    let dom = Domain::full(mp.dim());
    let tau_max = unbounded_tau_max(g, mp.eta, mp.delta, mp.lip);
    let params = RayParams {
        eta: mp.eta,
        delta: mp.delta,
        lip: mp.lip,
        eps: default_eps(tau_max),
        tau_max,
    };
    let ray = ray_search_core(g, &mp.jac, params, &dom, v)?;
    let mut solves = ray.solves;
    let mut z = ray.y;
    let mut tau = ray.tau;
    let mut ratio = f64::INFINITY;
    for k in 0..=refine_budget {
        let lhs = mp.omega_eval(&z)?.norm();
        let rhs = minmax_rhs(mp, &z, tau_tol);
        if lhs <= rhs {
            return Ok(MinmaxOutcome {
                z,
                lhs,
                rhs,
                solves,
                refinements: k,
            });
        }
        ratio = if rhs > 0.0 { lhs / rhs } else { f64::INFINITY };
        if k == refine_budget {
            break;
        }
        tau = 0.5 * (tau + (&z - v).norm());
        z = v - mp.jac.solve_shifted(mp.shift(tau), g)?;
        solves += 1;
    }
    Err(Error::RefineBudget {
        budget: refine_budget,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobian::{broyden_build, pairs_from_jvp, Update};
    use crate::operators::{make_affine, CubicBilinear, Oracle};
    use crate::rng;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn ball(d: usize) -> Domain {
        Domain::centered_ball(d, 1.0).unwrap()
    }

    #[test]
    fn stationary_anchor_passes() {
        let mp = ModelParams::new(v(&[0.2, 0.1]), Vector::zeros(2), JacobianApprox::Zero { dim: 2 }, 10.0, 0.0, 1.0).unwrap();
        let c = verify_condition(&mp, &ball(2), &v(&[0.2, 0.1])).unwrap();
        assert!(c.ok);
        assert_eq!(c.lhs, 0.0);
        assert_eq!(c.rhs, 0.0);
        let out = extragradient_subsolve(&mp, &ball(2), ExtragradientOptions::default(), None).unwrap();
        assert_eq!(out.x, v(&[0.2, 0.1]));
        assert_eq!(out.iters, 0);
    }

    #[test]
    fn unbounded_check_rejected() {
        let mp = ModelParams::new(v(&[0.0]), v(&[1.0]), JacobianApprox::Zero { dim: 1 }, 10.0, 0.1, 1.0).unwrap();
        assert!(matches!(
            verify_condition(&mp, &Domain::full(1), &v(&[0.0])),
            Err(Error::UnboundedDomain)
        ));
    }

    #[test]
    fn scalar_condition_against_grid() {
        // d = 1 on [-1, 1]: sup_x <w, x+ - x> by brute force over 1e5 points
        let mp = ModelParams::new(v(&[0.1]), v(&[0.8]), JacobianApprox::dense(DMatrix::from_element(1, 1, 0.5)), 10.0, 0.05, 1.0)
            .unwrap();
        let dom = ball(1);
        for &xn in &[-0.9, -0.3, 0.0, 0.05, 0.4, 1.0] {
            let x = v(&[xn]);
            let c = verify_condition(&mp, &dom, &x).unwrap();
            let w = mp.omega_eval(&x).unwrap()[0];
            let n = 100_000;
            let grid = (0..=n)
                .map(|i| -1.0 + 2.0 * i as f64 / n as f64)
                .map(|u| w * (xn - u))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((grid - c.lhs).abs() < 1e-9, "{grid} vs {}", c.lhs);
            let r = (xn - 0.1f64).abs();
            assert!((c.rhs - (0.5 * r.powi(3) + 0.05 * r * r)).abs() < 1e-15);
        }
    }

    fn affine_model(d: usize, seed: u64) -> (ModelParams, DMatrix<f64>) {
        let mut r = rng::seeded(seed);
        let a = DMatrix::from_fn(d, d, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r));
        let m = a.transpose() * &a * 0.05 + (&a - a.transpose()) * 0.5;
        let q = rng::gaussian(d, &mut r);
        let oracle = make_affine(m.clone(), q).unwrap();
        let anchor = rng::in_ball(d, 0.5, &mut r);
        let f = oracle.eval(&anchor).unwrap();
        (ModelParams::new(anchor, f, JacobianApprox::dense(m.clone()), 10.0, 0.0, 1.0).unwrap(), m)
    }

    #[test]
    fn extragradient_meets_condition_affine_ball() {
        for seed in 0..5 {
            let (mp, _) = affine_model(5, seed);
            let dom = ball(5);
            let out = extragradient_subsolve(&mp, &dom, ExtragradientOptions { max_iters: 500, step0: None }, None).unwrap();
            assert!(out.iters <= 500);
            let again = verify_condition(&mp, &dom, &out.x).unwrap();
            assert!(again.ok);
            assert!(dom.contains(&out.x, 1e-12));
        }
    }

    #[test]
    fn extragradient_budget_error_carries_ratio() {
        let (mp, _) = affine_model(5, 3);
        let err = extragradient_subsolve(&mp, &ball(5), ExtragradientOptions { max_iters: 1, step0: Some(1e-6) }, None).unwrap_err();
        match err {
            Error::MaxIters { iters, best_ratio } => {
                assert_eq!(iters, 1);
                assert!(best_ratio > 1.0);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ray_search_scalar_quadratic_root() {
        // 7 = (2 + 5 tau) tau
        let jac = JacobianApprox::dense(DMatrix::from_element(1, 1, 2.0));
        let params = RayParams {
            eta: 10.0,
            delta: 0.0,
            lip: 1.0,
            eps: 1e-12,
            tau_max: 4.0,
        };
        let out = ray_search_solve(&v(&[7.0]), &jac, params, &Domain::full(1), &v(&[0.0])).unwrap();
        let root = (-2.0 + (4.0f64 + 4.0 * 5.0 * 7.0).sqrt()) / 10.0;
        assert!((out.tau - root).abs() < 1e-10, "{} vs {root}", out.tau);
        assert!((out.y[0] + root).abs() < 1e-10);
    }

    #[test]
    fn ray_search_zero_gradient_is_anchor() {
        let jac = JacobianApprox::Zero { dim: 3 };
        let p = RayParams {
            eta: 10.0,
            delta: 0.1,
            lip: 1.0,
            eps: 1e-9,
            tau_max: 2.0,
        };
        let out = ray_search_solve(&Vector::zeros(3), &jac, p, &ball(3), &v(&[0.1, 0.2, 0.3])).unwrap();
        assert_eq!(out.y, v(&[0.1, 0.2, 0.3]));
        assert_eq!(out.tau, 0.0);
    }

    #[test]
    fn ray_search_call_budget() {
        let jac = JacobianApprox::LowRank(crate::jacobian::LowRankJacobian::diagonal(Vector::from_element(4, 0.3)));
        let p = RayParams {
            eta: 10.0,
            delta: 0.01,
            lip: 1.0,
            eps: 1e-10,
            tau_max: 1.0,
        };
        let dom = Domain::centered_ball(4, 0.5).unwrap();
        let out = ray_search_solve(&v(&[0.3, -0.2, 0.1, 0.05]), &jac, p, &dom, &Vector::zeros(4)).unwrap();
        assert!(out.solves <= 36, "{}", out.solves);
        assert!(out.upsilon <= 1e-10);
    }

    #[test]
    fn ray_search_small_bracket_on_bounded_domain() {
        let jac = JacobianApprox::Zero { dim: 1 };
        let p = RayParams {
            eta: 1.0,
            delta: 0.0,
            lip: 1.0,
            eps: 1e-12,
            tau_max: 1e-3,
        };
        assert!(matches!(
            ray_search_solve(&v(&[1.0]), &jac, p, &Domain::ball(v(&[0.0]), 5.0).unwrap(), &v(&[0.0])),
            Err(Error::NoSignChange { .. })
        ));
    }

    #[test]
    fn minmax_zero_gradient() {
        let mp = ModelParams::new(v(&[1.0, 2.0]), Vector::zeros(2), JacobianApprox::Zero { dim: 2 }, 10.0, 0.1, 1.0).unwrap();
        let out = minmax_solve(&mp, 0.5, 100).unwrap();
        assert_eq!(out.z, v(&[1.0, 2.0]));
        assert_eq!((out.lhs, out.rhs), (0.0, 0.0));
    }

    #[test]
    fn minmax_affine_exact_is_exact() {
        // L = 0, delta = 0: one shifted solve zeroes the linear model
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -2.0, 1.0]);
        let mp = ModelParams::new(v(&[0.0, 0.0]), v(&[1.0, -1.0]), JacobianApprox::dense(m), 10.0, 0.0, 0.0).unwrap();
        for tol in [0.01, 0.5, 0.99] {
            let out = minmax_solve(&mp, tol, 10).unwrap();
            assert!(mp.omega_eval(&out.z).unwrap().norm() < 1e-14);
        }
    }

    #[test]
    fn minmax_cubic_bilinear_reverified() {
        let op = CubicBilinear::new(4, 0.5).unwrap();
        let oracle = Oracle::new(op);
        let mut r = rng::seeded(2);
        for k in 0..10 {
            let anchor = rng::gaussian(8, &mut r);
            let fa = oracle.eval(&anchor).unwrap();
            let pairs = pairs_from_jvp(&oracle, &anchor, 5, k).unwrap();
            let jac = JacobianApprox::LowRank(broyden_build(&Vector::from_element(8, 0.1), &pairs, Update::Damped, 5).unwrap());
            let mp = ModelParams::new(anchor.clone(), fa.clone(), jac.clone(), 10.0, 0.3, 0.5).unwrap();
            let out = minmax_solve(&mp, 0.5, 100).unwrap();
            // independent re-evaluation of both sides from the raw definitions
            let d = &out.z - &anchor;
            let omega = &fa + jac.to_dense() * &d + &d * (10.0 * 0.3) + &d * (5.0 * 0.5 * d.norm());
            let rn = d.norm();
            let rhs = 0.5 * (0.25 * rn * rn + 0.3 * rn).min(fa.norm());
            assert!(omega.norm() <= rhs, "{} > {rhs}", omega.norm());
        }
    }

    #[test]
    fn minmax_bad_tolerance() {
        let mp = ModelParams::new(v(&[0.0]), v(&[1.0]), JacobianApprox::Zero { dim: 1 }, 10.0, 0.1, 1.0).unwrap();
        assert!(minmax_solve(&mp, 1.0, 10).is_err());
    }

    proptest! {
        #[test]
        fn bisection_keeps_bracket_and_meets_eps(seed in 0u64..300, delta in 0.0f64..0.5, lip in 0.1f64..3.0) {
            let mut r = rng::seeded(seed);
            let d = 5;
            let g = rng::gaussian(d, &mut r);
            let a = DMatrix::from_fn(d, d, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut r));
            let jm = a.transpose() * &a * 0.1 + (&a - a.transpose()) * 0.3;
            let jac = JacobianApprox::dense(jm);
            let dom = Domain::centered_ball(d, 1.0).unwrap();
            let anchor = rng::in_ball(d, 0.9, &mut r);
            let p = RayParams { eta: 10.0, delta, lip, eps: 1e-9, tau_max: 2.0 };
            let out = ray_search_solve(&g, &jac, p, &dom, &anchor).unwrap();
            // re-evaluate upsilon at the returned tau
            let dstep = jac.solve_shifted(10.0 * delta + 5.0 * lip * out.tau, &g).unwrap();
            let y = dom.project(&(&anchor - dstep)).unwrap();
            prop_assert!((out.tau - (&y - &anchor).norm()).abs() <= 1e-9);
            prop_assert!(out.solves <= ((2.0f64 / 1e-9).log2().ceil() as usize) + 2);
        }
    }
}
