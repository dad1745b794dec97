//! Operator oracles and the problem zoo.
//!
//! An [`Operator`] is the pure mathematical map `F: R^d -> R^d` together with
//! whatever derivative information it can provide. [`Oracle`] wraps it with
//! shape/finiteness checks and thread-safe evaluation counters; every solver
//! talks to an `Oracle`.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::domain::Vector;
use crate::error::{check_dim, Error, Result};
use crate::linalg::all_finite;

/// Known smoothness constants of an operator (`None` when not available).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Smoothness {
    /// Zero-order: `|F(x) - F(y)| <= l0 |x - y|`.
    pub l0: Option<f64>,
    /// First-order: Jacobian is `l1`-Lipschitz.
    pub l1: Option<f64>,
    /// Second-order: second derivative is `l2`-Lipschitz.
    pub l2: Option<f64>,
}

pub trait Operator: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval(&self, x: &Vector) -> Vector;

    fn jvp(&self, _x: &Vector, _s: &Vector) -> Option<Vector> {
        None
    }

    fn jacobian(&self, _x: &Vector) -> Option<DMatrix<f64>> {
        None
    }

    /// `grad^order F(x)[s]^order`; order 1 is the JVP.
    fn contraction(&self, order: usize, x: &Vector, s: &Vector) -> Option<Vector> {
        if order == 1 {
            self.jvp(x, s)
        } else {
            None
        }
    }

    /// Highest order available through [`Operator::contraction`].
    fn max_order(&self) -> usize {
        0
    }

    /// Cost of one dense Jacobian in JVP-equivalents.
    fn jacobian_cost(&self) -> u64 {
        self.dim() as u64
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness::default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub evals: u64,
    pub jvps: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.evals + self.jvps
    }
}

/// Counting, checking wrapper around an [`Operator`].
pub struct Oracle {
    op: Arc<dyn Operator>,
    evals: AtomicU64,
    jvps: AtomicU64,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("op", &self.op)
            .field("counts", &self.counts())
            .finish()
    }
}

impl Oracle {
    pub fn new<O: Operator + 'static>(op: O) -> Self {
        Self::from_arc(Arc::new(op))
    }

    pub fn from_arc(op: Arc<dyn Operator>) -> Self {
        Oracle {
            op,
            evals: AtomicU64::new(0),
            jvps: AtomicU64::new(0),
        }
    }

    /// Fresh oracle over the same operator with zeroed counters.
    pub fn fork(&self) -> Self {
        Self::from_arc(Arc::clone(&self.op))
    }

    pub fn operator(&self) -> &dyn Operator {
        self.op.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn smoothness(&self) -> Smoothness {
        self.op.smoothness()
    }

    pub fn counts(&self) -> Counts {
        Counts {
            evals: self.evals.load(Ordering::Relaxed),
            jvps: self.jvps.load(Ordering::Relaxed),
        }
    }

    pub fn reset_counts(&self) {
        self.evals.store(0, Ordering::Relaxed);
        self.jvps.store(0, Ordering::Relaxed);
    }

    pub fn eval(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        finite(self.op.eval(x))
    }

    pub fn jvp(&self, x: &Vector, s: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), s.len())?;
        let out = self.op.jvp(x, s).ok_or(Error::Unsupported("jacobian-vector products"))?;
        self.jvps.fetch_add(1, Ordering::Relaxed);
        finite(out)
    }

    pub fn dense_jacobian(&self, x: &Vector) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        let jac = self.op.jacobian(x).ok_or(Error::Unsupported("a dense Jacobian"))?;
        self.jvps.fetch_add(self.op.jacobian_cost(), Ordering::Relaxed);
        if jac.iter().all(|v| v.is_finite()) {
            Ok(jac)
        } else {
            Err(Error::NonFinite)
        }
    }

    /// `grad^order F(x)[s]^order`, counted as one JVP.
    pub fn contraction(&self, order: usize, x: &Vector, s: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), s.len())?;
        let out = self
            .op
            .contraction(order, x, s)
            .ok_or(Error::Unsupported("higher-order derivative contractions"))?;
        self.jvps.fetch_add(1, Ordering::Relaxed);
        finite(out)
    }

    pub fn supports_jvp(&self) -> bool {
        self.op.max_order() >= 1
    }

    pub fn max_order(&self) -> usize {
        self.op.max_order()
    }
}

fn finite(v: Vector) -> Result<Vector> {
    if all_finite(&v) {
        Ok(v)
    } else {
        Err(Error::NonFinite)
    }
}

/// Central-difference Jacobian, one column per coordinate direction.
pub fn finite_diff_jacobian(oracle: &Oracle, x: &Vector, h: f64) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let d = oracle.dim();
    check_dim(d, x.len())?;
    let mut jac = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (oracle.eval(&xp)? - oracle.eval(&xm)?) / (2.0 * h);
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// `F(x) = M x + q`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub m: DMatrix<f64>,
    pub q: Vector,
}

impl Affine {
    pub fn new(m: DMatrix<f64>, q: Vector) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidArgument(format!(
                "affine operator needs a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        check_dim(m.nrows(), q.len())?;
        Ok(Affine { m, q })
    }
}

pub fn make_affine(m: DMatrix<f64>, q: Vector) -> Result<Oracle> {
    Ok(Oracle::new(Affine::new(m, q)?))
}

impl Operator for Affine {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn eval(&self, x: &Vector) -> Vector {
        &self.m * x + &self.q
    }

    fn jvp(&self, _x: &Vector, s: &Vector) -> Option<Vector> {
        Some(&self.m * s)
    }

    fn jacobian(&self, _x: &Vector) -> Option<DMatrix<f64>> {
        Some(self.m.clone())
    }

    fn contraction(&self, order: usize, x: &Vector, s: &Vector) -> Option<Vector> {
        match order {
            1 => self.jvp(x, s),
            _ => Some(Vector::zeros(self.dim())),
        }
    }

    fn max_order(&self) -> usize {
        usize::MAX
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness {
            l0: Some(crate::linalg::op_norm(&self.m)),
            l1: Some(0.0),
            l2: Some(0.0),
        }
    }
}

/// Cubic-regularised bilinear game
/// `min_x max_y y^T (A x - b) + rho/6 |x|^3` with `A` upper bidiagonal
/// (ones on the diagonal, minus ones above it) and `b = e_1`.
///
/// The joint variable is `z = (x, y)` of length `2d`.
#[derive(Debug, Clone)]
pub struct CubicBilinear {
    pub d: usize,
    pub rho: f64,
}

impl CubicBilinear {
    pub fn new(d: usize, rho: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
        }
        Ok(CubicBilinear { d, rho })
    }

    pub fn split<'a>(&self, z: &'a Vector) -> (nalgebra::DVectorView<'a, f64>, nalgebra::DVectorView<'a, f64>) {
        (z.rows(0, self.d), z.rows(self.d, self.d))
    }

    fn a_mul(&self, x: &[f64]) -> Vector {
        let d = self.d;
        Vector::from_iterator(d, (0..d).map(|i| x[i] - if i + 1 < d { x[i + 1] } else { 0.0 }))
    }

    fn at_mul(&self, y: &[f64]) -> Vector {
        Vector::from_iterator(self.d, (0..self.d).map(|i| y[i] - if i > 0 { y[i - 1] } else { 0.0 }))
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        let d = self.d;
        DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else if j == i + 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    fn b(&self) -> Vector {
        let mut b = Vector::zeros(self.d);
        b[0] = 1.0;
        b
    }

    /// Saddle point `(e_1, -(rho/2) 1)`.
    pub fn saddle_point(&self) -> Vector {
        let mut z = Vector::zeros(2 * self.d);
        z[0] = 1.0;
        for i in 0..self.d {
            z[self.d + i] = -0.5 * self.rho;
        }
        z
    }

    /// Restricted primal-dual gap in closed form:
    /// `rho/6 |x|^3 + beta |Ax - b| + 2/3 sqrt(2/rho) |A^T y|^{3/2} + b^T y`.
    ///
    /// This is `max_{|y| <= beta} f(x, y) - min_x f(x, y)` for the given point.
    pub fn restricted_gap(&self, z: &Vector, beta: f64) -> Result<f64> {
        check_dim(2 * self.d, z.len())?;
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        let (x, y) = self.split(z);
        let xn = x.norm();
        let residual = self.a_mul(x.as_slice()) - self.b();
        let aty = self.at_mul(y.as_slice()).norm();
        Ok(self.rho / 6.0 * xn.powi(3)
            + beta * residual.norm()
            + 2.0 / 3.0 * (2.0 / self.rho).sqrt() * aty.powf(1.5)
            + y[0])
    }

    /// Objective `f(x, y)` at `z = (x, y)`.
    pub fn objective(&self, z: &Vector) -> f64 {
        let (x, y) = self.split(z);
        let r = self.a_mul(x.as_slice()) - self.b();
        y.dot(&r) + self.rho / 6.0 * x.norm().powi(3)
    }
}

pub fn restricted_gap(z: &Vector, beta: f64, prob: &CubicBilinear) -> Result<f64> {
    prob.restricted_gap(z, beta)
}

impl Operator for CubicBilinear {
    fn dim(&self) -> usize {
        2 * self.d
    }

    fn eval(&self, z: &Vector) -> Vector {
        let (x, y) = self.split(z);
        let xn = x.norm();
        let gx = self.at_mul(y.as_slice()) + x * (0.5 * self.rho * xn);
        let gy = self.b() - self.a_mul(x.as_slice());
        let mut out = Vector::zeros(2 * self.d);
        out.rows_mut(0, self.d).copy_from(&gx);
        out.rows_mut(self.d, self.d).copy_from(&gy);
        out
    }

    fn jvp(&self, z: &Vector, s: &Vector) -> Option<Vector> {
        let (x, _) = self.split(z);
        let (sx, sy) = self.split(s);
        let xn = x.norm();
        let mut hx = sx * (0.5 * self.rho * xn);
        if xn > 0.0 {
            hx += x * (0.5 * self.rho * x.dot(&sx) / xn);
        }
        let top = hx + self.at_mul(sy.as_slice());
        let bottom = -self.a_mul(sx.as_slice());
        let mut out = Vector::zeros(2 * self.d);
        out.rows_mut(0, self.d).copy_from(&top);
        out.rows_mut(self.d, self.d).copy_from(&bottom);
        Some(out)
    }

    fn jacobian(&self, z: &Vector) -> Option<DMatrix<f64>> {
        let d = self.d;
        let (x, _) = self.split(z);
        let xn = x.norm();
        let a = self.a_matrix();
        let mut jac = DMatrix::zeros(2 * d, 2 * d);
        // x-x block: rho/2 (|x| I + x x^T / |x|), zero at x = 0
        if xn > 0.0 {
            let hxx = DMatrix::identity(d, d) * (0.5 * self.rho * xn)
                + (x * x.transpose()) * (0.5 * self.rho / xn);
            jac.view_mut((0, 0), (d, d)).copy_from(&hxx);
        }
        jac.view_mut((0, d), (d, d)).copy_from(&a.transpose());
        jac.view_mut((d, 0), (d, d)).copy_from(&(-a));
        Some(jac)
    }

    fn max_order(&self) -> usize {
        1
    }

    /// Only the `d` columns of the x-block depend on the point; the bilinear
    /// columns are constant, so a full Jacobian costs `d` JVPs.
    fn jacobian_cost(&self) -> u64 {
        self.d as u64
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness {
            l0: None,
            l1: Some(self.rho),
            l2: None,
        }
    }
}

/// Componentwise quadratic `F(x) = x * x + q`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub q: Vector,
}

impl Operator for Quadratic {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn eval(&self, x: &Vector) -> Vector {
        x.component_mul(x) + &self.q
    }

    fn jvp(&self, x: &Vector, s: &Vector) -> Option<Vector> {
        Some(x.component_mul(s) * 2.0)
    }

    fn jacobian(&self, x: &Vector) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_diagonal(&(x * 2.0)))
    }

    fn contraction(&self, order: usize, x: &Vector, s: &Vector) -> Option<Vector> {
        match order {
            1 => self.jvp(x, s),
            2 => Some(s.component_mul(s) * 2.0),
            _ => Some(Vector::zeros(self.dim())),
        }
    }

    fn max_order(&self) -> usize {
        usize::MAX
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness {
            l0: None,
            l1: Some(2.0),
            l2: Some(0.0),
        }
    }
}

/// Monotone cubic operator `F(x) = S x + x^3 + q` (componentwise cube) with
/// `S` skew-symmetric; the gradient field of a convex quartic plus a rotation.
#[derive(Debug, Clone)]
pub struct SkewCubic {
    pub skew: DMatrix<f64>,
    pub q: Vector,
}

impl SkewCubic {
    pub fn new(skew: DMatrix<f64>, q: Vector) -> Result<Self> {
        if !skew.is_square() {
            return Err(Error::InvalidArgument("skew part must be square".into()));
        }
        check_dim(skew.nrows(), q.len())?;
        if (&skew + skew.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidArgument("matrix is not skew-symmetric".into()));
        }
        Ok(SkewCubic { skew, q })
    }
}

impl Operator for SkewCubic {
    fn dim(&self) -> usize {
        self.q.len()
    }

    fn eval(&self, x: &Vector) -> Vector {
        &self.skew * x + x.map(|v| v * v * v) + &self.q
    }

    fn jvp(&self, x: &Vector, s: &Vector) -> Option<Vector> {
        Some(&self.skew * s + x.map(|v| 3.0 * v * v).component_mul(s))
    }

    fn jacobian(&self, x: &Vector) -> Option<DMatrix<f64>> {
        Some(&self.skew + DMatrix::from_diagonal(&x.map(|v| 3.0 * v * v)))
    }

    fn contraction(&self, order: usize, x: &Vector, s: &Vector) -> Option<Vector> {
        match order {
            1 => self.jvp(x, s),
            2 => Some(x.component_mul(s).component_mul(s) * 6.0),
            3 => Some(s.map(|v| 6.0 * v * v * v)),
            _ => Some(Vector::zeros(self.dim())),
        }
    }

    fn max_order(&self) -> usize {
        usize::MAX
    }

    fn smoothness(&self) -> Smoothness {
        Smoothness {
            l0: None,
            l1: None,
            l2: Some(6.0),
        }
    }
}

type VecFn = dyn Fn(&Vector) -> Vector + Send + Sync;
type JvpFn = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;

/// Operator defined by closures, for ad-hoc instances (e.g. Minty-only test
/// problems certified by sampling).
pub struct FnOperator {
    dim: usize,
    f: Box<VecFn>,
    jvp: Option<Box<JvpFn>>,
    smoothness: Smoothness,
}

impl fmt::Debug for FnOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnOperator").field("dim", &self.dim).finish()
    }
}

impl FnOperator {
    pub fn new(dim: usize, f: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        FnOperator {
            dim,
            f: Box::new(f),
            jvp: None,
            smoothness: Smoothness::default(),
        }
    }

    pub fn with_jvp(mut self, jvp: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.jvp = Some(Box::new(jvp));
        self
    }

    pub fn with_smoothness(mut self, smoothness: Smoothness) -> Self {
        self.smoothness = smoothness;
        self
    }
}

impl Operator for FnOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Vector) -> Vector {
        (self.f)(x)
    }

    fn jvp(&self, x: &Vector, s: &Vector) -> Option<Vector> {
        self.jvp.as_ref().map(|j| j(x, s))
    }

    fn jacobian(&self, x: &Vector) -> Option<DMatrix<f64>> {
        let j = self.jvp.as_ref()?;
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for c in 0..self.dim {
            let mut e = Vector::zeros(self.dim);
            e[c] = 1.0;
            m.set_column(c, &j(x, &e));
        }
        Some(m)
    }

    fn max_order(&self) -> usize {
        usize::from(self.jvp.is_some())
    }

    fn smoothness(&self) -> Smoothness {
        self.smoothness
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn cubic_bilinear_at_zero() {
        let op = CubicBilinear::new(2, 1e-3).unwrap();
        assert_eq!(op.eval(&Vector::zeros(4)), v(&[0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn cubic_bilinear_saddle_is_a_zero() {
        for d in [2, 5, 50] {
            let op = CubicBilinear::new(d, 1e-3).unwrap();
            let z = op.saddle_point();
            assert!(op.eval(&z).norm() < 1e-15);
            assert!(op.restricted_gap(&z, 1.0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn affine_at_origin_gives_offset() {
        let oracle = make_affine(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), v(&[5.0, 6.0])).unwrap();
        assert_eq!(oracle.eval(&Vector::zeros(2)).unwrap(), v(&[5.0, 6.0]));
        assert_eq!(oracle.counts().evals, 1);
        let zero = make_affine(DMatrix::zeros(2, 2), v(&[1.0, -1.0])).unwrap();
        assert_eq!(zero.eval(&v(&[9.0, 9.0])).unwrap(), v(&[1.0, -1.0]));
    }

    #[test]
    fn affine_structure_cases() {
        let mu = 0.7;
        let strong = make_affine(DMatrix::identity(3, 3) * mu, Vector::zeros(3)).unwrap();
        let skew = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, -2.0, -1.0, 0.0, 0.5, 2.0, -0.5, 0.0]);
        let skew_op = make_affine(skew.clone(), Vector::zeros(3)).unwrap();
        let mut r = rng::seeded(3);
        for _ in 0..20 {
            let x = rng::gaussian(3, &mut r);
            let y = rng::gaussian(3, &mut r);
            let fx = strong.eval(&x).unwrap() - strong.eval(&y).unwrap();
            assert!(((fx.dot(&(&x - &y))) - mu * (&x - &y).norm_squared()).abs() < 1e-12);
            assert!((skew_op.eval(&x).unwrap().dot(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn jvp_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let oracle = make_affine(m.clone(), v(&[1.0, 1.0])).unwrap();
        let s = v(&[0.3, -0.7]);
        assert_eq!(oracle.jvp(&v(&[10.0, 1.0]), &s).unwrap(), &m * &s);
        assert_eq!(oracle.jvp(&v(&[10.0, 1.0]), &Vector::zeros(2)).unwrap(), Vector::zeros(2));
        assert_eq!(oracle.counts().jvps, 2);
    }

    #[test]
    fn cubic_bilinear_jvp_matches_central_differences() {
        let op = CubicBilinear::new(4, 0.3).unwrap();
        let mut r = rng::seeded(11);
        for _ in 0..20 {
            let z = rng::gaussian(8, &mut r);
            let s = rng::gaussian(8, &mut r);
            let h = 1e-5;
            let fd = (op.eval(&(&z + &s * h)) - op.eval(&(&z - &s * h))) / (2.0 * h);
            let j = op.jvp(&z, &s).unwrap();
            assert!((&fd - &j).norm() <= 1e-6 * j.norm().max(1.0), "{}", (&fd - &j).norm());
        }
    }

    #[test]
    fn dense_jacobian_columns_are_jvps() {
        let op = Oracle::new(CubicBilinear::new(3, 0.5).unwrap());
        let mut r = rng::seeded(5);
        let z = rng::gaussian(6, &mut r);
        let jac = op.dense_jacobian(&z).unwrap();
        for j in 0..6 {
            let mut e = Vector::zeros(6);
            e[j] = 1.0;
            assert!((jac.column(j) - op.jvp(&z, &e).unwrap()).norm() < 1e-10);
        }
        // Hessian-limit convention at x = 0
        let mut z0 = z.clone();
        z0.rows_mut(0, 3).fill(0.0);
        let jac0 = op.dense_jacobian(&z0).unwrap();
        assert_eq!(jac0.view((0, 0), (3, 3)).amax(), 0.0);
    }

    #[test]
    fn cubic_bilinear_xx_block_closed_form() {
        let rho = 0.8;
        let op = CubicBilinear::new(3, rho).unwrap();
        let z = v(&[0.3, -1.2, 0.5, 1.0, 2.0, 3.0]);
        let x = v(&[0.3, -1.2, 0.5]);
        let xn = x.norm();
        let expected = DMatrix::identity(3, 3) * (rho / 2.0 * xn) + &x * x.transpose() * (rho / 2.0 / xn);
        let jac = op.jacobian(&z).unwrap();
        assert!((jac.view((0, 0), (3, 3)) - &expected).amax() < 1e-14);
        let oracle = Oracle::new(op);
        let fd = finite_diff_jacobian(&oracle, &z, 1e-5).unwrap();
        assert!((fd - jac).amax() < 1e-8);
    }

    #[test]
    fn affine_dense_jacobian_is_constant() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let oracle = make_affine(m.clone(), v(&[0.0, 1.0])).unwrap();
        assert_eq!(oracle.dense_jacobian(&v(&[7.0, -2.0])).unwrap(), m);
        let fd = finite_diff_jacobian(&oracle, &v(&[7.0, -2.0]), 0.1).unwrap();
        assert!((fd - &m).amax() < 1e-12);
    }

    #[test]
    fn finite_difference_of_square() {
        let oracle = Oracle::new(Quadratic { q: Vector::zeros(1) });
        let fd = finite_diff_jacobian(&oracle, &v(&[3.0]), 1e-5).unwrap();
        assert!((fd[(0, 0)] - 6.0).abs() < 1e-8);
        assert!(finite_diff_jacobian(&oracle, &v(&[3.0]), 0.0).is_err());
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let oracle = Oracle::new(CubicBilinear::new(3, 0.9).unwrap());
        let z = v(&[0.4, -0.3, 0.8, 0.1, 0.2, 0.3]);
        let exact = oracle.dense_jacobian(&z).unwrap();
        let errs: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| (finite_diff_jacobian(&oracle, &z, h).unwrap() - &exact).amax())
            .collect();
        // O(h^2): a tenfold smaller step shrinks the error ~100x until roundoff
        assert!(errs[1] <= errs[0] / 50.0 || errs[1] < 1e-10, "{errs:?}");
        assert!(errs[2] < 1e-9, "{errs:?}");
    }

    #[test]
    fn unsupported_jvp_is_an_error() {
        let oracle = Oracle::new(FnOperator::new(2, |x: &Vector| x.clone()));
        assert!(matches!(
            oracle.jvp(&Vector::zeros(2), &Vector::zeros(2)),
            Err(Error::Unsupported(_))
        ));
        assert!(oracle.dense_jacobian(&Vector::zeros(2)).is_err());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let oracle = Oracle::new(FnOperator::new(1, |x: &Vector| x.map(|v| 1.0 / v)));
        assert!(matches!(oracle.eval(&Vector::zeros(1)), Err(Error::NonFinite)));
    }

    #[test]
    fn restricted_gap_at_origin() {
        let op = CubicBilinear::new(2, 1e-3).unwrap();
        assert!((op.restricted_gap(&Vector::zeros(4), 1.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn restricted_gap_matches_grid_maximisation() {
        // max over |y| <= beta of f(x_hat, y) minus min over x of f(x, y_hat),
        // both by brute-force grids on d = 2.
        let op = CubicBilinear::new(2, 1.0).unwrap();
        let beta = 1.0;
        let z = v(&[0.3, -0.4, 0.2, 0.5]);
        let closed = op.restricted_gap(&z, beta).unwrap();
        let f = |x: &[f64; 2], y: &[f64; 2]| {
            let zz = v(&[x[0], x[1], y[0], y[1]]);
            op.objective(&zz)
        };
        let xh = [z[0], z[1]];
        let yh = [z[2], z[3]];
        let mut max_y = f64::NEG_INFINITY;
        let n = 400;
        for i in 0..=n {
            let r = beta * i as f64 / n as f64;
            for j in 0..(4 * n) {
                let t = 2.0 * std::f64::consts::PI * j as f64 / (4 * n) as f64;
                max_y = max_y.max(f(&xh, &[r * t.cos(), r * t.sin()]));
            }
        }
        let mut min_x = f64::INFINITY;
        let m = 1200;
        let half = 3.0;
        for i in 0..=m {
            for j in 0..=m {
                let x = [-half + 2.0 * half * i as f64 / m as f64, -half + 2.0 * half * j as f64 / m as f64];
                min_x = min_x.min(f(&x, &yh));
            }
        }
        let grid = max_y - min_x;
        assert!((grid - closed).abs() < 1e-3, "closed {closed}, grid {grid}");
    }

    #[test]
    fn counters_are_shared_across_threads() {
        let oracle = Oracle::new(CubicBilinear::new(3, 1.0).unwrap());
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..250 {
                        oracle.eval(&Vector::zeros(6)).unwrap();
                    }
                });
            }
        });
        assert_eq!(oracle.counts().evals, 1000);
    }

    #[test]
    fn skew_cubic_contractions_match_differences() {
        let skew = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 2.0, 0.0, -2.0, 0.0]);
        let op = SkewCubic::new(skew, v(&[0.1, 0.2, 0.3])).unwrap();
        let x = v(&[0.5, -0.2, 0.9]);
        let s = v(&[0.3, 0.4, -0.1]);
        let h = 1e-4;
        let fd2 = (op.jvp(&(&x + &s * h), &s).unwrap() - op.jvp(&(&x - &s * h), &s).unwrap()) / (2.0 * h);
        assert!((fd2 - op.contraction(2, &x, &s).unwrap()).norm() < 1e-8);
    }

    fn arb_vec(d: usize, r: f64) -> impl Strategy<Value = Vector> {
        proptest::collection::vec(-r..r, d).prop_map(Vector::from_vec)
    }

    proptest! {
        #[test]
        fn cubic_bilinear_is_monotone(z1 in arb_vec(10, 3.0), z2 in arb_vec(10, 3.0)) {
            let op = CubicBilinear::new(5, 0.7).unwrap();
            let gap = (op.eval(&z1) - op.eval(&z2)).dot(&(&z1 - &z2));
            prop_assert!(gap >= -1e-10);
        }

        #[test]
        fn cubic_bilinear_taylor_bound(z in arb_vec(10, 2.0), w in arb_vec(10, 2.0)) {
            let rho = 0.7;
            let op = CubicBilinear::new(5, rho).unwrap();
            let jac = op.jacobian(&w).unwrap();
            let err = (op.eval(&z) - op.eval(&w) - jac * (&z - &w)).norm();
            prop_assert!(err <= rho / 2.0 * (&z - &w).norm_squared() + 1e-9);
        }

        #[test]
        fn jvp_is_linear(z in arb_vec(6, 2.0), s1 in arb_vec(6, 2.0), s2 in arb_vec(6, 2.0), a in -3.0f64..3.0) {
            let op = CubicBilinear::new(3, 0.4).unwrap();
            let lhs = op.jvp(&z, &(&s1 * a + &s2)).unwrap();
            let rhs = op.jvp(&z, &s1).unwrap() * a + op.jvp(&z, &s2).unwrap();
            prop_assert!((lhs - rhs).norm() <= 1e-10);
        }
    }
}
