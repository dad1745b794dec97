//! Jacobian approximations and their shifted linear solves.
//!
//! The limited-memory Broyden family is kept in factored form
//! `J = diag(j0) + sum_i c_i u_i v_i^T`, so applying it costs `O(r d)` and a
//! shifted solve `(J + sigma I) x = b` costs `O(r^2 d + r^3)` through the
//! Woodbury identity (`O(r d + r^3)` when `j0` is a multiple of the identity).

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::Vector;
use crate::error::{check_dim, Error, Result};
use crate::operators::Oracle;
use crate::rng;

/// Relative residual every shifted solve must meet before it is returned.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Update {
    /// `J+ = J + (y - J s) s^T / (s^T s)`.
    Plain,
    /// Correction scaled by `1/(m+1)`.
    Damped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairStrategy {
    /// Differences of consecutive stored operator evaluations.
    History,
    /// Random unit directions `s_i` with `y_i = grad F(x) s_i`.
    JvpSampling,
}

/// Secant pairs `(s_i, y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBuffer {
    pub pairs: Vec<(Vector, Vector)>,
    pub strategy: PairStrategy,
}

impl PairBuffer {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Last `m` consecutive differences of a trajectory of `(point, F(point))`.
/// Pairs with a zero step are dropped.
pub fn pairs_from_history(trajectory: &[(Vector, Vector)], m: usize) -> Result<PairBuffer> {
    if trajectory.len() < m + 1 {
        return Err(Error::InsufficientHistory {
            needed: m + 1,
            got: trajectory.len(),
        });
    }
    let tail = &trajectory[trajectory.len() - (m + 1)..];
    let mut pairs = Vec::with_capacity(m);
    for w in tail.windows(2) {
        let s = &w[1].0 - &w[0].0;
        if s.norm() == 0.0 {
            continue;
        }
        pairs.push((s, &w[1].1 - &w[0].1));
    }
    Ok(PairBuffer {
        pairs,
        strategy: PairStrategy::History,
    })
}

/// `m` seeded directions on the unit sphere with exact JVPs at `x`.
pub fn pairs_from_jvp(oracle: &Oracle, x: &Vector, m: usize, seed: u64) -> Result<PairBuffer> {
    let d = oracle.dim();
    check_dim(d, x.len())?;
    if !oracle.supports_jvp() {
        return Err(Error::Unsupported("jacobian-vector products"));
    }
    if m >= d {
        return Err(Error::InvalidArgument(format!(
            "JVP sampling needs memory below the dimension ({m} >= {d})"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut pairs = Vec::with_capacity(m);
    for _ in 0..m {
        let s = rng::unit_sphere(d, &mut r);
        let y = oracle.jvp(x, &s)?;
        pairs.push((s, y));
    }
    Ok(PairBuffer {
        pairs,
        strategy: PairStrategy::JvpSampling,
    })
}

/// `diag(j0) + U diag(c) V^T` with `U`, `V` stored column-wise (`d x r`).
#[derive(Debug, Clone)]
pub struct LowRankJacobian {
    j0: Vector,
    u: DMatrix<f64>,
    v: DMatrix<f64>,
    c: Vector,
    alpha: f64,
    memory: usize,
    update: Update,
    /// `V^T U`, present when `j0` is uniform.
    vtu: Option<DMatrix<f64>>,
}

impl LowRankJacobian {
    /// Rank-zero approximation `diag(j0)`.
    pub fn diagonal(j0: Vector) -> Self {
        let d = j0.len();
        Self::from_factors(j0, DMatrix::zeros(d, 0), DMatrix::zeros(d, 0), Vector::zeros(0), 1.0, 0, Update::Plain)
    }

    fn from_factors(
        j0: Vector,
        u: DMatrix<f64>,
        v: DMatrix<f64>,
        c: Vector,
        alpha: f64,
        memory: usize,
        update: Update,
    ) -> Self {
        let uniform = j0.iter().all(|&x| x == j0[0]);
        let vtu = (uniform && !j0.is_empty()).then(|| v.transpose() * &u);
        LowRankJacobian {
            j0,
            u,
            v,
            c,
            alpha,
            memory,
            update,
            vtu,
        }
    }

    pub fn dim(&self) -> usize {
        self.j0.len()
    }

    pub fn rank(&self) -> usize {
        self.c.len()
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn update(&self) -> Update {
        self.update
    }

    pub fn j0(&self) -> &Vector {
        &self.j0
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn c(&self) -> &Vector {
        &self.c
    }

    pub fn apply(&self, s: &Vector) -> Result<Vector> {
        check_dim(self.dim(), s.len())?;
        Ok(self.apply_unchecked(s))
    }

    fn apply_unchecked(&self, s: &Vector) -> Vector {
        let mut out = self.j0.component_mul(s);
        if self.rank() > 0 {
            let w = (self.v.transpose() * s).component_mul(&self.c);
            out.gemv(1.0, &self.u, &w, 1.0);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_diagonal(&self.j0);
        for i in 0..self.rank() {
            m += self.u.column(i) * self.v.column(i).transpose() * self.c[i];
        }
        m
    }

    /// Cheap upper bound on the operator norm.
    pub fn op_norm_bound(&self) -> f64 {
        let d0 = self.j0.amax();
        (0..self.rank()).fold(d0, |acc, i| {
            acc + self.c[i].abs() * self.u.column(i).norm() * self.v.column(i).norm()
        })
    }

    /// Certified inexactness for an operator with `|grad F| <= l0`.
    pub fn delta_bound(&self, l0: f64) -> f64 {
        delta_bound(self.update, self.memory, l0)
    }

    /// Solves `(J + sigma I) x = rhs` by Woodbury; the residual is verified.
    pub fn solve_shifted(&self, sigma: f64, rhs: &Vector) -> Result<Vector> {
        check_dim(self.dim(), rhs.len())?;
        let b = self.j0.map(|x| x + sigma);
        let scale = b.amax();
        if b.iter().any(|&x| x.abs() <= 1e-14 * scale.max(1e-300)) || !scale.is_finite() {
            return Err(Error::IllConditioned(format!("diagonal part J0 + {sigma:e} I is singular")));
        }
        let binv = b.map(|x| 1.0 / x);
        let inner = if self.rank() == 0 {
            None
        } else {
            let vbu = match &self.vtu {
                Some(vtu) => vtu * binv[0],
                None => {
                    let bu = DMatrix::from_fn(self.dim(), self.rank(), |i, j| binv[i] * self.u[(i, j)]);
                    self.v.transpose() * bu
                }
            };
            let mut k = vbu;
            for i in 0..self.rank() {
                k[(i, i)] += 1.0 / self.c[i];
            }
            Some(k.lu())
        };
        let solve = |r: &Vector| -> Result<Vector> {
            let br = binv.component_mul(r);
            match &inner {
                None => Ok(br),
                Some(lu) => {
                    let t = lu
                        .solve(&(self.v.transpose() * &br))
                        .ok_or_else(|| Error::IllConditioned("inner low-rank system is singular".into()))?;
                    let ut = &self.u * t;
                    Ok(br - binv.component_mul(&ut))
                }
            }
        };
        let mut x = solve(rhs)?;
        let tol = SOLVE_RESIDUAL_TOL * rhs.norm();
        let mut res = rhs - (self.apply_unchecked(&x) + &x * sigma);
        if res.norm() > tol {
            // one step of iterative refinement before giving up
            x += solve(&res)?;
            res = rhs - (self.apply_unchecked(&x) + &x * sigma);
        }
        if res.norm() > tol || !crate::linalg::all_finite(&x) {
            return Err(Error::IllConditioned(format!(
                "shifted solve residual {:.3e} exceeds {:.3e}",
                res.norm(),
                tol
            )));
        }
        Ok(x)
    }
}

/// `(m+2) L0` for the plain update, `2 L0` for the damped one.
pub fn delta_bound(update: Update, memory: usize, l0: f64) -> f64 {
    match update {
        Update::Plain => (memory as f64 + 2.0) * l0,
        Update::Damped => 2.0 * l0,
    }
}

/// Sequential Broyden build through the running factored form.
pub fn broyden_build(j0: &Vector, pairs: &PairBuffer, update: Update, memory: usize) -> Result<LowRankJacobian> {
    if j0.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("J0 must be a nonnegative finite diagonal".into()));
    }
    if pairs.len() > memory {
        return Err(Error::InvalidArgument(format!(
            "{} pairs exceed the memory {memory}",
            pairs.len()
        )));
    }
    let d = j0.len();
    let r = pairs.len();
    let alpha = match update {
        Update::Plain => 1.0,
        Update::Damped => memory as f64 + 1.0,
    };
    let mut u = DMatrix::zeros(d, r);
    let mut v = DMatrix::zeros(d, r);
    let mut c = Vector::zeros(r);
    for (i, (s, y)) in pairs.pairs.iter().enumerate() {
        check_dim(d, s.len())?;
        check_dim(d, y.len())?;
        let ss = s.norm_squared();
        if ss == 0.0 || !ss.is_finite() {
            return Err(Error::ZeroStep { index: i });
        }
        // J^i s through the first i factors
        let mut js = j0.component_mul(s);
        if i > 0 {
            let vi = v.columns(0, i);
            let w = (vi.transpose() * s).component_mul(&c.rows(0, i));
            js.gemv(1.0, &u.columns(0, i), &w, 1.0);
        }
        u.set_column(i, &(y - js));
        v.set_column(i, s);
        c[i] = 1.0 / (alpha * ss);
    }
    Ok(LowRankJacobian::from_factors(j0.clone(), u, v, c, alpha, memory, update))
}

/// Dense recursion of the update applied literally, for reference.
pub fn broyden_dense(j0: &DMatrix<f64>, pairs: &PairBuffer, update: Update, memory: usize) -> DMatrix<f64> {
    let alpha = match update {
        Update::Plain => 1.0,
        Update::Damped => memory as f64 + 1.0,
    };
    let mut j = j0.clone();
    for (s, y) in &pairs.pairs {
        let corr = (y - &j * s) * s.transpose() / (alpha * s.norm_squared());
        j += corr;
    }
    j
}

/// A Jacobian estimate handed to the model.
#[derive(Debug, Clone)]
pub enum JacobianApprox {
    Zero { dim: usize },
    Dense(DenseJacobian),
    LowRank(LowRankJacobian),
}

impl JacobianApprox {
    pub fn dense(m: DMatrix<f64>) -> Self {
        JacobianApprox::Dense(DenseJacobian::new(m))
    }

    pub fn dim(&self) -> usize {
        match self {
            JacobianApprox::Zero { dim } => *dim,
            JacobianApprox::Dense(d) => d.m.nrows(),
            JacobianApprox::LowRank(l) => l.dim(),
        }
    }

    pub fn apply(&self, s: &Vector) -> Result<Vector> {
        check_dim(self.dim(), s.len())?;
        Ok(match self {
            JacobianApprox::Zero { dim } => Vector::zeros(*dim),
            JacobianApprox::Dense(d) => &d.m * s,
            JacobianApprox::LowRank(l) => l.apply_unchecked(s),
        })
    }

    pub fn solve_shifted(&self, sigma: f64, rhs: &Vector) -> Result<Vector> {
        check_dim(self.dim(), rhs.len())?;
        match self {
            JacobianApprox::Zero { .. } => {
                if sigma == 0.0 {
                    Err(Error::IllConditioned("zero Jacobian with zero shift".into()))
                } else {
                    Ok(rhs / sigma)
                }
            }
            JacobianApprox::Dense(d) => d.solve_shifted(sigma, rhs),
            JacobianApprox::LowRank(l) => l.solve_shifted(sigma, rhs),
        }
    }

    /// Cheap upper bound on the operator norm.
    pub fn norm_bound(&self) -> f64 {
        match self {
            JacobianApprox::Zero { .. } => 0.0,
            JacobianApprox::Dense(d) => d.m.norm(),
            JacobianApprox::LowRank(l) => l.op_norm_bound(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            JacobianApprox::Zero { dim } => DMatrix::zeros(*dim, *dim),
            JacobianApprox::Dense(d) => d.m.clone(),
            JacobianApprox::LowRank(l) => l.to_dense(),
        }
    }
}

/// Dense matrix with a lazily computed Hessenberg form, so that repeated
/// shifted solves cost `O(d^2)` each after one `O(d^3)` reduction.
#[derive(Debug, Clone)]
pub struct DenseJacobian {
    pub m: DMatrix<f64>,
    hess: OnceLock<(DMatrix<f64>, DMatrix<f64>)>,
}

impl DenseJacobian {
    pub fn new(m: DMatrix<f64>) -> Self {
        DenseJacobian { m, hess: OnceLock::new() }
    }

    pub fn solve_shifted(&self, sigma: f64, rhs: &Vector) -> Result<Vector> {
        let (q, h) = self.hess.get_or_init(|| self.m.clone().hessenberg().unpack());
        let y = hessenberg_shifted_solve(h, sigma, &(q.transpose() * rhs))?;
        let x = q * y;
        let res = rhs - (&self.m * &x + &x * sigma);
        let tol = SOLVE_RESIDUAL_TOL * rhs.norm();
        if res.norm() > tol || !crate::linalg::all_finite(&x) {
            return Err(Error::IllConditioned(format!(
                "dense shifted solve residual {:.3e} exceeds {:.3e}",
                res.norm(),
                tol
            )));
        }
        Ok(x)
    }
}

/// Gaussian elimination with adjacent-row pivoting on `(H + sigma I) y = b`.
fn hessenberg_shifted_solve(h: &DMatrix<f64>, sigma: f64, b: &Vector) -> Result<Vector> {
    let n = h.nrows();
    let mut a = h.clone();
    for i in 0..n {
        a[(i, i)] += sigma;
    }
    let mut y = b.clone();
    for k in 0..n.saturating_sub(1) {
        if a[(k + 1, k)].abs() > a[(k, k)].abs() {
            for j in k..n {
                a.swap((k, j), (k + 1, j));
            }
            y.swap_rows(k, k + 1);
        }
        let piv = a[(k, k)];
        if piv == 0.0 {
            continue;
        }
        let l = a[(k + 1, k)] / piv;
        if l != 0.0 {
            for j in k..n {
                a[(k + 1, j)] -= l * a[(k, j)];
            }
            y[k + 1] -= l * y[k];
        }
    }
    for k in (0..n).rev() {
        let mut acc = y[k];
        for j in k + 1..n {
            acc -= a[(k, j)] * y[j];
        }
        let piv = a[(k, k)];
        if piv == 0.0 {
            return Err(Error::IllConditioned("shifted dense matrix is singular".into()));
        }
        y[k] = acc / piv;
    }
    Ok(y)
}
