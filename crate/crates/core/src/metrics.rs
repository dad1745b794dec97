//! Optimality measures and rate fitting.
//!
//! * residue `sup_x <F(x_hat), x_hat - x>` (closed form on balls and boxes),
//! * gap `sup_x <F(x), x_hat - x>` for monotone affine operators on a ball,
//!   solved exactly as a convex trust-region problem,
//! * restricted gap of the cubic-regularised bilinear game.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{Domain, Vector};
use crate::error::{check_dim, Error, Result};
use crate::linalg::sym_part;
use crate::operators::{CubicBilinear, Operator};
use crate::solve::{Observer, Trace};

pub fn residue(op: &dyn Operator, dom: &Domain, x_hat: &Vector) -> Result<f64> {
    if !dom.is_bounded() {
        return Err(Error::UnboundedDomain);
    }
    check_dim(op.dim(), x_hat.len())?;
    dom.linear_sup(&op.eval(x_hat), x_hat)
}

#[derive(Debug, Clone)]
pub struct GapResult {
    pub gap: f64,
    /// Inner maximiser `x`.
    pub maximizer: Vector,
    /// Multiplier of the ball constraint.
    pub multiplier: f64,
    /// `|(H + mu I) y - g| + mu ||y| - R| + max(0, |y| - R)`.
    pub kkt_residual: f64,
}

/// Exact `sup_{x in B} <M x + q, x_hat - x>` for `sym(M) >= 0`.
pub fn gap_affine_ball(m: &DMatrix<f64>, q: &Vector, dom: &Domain, x_hat: &Vector) -> Result<GapResult> {
    let (center, radius) = match dom {
        Domain::Ball { center, radius } => (center, *radius),
        _ => return Err(Error::InvalidDomain("the affine gap oracle needs a ball".into())),
    };
    let d = q.len();
    check_dim(d, m.nrows())?;
    check_dim(d, m.ncols())?;
    check_dim(d, x_hat.len())?;
    check_dim(d, center.len())?;
    let s = sym_part(m);
    let eig = (&s * 2.0).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let lmin = eig.eigenvalues.min();
    if lmin < -1e-12 * scale {
        return Err(Error::NotMonotone(lmin / 2.0));
    }
    // x = c + y: maximise -y^T S y + g^T y, i.e. minimise 1/2 y^T H y - g^T y
    let b = m.transpose() * x_hat - q;
    let g = &b - &s * center * 2.0;
    let qmat = &eig.eigenvectors;
    let lam = eig.eigenvalues.map(|l| l.max(0.0));
    let gh = qmat.transpose() * &g;
    let tiny = 1e-13 * scale;
    let y_of = |mu: f64| -> Vector {
        let coef = Vector::from_iterator(
            d,
            (0..d).map(|i| {
                let den = lam[i] + mu;
                if den > tiny {
                    gh[i] / den
                } else {
                    0.0
                }
            }),
        );
        qmat * coef
    };
    let singular_mass: f64 = (0..d).filter(|&i| lam[i] <= tiny).map(|i| gh[i] * gh[i]).sum();
    let y0 = y_of(0.0);
    let (y, mu) = if singular_mass.sqrt() <= 1e-12 * g.norm().max(1e-300) && y0.norm() <= radius {
        (y0, 0.0)
    } else {
        let mut lo = 0.0;
        let mut hi = g.norm() / radius;
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if y_of(mid).norm() > radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // hi side is feasible
        let y = y_of(hi);
        let n = y.norm();
        let y = if n > radius { y * (radius / n) } else { y };
        (y, hi)
    };
    let x = center + &y;
    let gap = (m * &x + q).dot(&(x_hat - &x));
    let h = &s * 2.0;
    let kkt = (&h * &y + &y * mu - &g).norm() + mu * (y.norm() - radius).abs() + (y.norm() - radius).max(0.0);
    Ok(GapResult {
        gap,
        maximizer: x,
        multiplier: mu,
        kkt_residual: kkt,
    })
}

/// Least-squares slope of `log(metric)` against `log(k)`.
pub fn rate_fit(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 10 {
        return Err(Error::DegenerateWindow(format!("{} points, at least 10 required", points.len())));
    }
    if points.iter().any(|&(k, m)| k == 0 || !(m > 0.0) || !m.is_finite()) {
        return Err(Error::DegenerateWindow("metric values must be positive at k >= 1".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(k, _)| (k as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, m)| m.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateWindow("all iterations coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Slope over the sampled metrics of a trace with `k` in `window`.
pub fn rate_fit_trace(trace: &Trace, window: std::ops::RangeInclusive<usize>) -> Result<f64> {
    let pts: Vec<(usize, f64)> = trace
        .records
        .iter()
        .filter(|r| window.contains(&r.k))
        .filter_map(|r| r.metric.map(|m| (r.k, m)))
        .collect();
    rate_fit(&pts)
}

/// Metric selection for runs and benchmarks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Metric {
    Residue,
    /// `|F(x)|`.
    FNorm,
    /// Exact gap of an affine operator on a ball.
    AffineGap {
        #[serde(skip)]
        m: Option<DMatrix<f64>>,
        #[serde(skip)]
        q: Option<Vector>,
    },
    RestrictedGap { beta: f64 },
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Residue => "residue",
            Metric::FNorm => "f_norm",
            Metric::AffineGap { .. } => "gap",
            Metric::RestrictedGap { .. } => "restricted_gap",
        }
    }
}

/// Evaluates a metric on uncounted operator calls.
pub struct MetricEvaluator<'a> {
    pub metric: Metric,
    pub op: &'a dyn Operator,
    pub dom: Domain,
    pub bilinear: Option<CubicBilinear>,
}

impl MetricEvaluator<'_> {
    pub fn evaluate(&self, x: &Vector) -> Result<f64> {
        match &self.metric {
            Metric::Residue => residue(self.op, &self.dom, x),
            Metric::FNorm => Ok(self.op.eval(x).norm()),
            Metric::AffineGap { m: Some(m), q: Some(q) } => Ok(gap_affine_ball(m, q, &self.dom, x)?.gap),
            Metric::AffineGap { .. } => Err(Error::InvalidArgument("affine gap needs the operator matrix".into())),
            Metric::RestrictedGap { beta } => match &self.bilinear {
                Some(p) => p.restricted_gap(x, *beta),
                None => Err(Error::InvalidArgument("restricted gap needs the bilinear problem".into())),
            },
        }
    }
}

/// Observer sampling a metric every `every` iterations.
pub struct MetricObserver<'a> {
    pub eval: MetricEvaluator<'a>,
    pub every: usize,
    pub samples: Vec<(usize, f64)>,
}

impl<'a> MetricObserver<'a> {
    pub fn new(eval: MetricEvaluator<'a>, every: usize) -> Self {
        MetricObserver {
            eval,
            every,
            samples: Vec::new(),
        }
    }
}

impl Observer for MetricObserver<'_> {
    fn sample_every(&self) -> usize {
        self.every
    }

    fn metric(&mut self, k: usize, output: &Vector) -> Option<f64> {
        let m = self.eval.evaluate(output).ok()?;
        self.samples.push((k, m));
        Some(m)
    }
}
