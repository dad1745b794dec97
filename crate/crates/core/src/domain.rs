//! Feasible sets and the Euclidean prox machinery shared by every solver.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Dense real vector used for iterates, dual state and operator values.
pub type Vector = DVector<f64>;

/// Closed convex feasible set with Euclidean geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Ball { center: Vector, radius: f64 },
    Box { lower: Vector, upper: Vector },
    FullSpace { dim: usize },
}

impl Domain {
    pub fn ball(center: Vector, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidDomain(format!(
                "ball radius must be positive, got {radius}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidDomain("ball center must be finite".into()));
        }
        Ok(Domain::Ball { center, radius })
    }

    /// Ball of the given radius centred at the origin.
    pub fn centered_ball(dim: usize, radius: f64) -> Result<Self> {
        Self::ball(Vector::zeros(dim), radius)
    }

    pub fn new_box(lower: Vector, upper: Vector) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        for (l, u) in lower.iter().zip(upper.iter()) {
            if !(l.is_finite() && u.is_finite()) || l > u {
                return Err(Error::InvalidDomain(format!(
                    "box bounds must be finite with lower <= upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Domain::Box { lower, upper })
    }

    pub fn full(dim: usize) -> Self {
        Domain::FullSpace { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.len(),
            Domain::Box { lower, .. } => lower.len(),
            Domain::FullSpace { dim } => *dim,
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, Domain::FullSpace { .. })
    }

    /// Euclidean projection of `p` onto the set.
    pub fn project(&self, p: &Vector) -> Result<Vector> {
        check_dim(self.dim(), p.len())?;
        Ok(match self {
            Domain::Ball { center, radius } => {
                let offset = p - center;
                let norm = offset.norm();
                if norm <= *radius {
                    p.clone()
                } else {
                    center + offset * (*radius / norm)
                }
            }
            Domain::Box { lower, upper } => {
                Vector::from_iterator(p.len(), (0..p.len()).map(|i| p[i].clamp(lower[i], upper[i])))
            }
            Domain::FullSpace { .. } => p.clone(),
        })
    }

    /// `argmax_{v in X} <s, v - x0> - |v - x0|^2 / 2`, i.e. the projection of `x0 + s`.
    pub fn dual_step(&self, x0: &Vector, s: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x0.len())?;
        check_dim(self.dim(), s.len())?;
        self.project(&(x0 + s))
    }

    /// `sup_{x in X} <g, anchor - x>` in closed form.
    pub fn linear_sup(&self, g: &Vector, anchor: &Vector) -> Result<f64> {
        check_dim(self.dim(), g.len())?;
        check_dim(self.dim(), anchor.len())?;
        match self {
            Domain::Ball { center, radius } => Ok(g.dot(&(anchor - center)) + radius * g.norm()),
            Domain::Box { lower, upper } => {
                let inf: f64 = (0..g.len())
                    .map(|i| (g[i] * lower[i]).min(g[i] * upper[i]))
                    .sum();
                Ok(g.dot(anchor) - inf)
            }
            Domain::FullSpace { .. } => {
                if g.iter().all(|&gi| gi == 0.0) {
                    Ok(0.0)
                } else {
                    Err(Error::UnboundedDomain)
                }
            }
        }
    }

    /// Natural starting point: ball centre, box midpoint, origin otherwise.
    pub fn center(&self) -> Vector {
        match self {
            Domain::Ball { center, .. } => center.clone(),
            Domain::Box { lower, upper } => (lower + upper) * 0.5,
            Domain::FullSpace { dim } => Vector::zeros(*dim),
        }
    }

    /// `max_{x, y in X} |x - y|`.
    pub fn diameter(&self) -> Result<f64> {
        match self {
            Domain::Ball { radius, .. } => Ok(2.0 * radius),
            Domain::Box { lower, upper } => Ok((upper - lower).norm()),
            Domain::FullSpace { .. } => Err(Error::UnboundedDomain),
        }
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        match self {
            Domain::Ball { center, radius } => (x - center).norm() <= radius + tol,
            Domain::Box { lower, upper } => (0..x.len())
                .all(|i| x[i] >= lower[i] - tol && x[i] <= upper[i] + tol),
            Domain::FullSpace { .. } => true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn ball_projection_scales_radially() {
        let dom = Domain::centered_ball(2, 1.0).unwrap();
        assert_eq!(dom.project(&v(&[3.0, 0.0])).unwrap(), v(&[1.0, 0.0]));
    }

    #[test]
    fn full_space_projection_is_identity() {
        let dom = Domain::full(3);
        let p = v(&[1e6, -2.0, 0.5]);
        assert_eq!(dom.project(&p).unwrap(), p);
    }

    #[test]
    fn box_projection_clamps() {
        let dom = Domain::new_box(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
        assert_eq!(dom.project(&v(&[2.0, -1.0])).unwrap(), v(&[1.0, 0.0]));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dom = Domain::centered_ball(2, 1.0).unwrap();
        assert!(matches!(
            dom.project(&v(&[1.0, 2.0, 3.0])),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn dual_step_examples() {
        let full = Domain::full(2);
        assert_eq!(
            full.dual_step(&v(&[0.0, 0.0]), &v(&[2.0, 3.0])).unwrap(),
            v(&[2.0, 3.0])
        );
        let ball = Domain::centered_ball(2, 1.0).unwrap();
        assert_eq!(
            ball.dual_step(&v(&[0.0, 0.0]), &v(&[3.0, 0.0])).unwrap(),
            v(&[1.0, 0.0])
        );
        let x0 = v(&[0.2, -0.3]);
        assert_eq!(ball.dual_step(&x0, &Vector::zeros(2)).unwrap(), x0);
    }

    #[test]
    fn linear_sup_examples() {
        let ball = Domain::centered_ball(2, 1.0).unwrap();
        let zero = Vector::zeros(2);
        assert!((ball.linear_sup(&v(&[2.0, 0.0]), &zero).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(ball.linear_sup(&zero, &v(&[5.0, 1.0])).unwrap(), 0.0);

        let bx = Domain::new_box(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
        // brute force over the four vertices
        let g = v(&[1.0, -1.0]);
        let brute = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]
            .iter()
            .map(|c| g.dot(&(&zero - v(c))))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(brute, 1.0);
        assert!((bx.linear_sup(&g, &zero).unwrap() - brute).abs() < 1e-15);
    }

    #[test]
    fn linear_sup_unbounded() {
        let full = Domain::full(2);
        assert!(matches!(
            full.linear_sup(&v(&[1.0, 0.0]), &Vector::zeros(2)),
            Err(Error::UnboundedDomain)
        ));
        assert_eq!(full.linear_sup(&Vector::zeros(2), &v(&[1.0, 1.0])).unwrap(), 0.0);
    }

    #[test]
    fn diameters() {
        assert_eq!(Domain::ball(v(&[1.0, 2.0]), 1.5).unwrap().diameter().unwrap(), 3.0);
        let bx = Domain::new_box(v(&[0.0, 0.0]), v(&[3.0, 4.0])).unwrap();
        assert_eq!(bx.diameter().unwrap(), 5.0);
        assert_eq!(Domain::centered_ball(4, 0.5).unwrap().diameter().unwrap(), 1.0);
        assert!(Domain::full(2).diameter().is_err());
    }

    #[test]
    fn invalid_domains_rejected() {
        assert!(Domain::centered_ball(2, 0.0).is_err());
        assert!(Domain::new_box(v(&[1.0]), v(&[0.0])).is_err());
    }

    fn grid_sup(dom: &Domain, g: &Vector, anchor: &Vector, n: usize) -> f64 {
        // brute force over a fine grid of the boundary (sup of a linear map)
        let mut best = f64::NEG_INFINITY;
        match dom {
            Domain::Ball { center, radius } => {
                for i in 0..n {
                    let t = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    for j in 0..=n / 4 {
                        let p = std::f64::consts::PI * j as f64 / (n / 4) as f64;
                        let dir = if g.len() == 3 {
                            v(&[p.sin() * t.cos(), p.sin() * t.sin(), p.cos()])
                        } else {
                            v(&[t.cos(), t.sin()])
                        };
                        let x = center + dir * *radius;
                        best = best.max(g.dot(&(anchor - x)));
                        if g.len() == 2 {
                            break;
                        }
                    }
                }
            }
            Domain::Box { lower, upper } => {
                let d = g.len();
                for mask in 0..(1usize << d) {
                    let x = Vector::from_iterator(
                        d,
                        (0..d).map(|i| if mask >> i & 1 == 1 { upper[i] } else { lower[i] }),
                    );
                    best = best.max(g.dot(&(anchor - x)));
                }
            }
            Domain::FullSpace { .. } => unreachable!(),
        }
        best
    }

    fn arb_vec(d: usize) -> impl Strategy<Value = Vector> {
        proptest::collection::vec(-3.0f64..3.0, d).prop_map(|xs| Vector::from_vec(xs))
    }

    fn arb_domain(d: usize) -> impl Strategy<Value = Domain> {
        prop_oneof![
            (arb_vec(d), 0.1f64..2.0).prop_map(|(c, r)| Domain::ball(c, r).unwrap()),
            (arb_vec(d), proptest::collection::vec(0.0f64..2.0, d)).prop_map(|(l, w)| {
                let u = &l + Vector::from_vec(w);
                Domain::new_box(l, u).unwrap()
            }),
            Just(Domain::full(d)),
        ]
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_nonexpansive(
            dom in arb_domain(3), a in arb_vec(3), b in arb_vec(3)
        ) {
            let pa = dom.project(&a).unwrap();
            let pb = dom.project(&b).unwrap();
            prop_assert!((dom.project(&pa).unwrap() - &pa).norm() <= 1e-12);
            prop_assert!((&pa - &pb).norm() <= (&a - &b).norm() + 1e-12);
            prop_assert!(dom.contains(&pa, 1e-12));
        }

        #[test]
        fn dual_step_is_projection_of_shift(dom in arb_domain(3), x0 in arb_vec(3), s in arb_vec(3)) {
            let lhs = dom.dual_step(&x0, &s).unwrap();
            let rhs = dom.project(&(&x0 + &s)).unwrap();
            prop_assert!((lhs - rhs).norm() == 0.0);
        }

        #[test]
        fn linear_sup_matches_boundary_grid(
            dom in arb_domain(2).prop_filter("bounded", |d| d.is_bounded()),
            g in arb_vec(2), anchor in arb_vec(2)
        ) {
            let exact = dom.linear_sup(&g, &anchor).unwrap();
            let grid = grid_sup(&dom, &g, &anchor, 200_000);
            prop_assert!(grid <= exact + 1e-8);
            prop_assert!((exact - grid).abs() <= 1e-8 * (1.0 + exact.abs()));
        }
    }

    /// Zooming spherical grid: each round scans a 41x41 window of angles
    /// around the current best and shrinks the window tenfold.
    fn zoom_grid_sup_ball3(center: &Vector, radius: f64, g: &Vector, anchor: &Vector) -> f64 {
        let pi = std::f64::consts::PI;
        let eval = |t: f64, p: f64| {
            let x = center + v(&[p.sin() * t.cos(), p.sin() * t.sin(), p.cos()]) * radius;
            g.dot(&(anchor - x))
        };
        let (mut t0, mut p0, mut wt, mut wp) = (pi, pi / 2.0, pi, pi / 2.0);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..10 {
            let (mut bt, mut bp) = (t0, p0);
            for i in 0..=40 {
                for j in 0..=40 {
                    let t = t0 - wt + 2.0 * wt * i as f64 / 40.0;
                    let p = (p0 - wp + 2.0 * wp * j as f64 / 40.0).clamp(0.0, pi);
                    let val = eval(t, p);
                    if val > best {
                        best = val;
                        bt = t;
                        bp = p;
                    }
                }
            }
            t0 = bt;
            p0 = bp;
            wt /= 10.0;
            wp /= 10.0;
        }
        best
    }

    #[test]
    fn linear_sup_matches_grid_in_three_dimensions() {
        let center = v(&[0.3, -0.2, 0.1]);
        let dom = Domain::ball(center.clone(), 0.7).unwrap();
        let g = v(&[0.4, -1.1, 0.8]);
        let anchor = v(&[0.1, 0.1, 0.1]);
        let exact = dom.linear_sup(&g, &anchor).unwrap();
        let grid = zoom_grid_sup_ball3(&center, 0.7, &g, &anchor);
        assert!(grid <= exact + 1e-12);
        assert!(exact - grid < 1e-8, "{exact} vs {grid}");
        let bx = Domain::new_box(v(&[0.0, -1.0, 0.5]), v(&[1.0, 0.0, 2.0])).unwrap();
        let exact = bx.linear_sup(&g, &anchor).unwrap();
        assert!((exact - grid_sup(&bx, &g, &anchor, 0)).abs() < 1e-12);
    }
}
