use crate::domain::{Domain, Vector};
use crate::error::{Error, Result};
use crate::operators::Oracle;

use super::{viji_run, BetaMode, JacobianProvider, Observer, OutputMode, SolverConfig, Trace};

/// Stage length `ceil(max{2^{14/3} L^{2/3} R^{2/3} / mu^{2/3}, 2^7 delta / mu})`
/// for a stage starting within distance `r_prev` of the solution.
pub fn restart_steps(lip: f64, delta: f64, mu: f64, r_prev: f64) -> usize {
    let a = 2f64.powf(14.0 / 3.0) * (lip * r_prev / mu).powf(2.0 / 3.0);
    let b = 128.0 * delta / mu;
    // guard against representation error pushing an exact integer up by one
    let t = a.max(b);
    let rounded = t.round();
    let t = if (t - rounded).abs() <= 1e-9 * rounded.max(1.0) { rounded } else { t.ceil() };
    (t as usize).max(1)
}

/// Stage lengths `T_1..T_n` with `R_i = R / 2^i` and `n = ceil(log2(R / eps))`.
pub fn restart_schedule(lip: f64, delta: f64, mu: f64, radius: f64, eps: f64) -> Result<Vec<usize>> {
    if !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!("mu must be positive, got {mu}")));
    }
    if !(radius > 0.0 && eps > 0.0) {
        return Err(Error::InvalidArgument("radius and target accuracy must be positive".into()));
    }
    let n = (radius / eps).log2().ceil().max(1.0) as usize;
    Ok((1..=n)
        .map(|i| restart_steps(lip, delta, mu, radius / 2f64.powi(i as i32 - 1)))
        .collect())
}

#[derive(Debug, Clone)]
pub struct RestartStage {
    /// Stage index `i`, starting at 1.
    pub index: usize,
    pub iters: usize,
    /// `R_{i-1}`.
    pub radius_in: f64,
    pub z: Vector,
    pub trace: Trace,
}

#[derive(Debug, Clone, Default)]
pub struct RestartTrace {
    pub stages: Vec<RestartStage>,
}

/// Restarted scheme for `mu`-strongly monotone operators: stage `i` runs the
/// averaged method for `T_i` iterations from `z_{i-1}`. `radius` defaults to
/// the domain diameter.
#[allow(clippy::too_many_arguments)]
pub fn viji_restarted_run(
    oracle: &Oracle,
    dom: &Domain,
    cfg: &SolverConfig,
    provider: &JacobianProvider,
    mu: f64,
    radius: Option<f64>,
    eps: f64,
    observer: &mut dyn Observer,
) -> Result<(Vector, RestartTrace)> {
    let radius = match radius {
        Some(r) => r,
        None => dom.diameter()?,
    };
    let schedule = restart_schedule(cfg.lip, cfg.delta, mu, radius, eps)?;
    let mut z = cfg.start(dom)?;
    let mut out = RestartTrace::default();
    for (i, &t) in schedule.iter().enumerate() {
        let stage_cfg = SolverConfig {
            iters: t,
            opt: OutputMode::Average,
            beta_mode: BetaMode::ConstantDelta,
            x0: Some(z.iter().copied().collect()),
            ..cfg.clone()
        };
        let (zi, trace) = viji_run(oracle, dom, &stage_cfg, provider, observer)?;
        out.stages.push(RestartStage {
            index: i + 1,
            iters: t,
            radius_in: radius / 2f64.powi(i as i32),
            z: zi.clone(),
            trace,
        });
        z = zi;
    }
    Ok((z, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_length_spot_values() {
        assert_eq!(restart_steps(1.0, 0.0, 1.0, 1.0), 26);
        assert_eq!(restart_steps(1.0, 1.0, 1.0, 1e-3), 128);
        assert_eq!(restart_steps(0.0, 0.5, 2.0, 1.0), 32);
    }

    #[test]
    fn schedule_counts_and_halving() {
        let s = restart_schedule(1.0, 0.0, 1.0, 1.0, 1.0 / 16.0).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], 26);
        for w in s.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(restart_schedule(1.0, 0.0, 0.0, 1.0, 0.1).is_err());
    }
}
