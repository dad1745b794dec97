//! JSON run and suite configurations.
//!
//! Every field has a default, so `{}` is a valid suite: it reproduces the
//! cubic-bilinear comparison (d = 50, rho = 1e-3) with the tuned
//! hyperparameters of each method.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use viji_core::metrics::Metric;
use viji_core::operators::{Affine, CubicBilinear, Operator};
use viji_core::solve::{JacobianProvider, SolverConfig};
use viji_core::{rng, Domain, Vector};

pub const DEFAULT_ITERS: usize = 100_000;
pub const PERSEUS2_ITERS: usize = 1_000;
pub const DEFAULT_PLOT_EVERY: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `min_x max_y y^T (A x - b) + rho/6 |x|^3` on the full space unless a
    /// ball radius is given.
    CubicBilinear {
        #[serde(default = "default_game_dim")]
        d: usize,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default)]
        radius: Option<f64>,
        /// Restricted-gap radius.
        #[serde(default = "one")]
        beta: f64,
    },
    /// Random monotone `F(x) = M x + q` on a centred ball; `mu` adds a
    /// strongly monotone part.
    Affine {
        dim: usize,
        #[serde(default)]
        mu: f64,
        #[serde(default = "one")]
        radius: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_game_dim() -> usize {
    50
}

fn default_rho() -> f64 {
    1e-3
}

fn one() -> f64 {
    1.0
}

fn five() -> f64 {
    5.0
}

fn default_memory() -> usize {
    20
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::CubicBilinear {
            d: default_game_dim(),
            rho: default_rho(),
            radius: None,
            beta: 1.0,
        }
    }
}

/// A concrete problem: operator, feasible set and its reported metric.
#[derive(Debug, Clone)]
pub struct Problem {
    pub op: Arc<dyn Operator>,
    pub dom: Domain,
    pub metric: Metric,
    pub bilinear: Option<CubicBilinear>,
}

impl ProblemConfig {
    pub fn build(&self) -> anyhow::Result<Problem> {
        match *self {
            ProblemConfig::CubicBilinear { d, rho, radius, beta } => {
                let game = CubicBilinear::new(d, rho)?;
                let dom = match radius {
                    Some(r) => Domain::centered_ball(2 * d, r)?,
                    None => Domain::full(2 * d),
                };
                if !(beta > 0.0) {
                    bail!("problem.beta: must be positive, got {beta}");
                }
                Ok(Problem {
                    op: Arc::new(game.clone()),
                    dom,
                    metric: Metric::RestrictedGap { beta },
                    bilinear: Some(game),
                })
            }
            ProblemConfig::Affine { dim, mu, radius, seed } => {
                if dim == 0 {
                    bail!("problem.dim: must be positive");
                }
                if !(mu >= 0.0) {
                    bail!("problem.mu: must be nonnegative, got {mu}");
                }
                let (m, q) = random_monotone(dim, mu, seed);
                let dom = Domain::centered_ball(dim, radius)?;
                Ok(Problem {
                    op: Arc::new(Affine::new(m.clone(), q.clone())?),
                    dom,
                    metric: Metric::AffineGap { m: Some(m), q: Some(q) },
                    bilinear: None,
                })
            }
        }
    }

    /// Dimension of the game, used by the manifest's oracle accounting.
    pub fn dim(&self) -> usize {
        match *self {
            ProblemConfig::CubicBilinear { d, .. } => 2 * d,
            ProblemConfig::Affine { dim, .. } => dim,
        }
    }

    pub fn with_seed(&self, s: u64) -> Self {
        match self.clone() {
            ProblemConfig::Affine { dim, mu, radius, .. } => ProblemConfig::Affine { dim, mu, radius, seed: s },
            other => other,
        }
    }
}

/// Unit-norm monotone matrix (PSD plus skew part) plus `mu I`, and a
/// Gaussian offset.
pub fn random_monotone(dim: usize, mu: f64, seed: u64) -> (DMatrix<f64>, Vector) {
    let mut r = rng::seeded(seed);
    let a = DMatrix::from_fn(dim, dim, |_, _| rng::gaussian(1, &mut r)[0]);
    let b = DMatrix::from_fn(dim, dim, |_, _| rng::gaussian(1, &mut r)[0]);
    let m = &b * b.transpose() * 0.1 + (&a - a.transpose());
    let norm = m.norm().max(f64::MIN_POSITIVE);
    let m = m / norm + DMatrix::identity(dim, dim) * mu;
    (m, rng::gaussian(dim, &mut r))
}

/// Solver choice. The named baselines carry their tuned defaults; `viji`
/// exposes the full solver configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "solver")]
pub enum MethodConfig {
    Eg {
        #[serde(default = "default_lr")]
        lr: f64,
    },
    Perseus1 {
        #[serde(default = "default_l0")]
        l0: f64,
        #[serde(default = "five")]
        eta: f64,
    },
    Perseus2 {
        #[serde(default = "default_perseus2_l1")]
        l1: f64,
        #[serde(default = "five")]
        eta: f64,
    },
    ViqaBroyden {
        #[serde(default = "default_viqa_l1")]
        l1: f64,
        #[serde(default = "default_broyden_delta")]
        delta: f64,
        #[serde(default = "default_broyden_delta")]
        j0: f64,
        #[serde(default = "default_memory")]
        memory: usize,
        #[serde(default = "five")]
        eta: f64,
    },
    ViqaDamped {
        #[serde(default = "default_viqa_l1")]
        l1: f64,
        #[serde(default = "default_damped_delta")]
        delta: f64,
        #[serde(default = "default_damped_delta")]
        j0: f64,
        #[serde(default = "default_memory")]
        memory: usize,
        #[serde(default = "five")]
        eta: f64,
    },
    Viji {
        #[serde(default)]
        config: SolverConfig,
        #[serde(default = "exact_provider")]
        provider: JacobianProvider,
    },
}

fn default_lr() -> f64 {
    0.5
}

fn default_l0() -> f64 {
    0.2334
}

fn default_perseus2_l1() -> f64 {
    1e-4
}

fn default_viqa_l1() -> f64 {
    1e-3
}

fn default_broyden_delta() -> f64 {
    0.4
}

fn default_damped_delta() -> f64 {
    0.22
}

fn exact_provider() -> JacobianProvider {
    JacobianProvider::Exact
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Eg { .. } => "eg",
            MethodConfig::Perseus1 { .. } => "perseus1",
            MethodConfig::Perseus2 { .. } => "perseus2",
            MethodConfig::ViqaBroyden { .. } => "viqa-broyden",
            MethodConfig::ViqaDamped { .. } => "viqa-damped",
            MethodConfig::Viji { .. } => "viji",
        }
    }

    pub fn default_iters(&self) -> usize {
        match self {
            MethodConfig::Perseus2 { .. } => PERSEUS2_ITERS,
            MethodConfig::Viji { config, .. } => config.iters,
            _ => DEFAULT_ITERS,
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        let positive = |field: &str, x: f64| -> anyhow::Result<()> {
            if !(x > 0.0 && x.is_finite()) {
                bail!("{field}: must be positive, got {x}");
            }
            Ok(())
        };
        match *self {
            MethodConfig::Eg { lr } => positive("lr", lr),
            MethodConfig::Perseus1 { l0, eta } => {
                positive("l0", l0)?;
                positive("eta", eta)
            }
            MethodConfig::Perseus2 { l1, eta } => {
                positive("l1", l1)?;
                positive("eta", eta)
            }
            MethodConfig::ViqaBroyden { l1, delta, memory, .. } | MethodConfig::ViqaDamped { l1, delta, memory, .. } => {
                positive("l1", l1)?;
                positive("delta", delta)?;
                if memory == 0 {
                    bail!("memory: must be positive");
                }
                Ok(())
            }
            MethodConfig::Viji { ref config, .. } => config.validate().context("config"),
        }
    }
}

/// One method of a suite (or the single method of a run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    /// Label used for the CSV file name and in the manifest; defaults to
    /// the solver name.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub iters: Option<usize>,
    #[serde(flatten)]
    pub method: MethodConfig,
}

impl MethodEntry {
    pub fn new(method: MethodConfig) -> Self {
        MethodEntry {
            label: None,
            iters: None,
            method,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn iterations(&self) -> usize {
        self.iters.unwrap_or_else(|| self.method.default_iters())
    }
}

/// The five-method comparison.
pub fn default_methods() -> Vec<MethodEntry> {
    [
        "{\"solver\": \"eg\"}",
        "{\"solver\": \"perseus1\"}",
        "{\"solver\": \"perseus2\"}",
        "{\"solver\": \"viqa-broyden\"}",
        "{\"solver\": \"viqa-damped\"}",
    ]
    .iter()
    .map(|s| serde_json::from_str(s).expect("built-in method defaults parse"))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: String,
    pub problem: ProblemConfig,
    pub methods: Vec<MethodEntry>,
    pub plot_every: usize,
    pub seed: u64,
    /// Record wall-clock times; off by default so traces are byte-identical.
    pub timing: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            name: "cubic-bilinear".into(),
            problem: ProblemConfig::default(),
            methods: default_methods(),
            plot_every: DEFAULT_PLOT_EVERY,
            seed: 0,
            timing: false,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.methods.is_empty() {
            bail!("methods: suite lists no methods");
        }
        if self.plot_every == 0 {
            bail!("plot_every: must be positive");
        }
        let mut seen = std::collections::HashSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            m.method.validate().with_context(|| format!("methods[{i}]"))?;
            if !seen.insert(m.label()) {
                bail!("methods[{i}].label: duplicate label {:?}", m.label());
            }
        }
        let dim = self.problem.dim();
        for (i, m) in self.methods.iter().enumerate() {
            if let MethodConfig::Viji { config, .. } = &m.method {
                if let Some(x0) = &config.x0 {
                    if x0.len() != dim {
                        bail!("methods[{i}].config.x0: length {} does not match dimension {dim}", x0.len());
                    }
                }
            }
        }
        Ok(())
    }
}

/// A single run: one problem, one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_run_name")]
    pub name: String,
    #[serde(default)]
    pub problem: ProblemConfig,
    pub method: MethodEntry,
    #[serde(default = "default_plot_every")]
    pub plot_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timing: bool,
}

fn default_run_name() -> String {
    "run".into()
}

fn default_plot_every() -> usize {
    DEFAULT_PLOT_EVERY
}

impl RunConfig {
    /// The run as a one-method suite.
    pub fn into_suite(self) -> SuiteConfig {
        SuiteConfig {
            name: self.name,
            problem: self.problem,
            methods: vec![self.method],
            plot_every: self.plot_every,
            seed: self.seed,
            timing: self.timing,
        }
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_suite(path: &Path) -> anyhow::Result<SuiteConfig> {
    let suite: SuiteConfig =
        serde_json::from_str(&read(path)?).with_context(|| format!("parsing suite {}", path.display()))?;
    suite.validate()?;
    Ok(suite)
}

pub fn load_run(path: &Path) -> anyhow::Result<RunConfig> {
    let run: RunConfig =
        serde_json::from_str(&read(path)?).with_context(|| format!("parsing run config {}", path.display()))?;
    run.clone().into_suite().validate()?;
    Ok(run)
}
