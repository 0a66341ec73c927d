//! TOML run configuration. Every block has defaults matching the desk
//! experiment, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lvcal_core::acceleration::{AndersonConfig, Ridge};
use lvcal_core::market::{SsviParams, StrikeRule};
use lvcal_core::multiscale::{LadderConfig, ScaleLadder, DEFAULT_VARIANCE_FLOOR};
use lvcal_core::solvers::{SolverConfig, StopRule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the Monte Carlo audit; `verify` refuses to run without one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub market: MarketConfig,
    pub discretization: DiscretizationConfig,
    pub solver: SolverBlock,
    pub acceleration: AccelerationConfig,
    pub ladder: LadderBlock,
    pub output: OutputConfig,
    pub verify: VerifyConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub spot: f64,
    pub calibration_times: Vec<f64>,
    pub strike_offset: f64,
    pub strike_spacing: f64,
    pub strike_counts: Vec<usize>,
    pub ssvi: SsviParams,
}

impl Default for MarketConfig {
    fn default() -> Self {
        let rule = StrikeRule::default();
        Self {
            spot: 100.0,
            calibration_times: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            strike_offset: rule.offset,
            strike_spacing: rule.spacing,
            strike_counts: rule.counts,
            ssvi: SsviParams::default(),
        }
    }
}

impl MarketConfig {
    pub fn strike_rule(&self) -> StrikeRule {
        StrikeRule {
            offset: self.strike_offset,
            spacing: self.strike_spacing,
            counts: self.strike_counts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    /// Truncation width in standard deviations.
    pub delta: f64,
    pub points_per_std: f64,
    pub grid_cap: usize,
    pub variance_floor: f64,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        let l = LadderConfig::default();
        Self {
            delta: l.delta,
            points_per_std: l.points_per_std,
            grid_cap: l.grid_cap,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBlock {
    /// Enables the soft martingale penalty.
    pub martingale: bool,
    pub c_mart: f64,
    /// Curvature of every soft price constraint.
    pub gamma: f64,
    pub tolerance: f64,
    pub stop_rule: StopRule,
    pub max_iterations: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    pub price_tol: f64,
    pub max_price_newton: usize,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            martingale: true,
            c_mart: 1e4,
            gamma: 1e4,
            tolerance: s.tolerance,
            stop_rule: s.stop_rule,
            max_iterations: 3000,
            newton_tol: s.newton_tol,
            max_newton: s.max_newton,
            max_halvings: s.max_halvings,
            price_tol: s.price_tol,
            max_price_newton: s.max_price_newton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelerationConfig {
    pub enabled: bool,
    pub depth: usize,
    /// Ridge relative to the trace of the Gram matrix.
    pub ridge: f64,
    pub tau: f64,
}

impl Default for AccelerationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            depth: 20,
            ridge: 1e-10,
            tau: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LadderBlock {
    pub step_counts: Vec<usize>,
}

impl Default for LadderBlock {
    fn default() -> Self {
        Self {
            step_counts: vec![5, 10, 20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub verbosity: String,
    pub residuals: bool,
    pub surfaces: bool,
    pub implied_vols: bool,
    pub reference: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            verbosity: "info".into(),
            residuals: true,
            surfaces: true,
            implied_vols: true,
            reference: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub paths: usize,
    /// Paths per random stream; fixes the stream layout independently of
    /// the thread count.
    pub block_size: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            paths: 1_000_000,
            block_size: 10_000,
        }
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        bail!("{path} must be a positive finite number, got {v}");
    }
    Ok(())
}

fn at_least_one(path: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("{path} must be at least 1");
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks every field; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        let m = &self.market;
        positive("market.spot", m.spot)?;
        if m.calibration_times.is_empty() {
            bail!("market.calibration_times must not be empty");
        }
        if m.calibration_times[0] <= 0.0 || m.calibration_times.windows(2).any(|w| w[1] <= w[0]) {
            bail!("market.calibration_times must be positive and strictly increasing");
        }
        if m.strike_counts.len() != m.calibration_times.len() {
            bail!(
                "market.strike_counts has {} entries for {} calibration times",
                m.strike_counts.len(),
                m.calibration_times.len()
            );
        }
        positive("market.strike_spacing", m.strike_spacing)?;
        if !(m.strike_offset >= 0.0) {
            bail!("market.strike_offset must be >= 0");
        }
        m.ssvi.validate().context("market.ssvi")?;
        let d = &self.discretization;
        positive("discretization.delta", d.delta)?;
        if !(d.points_per_std >= 2.0) {
            bail!("discretization.points_per_std must be >= 2, got {}", d.points_per_std);
        }
        if d.grid_cap < 2 {
            bail!("discretization.grid_cap must be at least 2");
        }
        positive("discretization.variance_floor", d.variance_floor)?;
        let s = &self.solver;
        positive("solver.c_mart", s.c_mart)?;
        positive("solver.gamma", s.gamma)?;
        positive("solver.tolerance", s.tolerance)?;
        positive("solver.newton_tol", s.newton_tol)?;
        positive("solver.price_tol", s.price_tol)?;
        at_least_one("solver.max_iterations", s.max_iterations)?;
        at_least_one("solver.max_newton", s.max_newton)?;
        at_least_one("solver.max_price_newton", s.max_price_newton)?;
        let a = &self.acceleration;
        at_least_one("acceleration.depth", a.depth)?;
        if !(a.ridge >= 0.0) {
            bail!("acceleration.ridge must be >= 0");
        }
        positive("acceleration.tau", a.tau)?;
        if self.ladder.step_counts.is_empty() || self.ladder.step_counts.windows(2).any(|w| w[1] <= w[0]) {
            bail!("ladder.step_counts must be a non-empty increasing list");
        }
        at_least_one("ladder.step_counts[0]", self.ladder.step_counts[0])?;
        if self.output.verbosity.parse::<log::LevelFilter>().is_err() {
            bail!("output.verbosity '{}' is not a log level", self.output.verbosity);
        }
        at_least_one("verify.paths", self.verify.paths)?;
        at_least_one("verify.block_size", self.verify.block_size)?;
        Ok(())
    }

    pub fn anderson(&self) -> Option<AndersonConfig> {
        let a = &self.acceleration;
        a.enabled.then_some(AndersonConfig {
            depth: a.depth,
            ridge: Ridge::Relative(a.ridge),
            tau: a.tau,
        })
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            tolerance: s.tolerance,
            stop_rule: s.stop_rule,
            max_iterations: s.max_iterations,
            newton_tol: s.newton_tol,
            max_newton: s.max_newton,
            max_halvings: s.max_halvings,
            price_tol: s.price_tol,
            max_price_newton: s.max_price_newton,
            anderson: self.anderson(),
        }
    }

    pub fn ladder_config(&self) -> LadderConfig {
        let d = &self.discretization;
        LadderConfig {
            ladder: ScaleLadder {
                step_counts: self.ladder.step_counts.clone(),
            },
            delta: d.delta,
            points_per_std: d.points_per_std,
            grid_cap: d.grid_cap,
            variance_floor: d.variance_floor,
            martingale_weight: self.solver.martingale.then_some(self.solver.c_mart),
            solver: self.solver_config(),
        }
    }
}
