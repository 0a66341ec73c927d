//! Coarse-to-fine time ladder: calibrate, read off the local variance,
//! interpolate it onto the next time grid and use it as the new reference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acceleration::AndersonConfig;
use crate::discretization::{
    anchored_space_grid, build_reference, common_space_grid, truncate_domain, CoefficientRange, InitialLaw,
    PiecewiseVariance, SpaceGrid, StepCoefficients, TimeGrid,
};
use crate::error::{CalibError, Result};
use crate::market::InstrumentSet;
use crate::operator::{PotentialSet, Propagators};
use crate::solvers::{run, Problem, RunReport, SolverConfig};

/// Floor applied to extracted local variances (annualised).
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

/// Local variance per transition `k` and grid point, on a common grid.
/// Transition `k` covers `(t_k, t_{k+1}]`; its interpolation node is the
/// midpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVarianceTable {
    pub step: f64,
    pub grid: SpaceGrid,
    pub values: Vec<Vec<f64>>,
}

impl LocalVarianceTable {
    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn node(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.step
    }

    /// Linear interpolation in time at fixed grid index, constant beyond
    /// the first and last nodes.
    pub fn at(&self, t: f64, i: usize) -> f64 {
        let n = self.n_steps();
        let r = t / self.step - 0.5;
        if r <= 0.0 {
            return self.values[0][i];
        }
        if r >= (n - 1) as f64 {
            return self.values[n - 1][i];
        }
        let k = r.floor() as usize;
        let w = r - k as f64;
        let (a, b) = (self.values[k][i], self.values[k + 1][i]);
        a + w * (b - a)
    }
}

/// Local variance `alpha - h beta^2` of the calibrated measure, floored,
/// with zero-mass points filled from the nearest charged point in x.
pub fn extract_surface(
    problem: &Problem,
    pot: &PotentialSet,
    props: &Propagators,
    floor: f64,
) -> Result<LocalVarianceTable> {
    let op = &problem.op;
    let grid = op.reference.grid(0).clone();
    if op.reference.grids.iter().any(|g| *g != grid) {
        return Err(CalibError::Invalid(
            "surface extraction needs a common space grid".into(),
        ));
    }
    let mut values = Vec::with_capacity(op.n_steps());
    for k in 0..op.n_steps() {
        let cm = op.conditional_moments(k, pot, props);
        let valid: Vec<bool> = cm
            .mass
            .iter()
            .zip(&cm.sigma2)
            .map(|(&m, &s)| m > 0.0 && s.is_finite())
            .collect();
        let row = fill_nearest(&cm.sigma2, &valid).ok_or(CalibError::DegenerateMass { step: k, index: 0 })?;
        values.push(row.into_iter().map(|v| v.max(floor)).collect());
    }
    Ok(LocalVarianceTable {
        step: op.h(),
        grid,
        values,
    })
}

fn fill_nearest(v: &[f64], valid: &[bool]) -> Option<Vec<f64>> {
    let idx: Vec<usize> = (0..v.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return None;
    }
    Some(
        (0..v.len())
            .map(|i| {
                if valid[i] {
                    return v[i];
                }
                let p = idx.partition_point(|&j| j < i);
                let best = match (p.checked_sub(1).map(|q| idx[q]), idx.get(p)) {
                    (Some(a), Some(&b)) => {
                        if i - a <= b - i {
                            a
                        } else {
                            b
                        }
                    }
                    (Some(a), None) => a,
                    (None, Some(&b)) => b,
                    (None, None) => unreachable!(),
                };
                v[best]
            })
            .collect(),
    )
}

/// Variance per transition of an `n_steps` grid over `[0, horizon]`, read
/// from `table` at the new transition midpoints.
pub fn refine(table: &LocalVarianceTable, n_steps: usize, horizon: f64) -> Vec<Vec<f64>> {
    let h = horizon / n_steps as f64;
    (0..n_steps)
        .map(|k| {
            let t = (k as f64 + 0.5) * h;
            (0..table.grid.len()).map(|i| table.at(t, i)).collect()
        })
        .collect()
}

/// Increasing list of step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLadder {
    pub step_counts: Vec<usize>,
}

impl Default for ScaleLadder {
    fn default() -> Self {
        Self {
            step_counts: vec![5, 10, 20, 40, 80],
        }
    }
}

impl ScaleLadder {
    pub fn validate(&self, horizon: f64, calibration_times: &[f64]) -> Result<Vec<TimeGrid>> {
        if self.step_counts.is_empty() {
            return Err(CalibError::Invalid("ladder needs at least one scale".into()));
        }
        if self.step_counts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CalibError::Invalid("ladder step counts must increase".into()));
        }
        self.step_counts
            .iter()
            .map(|&n| TimeGrid::new(horizon, n, calibration_times))
            .collect()
    }
}

/// Everything the ladder needs besides the instruments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    pub ladder: ScaleLadder,
    pub delta: f64,
    pub points_per_std: f64,
    pub grid_cap: usize,
    pub variance_floor: f64,
    pub martingale_weight: Option<f64>,
    pub solver: SolverConfig,
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            ladder: ScaleLadder::default(),
            delta: 5.0,
            points_per_std: 4.0,
            grid_cap: 2000,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            martingale_weight: Some(1e4),
            solver: SolverConfig {
                anderson: Some(AndersonConfig {
                    depth: 20,
                    ..AndersonConfig::default()
                }),
                ..SolverConfig::default()
            },
        }
    }
}

/// Outcome of one scale.
#[derive(Debug, Clone)]
pub struct ScaleResult {
    pub n_steps: usize,
    pub time_grid: TimeGrid,
    /// Reference variance used at this scale, per transition and grid point.
    pub reference_variance: Vec<Vec<f64>>,
    pub report: RunReport,
    /// Normalised model prices in instrument order.
    pub model_prices: Vec<f64>,
    pub surface: LocalVarianceTable,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone)]
pub struct LadderResult {
    pub grid: SpaceGrid,
    pub scales: Vec<ScaleResult>,
    /// Problem and potentials of the last scale.
    pub final_problem: Problem,
    pub final_potentials: PotentialSet,
}

impl LadderResult {
    pub fn converged(&self) -> bool {
        self.scales.iter().all(|s| s.report.converged)
    }

    pub fn last(&self) -> &ScaleResult {
        self.scales.last().expect("ladder has at least one scale")
    }
}

/// Common grid for every scale: bounds from the finest step with the
/// martingale drift of `base`, spacing from its smallest volatility.
pub fn ladder_grid(
    cfg: &LadderConfig,
    base: &PiecewiseVariance,
    horizon: f64,
    initial: &InitialLaw,
) -> Result<SpaceGrid> {
    let n = *cfg
        .ladder
        .step_counts
        .last()
        .ok_or_else(|| CalibError::Invalid("empty ladder".into()))?;
    let h = horizon / n as f64;
    let ranges: Vec<CoefficientRange> = (0..n)
        .map(|k| {
            let v = base.for_step(k, h).max(cfg.variance_floor);
            CoefficientRange::constant(-0.5 * v, v.sqrt())
        })
        .collect();
    let vol_min = ranges.iter().map(|r| r.vol_min).fold(f64::INFINITY, f64::min);
    let bounds = truncate_domain(initial.mean(), initial.std(), &ranges, h, cfg.delta);
    match initial {
        InitialLaw::Dirac { x0 } => anchored_space_grid(&bounds, *x0, h, vol_min, cfg.points_per_std, cfg.grid_cap),
        InitialLaw::Gaussian { .. } => common_space_grid(&bounds, h, vol_min, cfg.points_per_std, cfg.grid_cap),
    }
}

/// Runs every scale of the ladder. The first reference uses `base`; later
/// ones use the refined surface of the previous scale. Potentials restart
/// from zero at each scale.
pub fn run_ladder(
    cfg: &LadderConfig,
    instruments: &InstrumentSet,
    base: &PiecewiseVariance,
    initial: InitialLaw,
) -> Result<LadderResult> {
    let horizon = *instruments
        .calibration_times
        .last()
        .ok_or_else(|| CalibError::Invalid("no calibration times".into()))?;
    let grids = cfg.ladder.validate(horizon, &instruments.calibration_times)?;
    let grid = ladder_grid(cfg, base, horizon, &initial)?;
    let mut scales: Vec<ScaleResult> = Vec::with_capacity(grids.len());
    let mut last = None;
    for tg in grids {
        let start = Instant::now();
        let n = tg.n_steps;
        let variance: Vec<Vec<f64>> = match scales.last() {
            None => (0..n)
                .map(|k| vec![base.for_step(k, tg.step).max(cfg.variance_floor); grid.len()])
                .collect(),
            Some(prev) => refine(&prev.surface, n, horizon),
        };
        let grids = vec![grid.clone(); n + 1];
        let coeffs = StepCoefficients::martingale(&grids, |k, x| {
            let i = grid.nearest(x);
            variance[k][i]
        });
        let scale = |e: CalibError| e.at_scale(n);
        let reference = build_reference(grids, tg.step, coeffs, initial).map_err(scale)?;
        let problem = Problem::from_instruments(reference, instruments, &tg, cfg.martingale_weight).map_err(scale)?;
        let (pot, report) = run(&problem, &cfg.solver).map_err(scale)?;
        if !report.converged {
            log::warn!(
                "scale N_T = {n} stopped after {} sweeps without converging",
                report.sweeps
            );
        }
        let props = problem.op.propagators(&pot).map_err(scale)?;
        let surface = extract_surface(&problem, &pot, &props, cfg.variance_floor).map_err(scale)?;
        let model_prices = problem.by_instrument(&report.diagnostics.model_prices);
        log::info!(
            "scale N_T = {n}: {} sweeps, price err {:.3e}, mart err {:.3e}",
            report.sweeps,
            report.diagnostics.price_err_l2,
            report.diagnostics.mart_err_l2
        );
        scales.push(ScaleResult {
            n_steps: n,
            time_grid: tg,
            reference_variance: variance,
            report,
            model_prices,
            surface,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
        last = Some((problem, pot));
    }
    let (final_problem, final_potentials) = last.expect("ladder has at least one scale");
    Ok(LadderResult {
        grid,
        scales,
        final_problem,
        final_potentials,
    })
}
