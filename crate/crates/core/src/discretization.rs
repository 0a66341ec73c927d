//! Time grid, truncated log-price grids and the Euler–Maruyama reference
//! chain used to regularise the calibrated measure.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::operator::log_sum_exp;
use crate::table::{fmt_f64, Table};

/// Relative slack used when snapping calibration times onto the grid.
const ON_GRID_TOL: f64 = 1e-9;

/// Uniform time grid `t_k = k h`, `k = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub step: f64,
    pub times: Vec<f64>,
    /// Grid step of each calibration time, in calibration-time order.
    pub calibration_steps: Vec<usize>,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize, calibration_times: &[f64]) -> Result<Self> {
        if !(horizon > 0.0) || n_steps == 0 {
            return Err(CalibError::Invalid(format!(
                "time grid needs horizon > 0 and at least one step (got {horizon}, {n_steps})"
            )));
        }
        let step = horizon / n_steps as f64;
        let times = (0..=n_steps).map(|k| k as f64 * step).collect();
        let mut calibration_steps = Vec::with_capacity(calibration_times.len());
        for &tau in calibration_times {
            let r = tau / step;
            let k = r.round();
            if (r - k).abs() > ON_GRID_TOL * r.max(1.0) || k < 1.0 || k as usize > n_steps {
                return Err(CalibError::OffGrid { time: tau, step });
            }
            calibration_steps.push(k as usize);
        }
        Ok(Self {
            n_steps,
            step,
            times,
            calibration_steps,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.n_steps]
    }

    /// Partition of instrument indices by grid step, given each instrument's
    /// calibration-time index.
    pub fn partition(&self, maturity_indices: &[usize]) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.n_steps + 1];
        for (i, &m) in maturity_indices.iter().enumerate() {
            parts[self.calibration_steps[m]].push(i);
        }
        parts
    }
}

/// Uniform grid on `[lower, upper]` in log-price.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    pub lower: f64,
    pub upper: f64,
    pub n_points: usize,
    pub dx: f64,
    pub points: Vec<f64>,
}

impl SpaceGrid {
    pub fn new(lower: f64, upper: f64, n_points: usize) -> Result<Self> {
        if n_points < 2 || !(upper > lower) {
            return Err(CalibError::Invalid(format!(
                "space grid needs >= 2 points on a non-empty interval (got {n_points} on [{lower}, {upper}])"
            )));
        }
        let dx = (upper - lower) / (n_points - 1) as f64;
        let points = (0..n_points).map(|i| lower + i as f64 * dx).collect();
        Ok(Self {
            lower,
            upper,
            n_points,
            dx,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    /// Index of the grid point closest to `x` (clamped to the grid).
    pub fn nearest(&self, x: f64) -> usize {
        let r = ((x - self.lower) / self.dx).round();
        if r <= 0.0 {
            0
        } else {
            (r as usize).min(self.n_points - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

/// Spatial extremes of the reference coefficients at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientRange {
    pub drift_min: f64,
    pub drift_max: f64,
    pub vol_min: f64,
    pub vol_max: f64,
}

impl CoefficientRange {
    pub fn constant(drift: f64, vol: f64) -> Self {
        Self {
            drift_min: drift,
            drift_max: drift,
            vol_min: vol,
            vol_max: vol,
        }
    }
}

/// Per-step bounds `[m_k - delta v_k, m_k + delta v_k]` with
/// `m_k = m0 + h sum_{l<k} drift_l` and `v_k^2 = v0^2 + h sum_{l<k} vol_l^2`.
///
/// State-dependent coefficients enter through their spatial extremes: the
/// lower edge follows the smallest drift, the upper edge the largest, and the
/// spread uses the largest volatility. `ranges` has one entry per transition
/// (`k = 0..n_steps`); the result has `n_steps + 1` entries.
pub fn truncate_domain(m0: f64, v0: f64, ranges: &[CoefficientRange], h: f64, delta: f64) -> Vec<Bounds> {
    debug_assert!(delta > 0.0);
    let mut out = Vec::with_capacity(ranges.len() + 1);
    let (mut m_lo, mut m_hi, mut var) = (m0, m0, v0 * v0);
    out.push(Bounds {
        lower: m_lo - delta * var.sqrt(),
        upper: m_hi + delta * var.sqrt(),
    });
    for r in ranges {
        m_lo += h * r.drift_min;
        m_hi += h * r.drift_max;
        var += h * r.vol_max * r.vol_max;
        let v = var.sqrt();
        out.push(Bounds {
            lower: m_lo - delta * v,
            upper: m_hi + delta * v,
        });
    }
    out
}

/// Largest admissible spacing for a kernel of volatility `vol_min` over `h`.
pub fn max_spacing(vol_min: f64, h: f64, points_per_std: f64) -> f64 {
    vol_min * h.sqrt() / points_per_std
}

fn grid_for(bounds: Bounds, dx_max: f64, cap: usize, step: usize) -> Result<SpaceGrid> {
    let (mut lo, mut hi) = (bounds.lower, bounds.upper);
    if hi - lo < dx_max {
        let mid = 0.5 * (lo + hi);
        lo = mid - dx_max;
        hi = mid + dx_max;
    }
    let n = ((hi - lo) / dx_max).ceil() as usize + 1;
    if n > cap {
        return Err(CalibError::GridCap {
            step,
            requested: n,
            cap,
        });
    }
    SpaceGrid::new(lo, hi, n.max(2))
}

/// One grid per step with `dx <= vol_min_k sqrt(h) / points_per_std`.
/// `vol_min` has one entry per transition; the terminal grid reuses the
/// last transition's spacing.
pub fn build_space_grids(
    bounds: &[Bounds],
    h: f64,
    vol_min: &[f64],
    points_per_std: f64,
    cap: usize,
) -> Result<Vec<SpaceGrid>> {
    if points_per_std < 2.0 {
        return Err(CalibError::Invalid(format!(
            "points_per_std must be >= 2, got {points_per_std}"
        )));
    }
    if vol_min.iter().any(|&v| !(v > 0.0)) {
        return Err(CalibError::Domain("reference volatility must be positive".into()));
    }
    let dx_of = |k: usize| -> f64 {
        // a grid feeds transition k (as source) and k-1 (as target)
        let a = vol_min.get(k).copied().unwrap_or(f64::INFINITY);
        let b = if k > 0 { vol_min[k - 1] } else { f64::INFINITY };
        max_spacing(a.min(b), h, points_per_std)
    };
    bounds
        .iter()
        .enumerate()
        .map(|(k, &b)| grid_for(b, dx_of(k), cap, k))
        .collect()
}

/// A single grid covering the union of `bounds`, fine enough for every step.
pub fn common_space_grid(
    bounds: &[Bounds],
    h: f64,
    vol_min: f64,
    points_per_std: f64,
    cap: usize,
) -> Result<SpaceGrid> {
    if points_per_std < 2.0 {
        return Err(CalibError::Invalid(format!(
            "points_per_std must be >= 2, got {points_per_std}"
        )));
    }
    if !(vol_min > 0.0) {
        return Err(CalibError::Domain("reference volatility must be positive".into()));
    }
    let lower = bounds.iter().map(|b| b.lower).fold(f64::INFINITY, f64::min);
    let upper = bounds.iter().map(|b| b.upper).fold(f64::NEG_INFINITY, f64::max);
    grid_for(Bounds { lower, upper }, max_spacing(vol_min, h, points_per_std), cap, 0)
}

/// Like [`common_space_grid`], but widened so that `anchor` is a node. A
/// Dirac start off the lattice would otherwise shift the initial forward.
pub fn anchored_space_grid(
    bounds: &[Bounds],
    anchor: f64,
    h: f64,
    vol_min: f64,
    points_per_std: f64,
    cap: usize,
) -> Result<SpaceGrid> {
    let g = common_space_grid(bounds, h, vol_min, points_per_std, cap)?;
    if !(g.lower <= anchor && anchor <= g.upper) {
        return Err(CalibError::Domain(format!(
            "anchor {anchor} outside [{}, {}]",
            g.lower, g.upper
        )));
    }
    let dx = g.dx;
    let below = ((anchor - g.lower) / dx - 1e-9).ceil().max(0.0) as usize;
    let above = ((g.upper - anchor) / dx - 1e-9).ceil().max(0.0) as usize;
    let n = below + above + 1;
    if n > cap {
        return Err(CalibError::GridCap {
            step: 0,
            requested: n,
            cap,
        });
    }
    SpaceGrid::new(anchor - below as f64 * dx, anchor + above as f64 * dx, n)
}

/// Drift and volatility tabulated on the source grid of every transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients {
    pub drift: Vec<Vec<f64>>,
    pub vol: Vec<Vec<f64>>,
}

impl StepCoefficients {
    pub fn from_fn(grids: &[SpaceGrid], f: impl Fn(usize, f64) -> (f64, f64)) -> Self {
        let n_steps = grids.len() - 1;
        let mut drift = Vec::with_capacity(n_steps);
        let mut vol = Vec::with_capacity(n_steps);
        for (k, g) in grids.iter().take(n_steps).enumerate() {
            let (d, v): (Vec<f64>, Vec<f64>) = g.points.iter().map(|&x| f(k, x)).unzip();
            drift.push(d);
            vol.push(v);
        }
        Self { drift, vol }
    }

    pub fn constant(grids: &[SpaceGrid], drift: f64, vol: f64) -> Self {
        Self::from_fn(grids, |_, _| (drift, vol))
    }

    /// Log-price dynamics of a driftless price: `mu = -sigma^2 / 2`.
    pub fn martingale(grids: &[SpaceGrid], variance: impl Fn(usize, f64) -> f64) -> Self {
        Self::from_fn(grids, |k, x| {
            let v = variance(k, x);
            (-0.5 * v, v.max(0.0).sqrt())
        })
    }

    pub fn ranges(&self) -> Vec<CoefficientRange> {
        self.drift
            .iter()
            .zip(&self.vol)
            .map(|(d, v)| CoefficientRange {
                drift_min: d.iter().copied().fold(f64::INFINITY, f64::min),
                drift_max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                vol_min: v.iter().copied().fold(f64::INFINITY, f64::min),
                vol_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    }
}

/// How the initial law is placed on the first grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum InitialLaw {
    /// All mass at the grid point nearest to `x0`.
    Dirac { x0: f64 },
    /// Discretised normal density, renormalised on the grid.
    Gaussian { mean: f64, std: f64 },
}

impl InitialLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::Dirac { x0 } => x0,
            InitialLaw::Gaussian { mean, .. } => mean,
        }
    }

    pub fn std(&self) -> f64 {
        match *self {
            InitialLaw::Dirac { .. } => 0.0,
            InitialLaw::Gaussian { std, .. } => std,
        }
    }

    pub fn on_grid(&self, grid: &SpaceGrid) -> Result<Vec<f64>> {
        match *self {
            InitialLaw::Dirac { x0 } => {
                let mut w = vec![0.0; grid.len()];
                w[grid.nearest(x0)] = 1.0;
                Ok(w)
            }
            InitialLaw::Gaussian { mean, std } => {
                if !(std > 0.0) {
                    return Err(CalibError::Domain(format!("initial std must be > 0, got {std}")));
                }
                let logw: Vec<f64> = grid.points.iter().map(|&x| -0.5 * ((x - mean) / std).powi(2)).collect();
                let z = log_sum_exp(&logw);
                Ok(logw.iter().map(|&l| (l - z).exp()).collect())
            }
        }
    }
}

/// The discrete reference chain: initial weights and row-stochastic Gaussian
/// transition kernels, stored in log form together with their transposes.
#[derive(Debug, Clone)]
pub struct ReferenceMeasure {
    pub h: f64,
    pub grids: Vec<SpaceGrid>,
    pub rho0: Vec<f64>,
    pub coefficients: StepCoefficients,
    log_kernels: Vec<Array2<f64>>,
    log_kernels_t: Vec<Array2<f64>>,
}

impl ReferenceMeasure {
    pub fn n_steps(&self) -> usize {
        self.grids.len() - 1
    }

    pub fn grid(&self, k: usize) -> &SpaceGrid {
        &self.grids[k]
    }

    /// `log P(x_k = i -> x_{k+1} = j)` as an `(n_k, n_{k+1})` matrix.
    pub fn log_kernel(&self, k: usize) -> &Array2<f64> {
        &self.log_kernels[k]
    }

    pub fn log_kernel_t(&self, k: usize) -> &Array2<f64> {
        &self.log_kernels_t[k]
    }

    pub fn kernel(&self, k: usize) -> Array2<f64> {
        self.log_kernels[k].mapv(f64::exp)
    }

    pub fn log_rho0(&self) -> Vec<f64> {
        self.rho0
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect()
    }

    /// Forward marginals obtained by applying the kernels to `rho0`.
    pub fn forward_marginals(&self) -> Vec<Vec<f64>> {
        let mut out = vec![self.rho0.clone()];
        for k in 0..self.n_steps() {
            let kern = self.kernel(k);
            let prev = &out[k];
            let next: Vec<f64> = (0..self.grids[k + 1].len())
                .map(|j| prev.iter().enumerate().map(|(i, &p)| p * kern[[i, j]]).sum())
                .collect();
            out.push(next);
        }
        out
    }

    /// Audit table: per-step bounds, size and coefficient extremes.
    pub fn summary_table(&self) -> Table {
        let mut t = Table::new(&[
            "k",
            "t",
            "lower",
            "upper",
            "n_points",
            "vol_min",
            "vol_max",
            "drift_min",
            "drift_max",
        ]);
        let ranges = self.coefficients.ranges();
        for (k, g) in self.grids.iter().enumerate() {
            let r = ranges
                .get(k)
                .copied()
                .unwrap_or(CoefficientRange::constant(f64::NAN, f64::NAN));
            t.push(vec![
                k.to_string(),
                fmt_f64(k as f64 * self.h),
                fmt_f64(g.lower),
                fmt_f64(g.upper),
                g.n_points.to_string(),
                fmt_f64(r.vol_min),
                fmt_f64(r.vol_max),
                fmt_f64(r.drift_min),
                fmt_f64(r.drift_max),
            ]);
        }
        t
    }
}

/// Builds the Euler–Maruyama reference chain on `grids`. Row `(k, x)` is the
/// normal density `N(x + drift h, vol^2 h)` on grid `k+1`, renormalised to
/// sum to one.
pub fn build_reference(
    grids: Vec<SpaceGrid>,
    h: f64,
    coefficients: StepCoefficients,
    initial: InitialLaw,
) -> Result<ReferenceMeasure> {
    let n_steps = grids
        .len()
        .checked_sub(1)
        .filter(|&n| n > 0)
        .ok_or_else(|| CalibError::Invalid("reference measure needs at least two grids".into()))?;
    if coefficients.vol.len() != n_steps || coefficients.drift.len() != n_steps {
        return Err(CalibError::Invalid(format!(
            "coefficients cover {} steps, grids imply {n_steps}",
            coefficients.vol.len()
        )));
    }
    let mut log_kernels = Vec::with_capacity(n_steps);
    let mut log_kernels_t = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let src = &grids[k];
        let dst = &grids[k + 1];
        let mut m = Array2::<f64>::zeros((src.len(), dst.len()));
        for (i, &x) in src.points.iter().enumerate() {
            let sigma = coefficients.vol[k][i];
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(CalibError::Domain(format!(
                    "reference volatility {sigma} at step {k}, x = {x} must be positive"
                )));
            }
            let mean = x + coefficients.drift[k][i] * h;
            let var = sigma * sigma * h;
            let mut row = m.row_mut(i);
            for (j, &y) in dst.points.iter().enumerate() {
                row[j] = -0.5 * (y - mean) * (y - mean) / var;
            }
            let z = log_sum_exp(row.as_slice().unwrap());
            row.mapv_inplace(|v| v - z);
        }
        log_kernels_t.push(m.t().as_standard_layout().to_owned());
        log_kernels.push(m);
    }
    let rho0 = initial.on_grid(&grids[0])?;
    Ok(ReferenceMeasure {
        h,
        grids,
        rho0,
        coefficients,
        log_kernels,
        log_kernels_t,
    })
}

/// Piecewise-constant instantaneous variance on `(tau_{i-1}, tau_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseVariance {
    pub knots: Vec<f64>,
    pub variances: Vec<f64>,
}

impl PiecewiseVariance {
    pub fn flat(variance: f64) -> Self {
        Self {
            knots: vec![f64::INFINITY],
            variances: vec![variance],
        }
    }

    /// Variance in force at time `t`; constant beyond the last knot.
    pub fn at(&self, t: f64) -> f64 {
        let i = self.knots.iter().position(|&k| t <= k).unwrap_or(self.knots.len() - 1);
        self.variances[i]
    }

    /// Variance for transition `k` of a grid with step `h`, read at the
    /// transition midpoint.
    pub fn for_step(&self, k: usize, h: f64) -> f64 {
        self.at((k as f64 + 0.5) * h)
    }
}

/// Forward-variance bootstrap from ATM implied volatilities.
pub fn bootstrap_reference_vol(atm_vols: &[f64], times: &[f64]) -> Result<PiecewiseVariance> {
    if atm_vols.len() != times.len() || times.is_empty() {
        return Err(CalibError::Invalid("bootstrap needs one ATM vol per time".into()));
    }
    if atm_vols.iter().any(|&v| !(v > 0.0)) {
        return Err(CalibError::Domain("ATM vols must be positive".into()));
    }
    let mut variances = Vec::with_capacity(times.len());
    let (mut w_prev, mut t_prev) = (0.0, 0.0);
    for (&s, &t) in atm_vols.iter().zip(times) {
        if !(t > t_prev) {
            return Err(CalibError::Invalid("bootstrap times must increase".into()));
        }
        let w = s * s * t;
        if !(w > w_prev) {
            return Err(CalibError::Domain(format!(
                "total variance {w} at t={t} does not exceed {w_prev} (calendar arbitrage)"
            )));
        }
        variances.push((w - w_prev) / (t - t_prev));
        w_prev = w;
        t_prev = t;
    }
    Ok(PiecewiseVariance {
        knots: times.to_vec(),
        variances,
    })
}
