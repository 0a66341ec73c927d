//! Block-coordinate (multi-marginal Sinkhorn) ascent on the dual problem.
//!
//! One sweep walks `k = 0..=N` and, at each step, maximises the dual exactly
//! in the block owned by that step: the moment potential `phi_b_k` (with the
//! coupled `phi_nu_k = F*(-phi_b_k)`), then either the initial-marginal
//! potential (`k = 0`) or the price multipliers `Lambda_k`, and finally
//! advances the forward propagator.

use std::cell::Cell;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acceleration::{anderson_solve, norm_inf, AndersonConfig};
use crate::discretization::{ReferenceMeasure, TimeGrid};
use crate::error::{CalibError, Result};
use crate::market::InstrumentSet;
use crate::operator::{MomentFunction, Operator, PotentialSet, Propagators, LOG_ZERO};

/// Constraint data: hard initial law, soft price targets per step and the
/// optional quadratic martingale penalty `F(b) = c b^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub initial_marginal: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub martingale_weight: Option<f64>,
}

/// Legendre transform of `c b^2`.
pub fn penalty_conjugate(q: f64, c: f64) -> f64 {
    q * q / (4.0 * c)
}

/// A calibration problem: operator plus constraints.
#[derive(Debug, Clone)]
pub struct Problem {
    pub op: Operator,
    pub constraints: ConstraintSpec,
    /// Instrument index of every price constraint, grouped by step.
    pub instrument_index: Vec<Vec<usize>>,
}

impl Problem {
    pub fn new(op: Operator, constraints: ConstraintSpec) -> Result<Self> {
        let n = op.n_steps();
        let counts = op.constraints_per_step();
        if constraints.targets.len() != n + 1 || constraints.weights.len() != n + 1 {
            return Err(CalibError::Invalid("targets/weights need one block per step".into()));
        }
        for (k, (&count, (targets, weights))) in counts
            .iter()
            .zip(constraints.targets.iter().zip(&constraints.weights))
            .enumerate()
        {
            if targets.len() != count || weights.len() != count {
                return Err(CalibError::Invalid(format!(
                    "constraint block {k} does not match its payoffs"
                )));
            }
            if weights.iter().any(|&g| !(g > 0.0)) {
                return Err(CalibError::Invalid(format!("penalty weights at step {k} must be > 0")));
            }
        }
        if counts[0] > 0 {
            return Err(CalibError::Invalid(
                "price constraints at t = 0 are not supported".into(),
            ));
        }
        if let Some(c) = constraints.martingale_weight {
            if !(c > 0.0) {
                return Err(CalibError::Invalid(format!("martingale weight must be > 0, got {c}")));
            }
        }
        let rho = &constraints.initial_marginal;
        if rho.len() != op.reference.grid(0).len() {
            return Err(CalibError::Invalid(
                "initial marginal does not match the first grid".into(),
            ));
        }
        if (rho.iter().sum::<f64>() - 1.0).abs() > 1e-12 || rho.iter().any(|&p| p < 0.0) {
            return Err(CalibError::Invalid(
                "initial marginal must be a probability vector".into(),
            ));
        }
        if rho.iter().zip(&op.reference.rho0).any(|(&p, &q)| p > 0.0 && q == 0.0) {
            return Err(CalibError::Invalid(
                "initial marginal charges points the reference does not".into(),
            ));
        }
        let instrument_index = counts
            .iter()
            .scan(0, |s, &c| {
                let v: Vec<usize> = (*s..*s + c).collect();
                *s += c;
                Some(v)
            })
            .collect();
        Ok(Self {
            op,
            constraints,
            instrument_index,
        })
    }

    /// Price constraints from an instrument set whose maturities sit on
    /// `time_grid`; the initial marginal is the reference one.
    pub fn from_instruments(
        reference: ReferenceMeasure,
        instruments: &InstrumentSet,
        time_grid: &TimeGrid,
        martingale_weight: Option<f64>,
    ) -> Result<Self> {
        let n = reference.n_steps();
        if time_grid.n_steps != n {
            return Err(CalibError::Invalid("time grid and reference disagree on steps".into()));
        }
        let maturities: Vec<usize> = instruments.instruments.iter().map(|i| i.maturity_index).collect();
        if maturities.iter().any(|&m| m >= time_grid.calibration_steps.len()) {
            return Err(CalibError::Invalid(
                "instrument maturity index outside the calibration times".into(),
            ));
        }
        let parts = time_grid.partition(&maturities);
        let mut payoffs = Vec::with_capacity(n + 1);
        let mut targets = Vec::with_capacity(n + 1);
        let mut weights = Vec::with_capacity(n + 1);
        for (k, idx) in parts.iter().enumerate() {
            let pts = &reference.grid(k).points;
            let mut g = Array2::zeros((idx.len(), pts.len()));
            for (r, &i) in idx.iter().enumerate() {
                let v = instruments.instruments[i].payoff_vector(pts).values;
                g.row_mut(r).assign(&ndarray::ArrayView1::from(&v));
            }
            payoffs.push(g);
            targets.push(idx.iter().map(|&i| instruments.instruments[i].target_price).collect());
            weights.push(idx.iter().map(|&i| instruments.instruments[i].penalty_weight).collect());
        }
        let initial_marginal = reference.rho0.clone();
        let op = Operator::new(reference, MomentFunction::martingale(), payoffs)?;
        let mut p = Self::new(
            op,
            ConstraintSpec {
                initial_marginal,
                targets,
                weights,
                martingale_weight,
            },
        )?;
        p.instrument_index = parts;
        Ok(p)
    }

    pub fn n_instruments(&self) -> usize {
        self.instrument_index.iter().map(|v| v.len()).sum()
    }

    /// Scatters per-step values back to instrument order.
    pub fn by_instrument(&self, per_step: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.n_instruments()];
        for (idx, vals) in self.instrument_index.iter().zip(per_step) {
            for (&i, &v) in idx.iter().zip(vals) {
                out[i] = v;
            }
        }
        out
    }

    /// Entries of `phi_nu_0` that move (initial law charges the point).
    pub fn mask0(&self) -> Vec<bool> {
        self.constraints.initial_marginal.iter().map(|&p| p > 0.0).collect()
    }

    /// Re-derives the interior `phi_nu_k` from `phi_b_k`.
    pub fn complete(&self, pot: &mut PotentialSet) {
        let n = self.op.n_steps();
        match self.constraints.martingale_weight {
            Some(c) => {
                for k in 1..n {
                    let (nu, b) = (&mut pot.phi_nu[k], &pot.phi_b[k]);
                    for (v, &p) in nu.iter_mut().zip(b) {
                        *v = penalty_conjugate(-p, c);
                    }
                }
            }
            None => {
                for k in 1..n {
                    pot.phi_nu[k].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        pot.phi_nu[n].iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// `||Phi_{n+1} - Phi_n||_inf / ||Phi_n||_inf < tolerance`.
    RelativeChange,
    /// `||s(Phi) - Phi||_inf < tolerance`.
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub stop_rule: StopRule,
    /// Budget in sweeps (fixed-point map evaluations).
    pub max_iterations: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    pub price_tol: f64,
    pub max_price_newton: usize,
    pub anderson: Option<AndersonConfig>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            stop_rule: StopRule::RelativeChange,
            max_iterations: 2000,
            newton_tol: 1e-10,
            max_newton: 50,
            max_halvings: 30,
            price_tol: 1e-11,
            max_price_newton: 100,
            anderson: None,
        }
    }
}

/// `phi_nu_0 = log rho0 - psi_up_0 - psi_down_0`; points outside the
/// support of `rho0` get the log-zero sentinel.
pub fn solve_marginal_initial(rho0: &[f64], psi_up0: &[f64], psi_down0: &[f64]) -> Vec<f64> {
    rho0.iter()
        .zip(psi_up0)
        .zip(psi_down0)
        .map(|((&r, &u), &d)| if r > 0.0 { r.ln() - u - d } else { LOG_ZERO })
        .collect()
}

/// Maximises `-sum_x exp(log_base + Lambda.G) + Lambda.c - h sum Lambda^2/(2 gamma)`
/// by damped Newton, starting from `warm`. At the optimum
/// `E[G_i] = c_i - h Lambda_i / gamma_i`.
#[allow(clippy::too_many_arguments)]
pub fn solve_prices(
    k: usize,
    payoffs: &Array2<f64>,
    targets: &[f64],
    weights: &[f64],
    h: f64,
    log_base: &[f64],
    warm: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let m = targets.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = log_base.len();
    let eval = |lam: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let mut t = log_base.to_vec();
        for (row, &l) in payoffs.rows().into_iter().zip(lam) {
            for (ti, &g) in t.iter_mut().zip(row.iter()) {
                *ti += l * g;
            }
        }
        let w: Vec<f64> = t.iter().map(|&v| v.exp()).collect();
        let mass: f64 = w.iter().sum();
        let mut grad = vec![0.0; m];
        let mut q = -mass;
        for i in 0..m {
            let e: f64 = payoffs.row(i).iter().zip(&w).map(|(g, w)| g * w).sum();
            grad[i] = targets[i] - e - h * lam[i] / weights[i];
            q += lam[i] * targets[i] - 0.5 * h * lam[i] * lam[i] / weights[i];
        }
        (q, grad, w)
    };
    let mut lam = warm.to_vec();
    let (mut q, mut grad, mut w) = eval(&lam);
    let mut polished = false;
    for _ in 0..cfg.max_price_newton {
        let converged = norm_inf(&grad) <= cfg.price_tol;
        if converged && polished {
            return Ok(lam);
        }
        // as in the moment block, one step past the tolerance keeps the
        // sweep map smooth
        polished = converged;
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            let gi = payoffs.row(i);
            for j in 0..=i {
                let gj = payoffs.row(j);
                let mut s = 0.0;
                for x in 0..n {
                    s += w[x] * gi[x] * gj[x];
                }
                hess[(i, j)] = s;
                hess[(j, i)] = s;
            }
            hess[(i, i)] += h / weights[i];
        }
        let g = DVector::from_column_slice(&grad);
        let dir = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => hess.lu().solve(&g).ok_or(CalibError::PriceNewton {
                step: k,
                iterations: 0,
                residual: norm_inf(&grad),
            })?,
        };
        let slope: f64 = dir.dot(&g);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let trial: Vec<f64> = lam.iter().zip(dir.iter()).map(|(l, d)| l + t * d).collect();
            let (qt, gt, wt) = eval(&trial);
            // near the optimum the objective stalls at round-off; a smaller
            // gradient is then the better progress test
            if qt.is_finite() && (qt >= q + 1e-4 * t * slope || norm_inf(&gt) < 0.5 * norm_inf(&grad)) {
                lam = trial;
                q = qt;
                grad = gt;
                w = wt;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let res = norm_inf(&grad);
    if res <= cfg.price_tol * 1e3 {
        Ok(lam)
    } else {
        Err(CalibError::PriceNewton {
            step: k,
            iterations: cfg.max_price_newton,
            residual: res,
        })
    }
}

/// Outcome of one pointwise moment solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSolve {
    pub phi: f64,
    pub residual: f64,
    pub converged: bool,
}

/// Minimises `phi^2/(4c) + log sum_y exp(q_y + phi b_y / h)`, i.e. solves
/// `E_phi[B] + h phi / (2c) = 0`, by Newton with step halving.
pub fn solve_moment_point(q: &[f64], b: &[f64], h: f64, c: f64, start: f64, cfg: &SolverConfig) -> PointSolve {
    let eval = |phi: f64| -> (f64, f64, f64) {
        let s = phi / h;
        let m = q
            .iter()
            .zip(b)
            .map(|(q, b)| q + s * b)
            .fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut e1, mut e2) = (0.0, 0.0, 0.0);
        for (qv, bv) in q.iter().zip(b) {
            let w = (qv + s * bv - m).exp();
            z += w;
            e1 += w * bv;
            e2 += w * bv * bv;
        }
        let (e1, e2) = (e1 / z, e2 / z);
        let val = phi * phi / (4.0 * c) + m + z.ln();
        let grad = phi / (2.0 * c) + e1 / h;
        let hess = 1.0 / (2.0 * c) + (e2 - e1 * e1).max(0.0) / (h * h);
        (val, grad, hess)
    };
    let mut phi = start;
    let (mut val, mut grad, mut hess) = eval(phi);
    for _ in 0..cfg.max_newton {
        if grad.abs() <= cfg.newton_tol {
            // One polishing step keeps the sweep map smooth well below the
            // tolerance, which the accelerated outer loop relies on.
            let trial = phi - grad / hess;
            let (_, g, _) = eval(trial);
            if g.abs() < grad.abs() {
                phi = trial;
                grad = g;
            }
            return PointSolve {
                phi,
                residual: grad.abs(),
                converged: true,
            };
        }
        let step = -grad / hess;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=cfg.max_halvings {
            let trial = phi + t * step;
            let (v, g, hs) = eval(trial);
            if v <= val + 1e-14 * val.abs() || g.abs() < grad.abs() {
                phi = trial;
                val = v;
                grad = g;
                hess = hs;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    PointSolve {
        phi,
        residual: grad.abs(),
        converged: grad.abs() <= cfg.newton_tol,
    }
}

/// Pointwise moment block of transition `k`. Rows flagged as non-convergent
/// keep their previous value; rows outside the support (`psi_up = -inf`)
/// are set to zero. Returns the new `phi_b_k` and the flagged count.
pub fn solve_driftvol(
    problem: &Problem,
    k: usize,
    pot: &PotentialSet,
    psi_up_k: &[f64],
    psi_down_next: &[f64],
    cfg: &SolverConfig,
) -> (Vec<f64>, usize) {
    let c = match problem.constraints.martingale_weight {
        Some(c) => c,
        None => return (vec![0.0; psi_up_k.len()], 0),
    };
    let op = &problem.op;
    let h = op.h();
    let right: Vec<f64> = op
        .arrival(k + 1, pot)
        .iter()
        .zip(psi_down_next)
        .map(|(a, d)| a + d)
        .collect();
    let lk = op.reference.log_kernel(k);
    let bm = op.moment(k);
    let res: Vec<(f64, bool)> = (0..psi_up_k.len())
        .into_par_iter()
        .map(|i| {
            if psi_up_k[i] == LOG_ZERO {
                return (0.0, true);
            }
            let q: Vec<f64> = lk.row(i).iter().zip(&right).map(|(l, r)| l + r).collect();
            let b = bm.row(i);
            let s = solve_moment_point(&q, b.as_slice().unwrap(), h, c, pot.phi_b[k][i], cfg);
            if s.converged {
                (s.phi, true)
            } else {
                (pot.phi_b[k][i], false)
            }
        })
        .collect();
    let flagged = res.iter().filter(|r| !r.1).count();
    if flagged > 0 {
        log::debug!("moment block {k}: {flagged} points did not converge");
    }
    (res.into_iter().map(|r| r.0).collect(), flagged)
}

/// Statistics of one sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SweepStats {
    pub flagged_points: usize,
}

/// One full sweep in place: downward pass for `psi_down`, then the upward
/// pass interleaving the block solves with the forward propagation.
pub fn sinkhorn_sweep(problem: &Problem, pot: &mut PotentialSet, cfg: &SolverConfig) -> Result<SweepStats> {
    let op = &problem.op;
    let n = op.n_steps();
    let cons = &problem.constraints;
    problem.complete(pot);
    let mut psi_down = op.backward_sweep(pot)?;
    let mut psi_up = op.reference.log_rho0();
    let mut stats = SweepStats::default();
    for k in 0..n {
        if let Some(c) = cons.martingale_weight {
            let (pb, flagged) = solve_driftvol(problem, k, pot, &psi_up, &psi_down[k + 1], cfg);
            stats.flagged_points += flagged;
            if k > 0 {
                pot.phi_nu[k] = pb.iter().map(|&p| penalty_conjugate(-p, c)).collect();
            }
            pot.phi_b[k] = pb;
            psi_down[k] = op.backward_step(k, &psi_down[k + 1], pot)?;
        }
        if k == 0 {
            pot.phi_nu[0] = solve_marginal_initial(&cons.initial_marginal, &psi_up, &psi_down[0]);
        } else {
            update_prices(problem, k, pot, &psi_up, &psi_down[k], cfg)?;
        }
        psi_up = op.forward_step(k, &psi_up, pot)?;
    }
    update_prices(problem, n, pot, &psi_up, &psi_down[n], cfg)?;
    Ok(stats)
}

fn update_prices(
    problem: &Problem,
    k: usize,
    pot: &mut PotentialSet,
    psi_up: &[f64],
    psi_down: &[f64],
    cfg: &SolverConfig,
) -> Result<()> {
    let op = &problem.op;
    if op.payoffs[k].nrows() == 0 {
        return Ok(());
    }
    let base: Vec<f64> = psi_up
        .iter()
        .zip(&pot.phi_nu[k])
        .zip(psi_down)
        .map(|((u, p), d)| u + p + d)
        .collect();
    pot.lambdas[k] = solve_prices(
        k,
        &op.payoffs[k],
        &problem.constraints.targets[k],
        &problem.constraints.weights[k],
        op.h(),
        &base,
        &pot.lambdas[k],
        cfg,
    )?;
    Ok(())
}

/// Quality measures of a potential set, all computed on consistent
/// propagators.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub total_mass: f64,
    /// Model prices `E[G_i]` under the normalised measure, per step.
    pub model_prices: Vec<Vec<f64>>,
    pub price_err_l2: f64,
    /// `sqrt(h sum_k E[b_k(X_k)^2])`.
    pub mart_err_l2: f64,
    pub dual_objective: f64,
}

impl Diagnostics {
    pub fn relative_price_errors(&self, problem: &Problem) -> Vec<f64> {
        let per_step: Vec<Vec<f64>> = self
            .model_prices
            .iter()
            .zip(&problem.constraints.targets)
            .map(|(m, c)| m.iter().zip(c).map(|(m, c)| (m - c).abs() / c.abs()).collect())
            .collect();
        problem.by_instrument(&per_step)
    }
}

/// Dual objective at `pot` (interior `phi_nu` assumed completed).
pub fn dual_objective(problem: &Problem, pot: &PotentialSet, props: &Propagators) -> f64 {
    let op = &problem.op;
    let h = op.h();
    let cons = &problem.constraints;
    let mass = op.total_mass(pot, props);
    let mut j = h * (1.0 - mass);
    for (&r, &p) in cons.initial_marginal.iter().zip(&pot.phi_nu[0]) {
        if r > 0.0 {
            j += h * r * p;
        }
    }
    if let Some(c) = cons.martingale_weight {
        for (&r, &p) in cons.initial_marginal.iter().zip(&pot.phi_b[0]) {
            j -= h * r * penalty_conjugate(-p, c);
        }
    }
    for k in 0..=op.n_steps() {
        for ((&l, &c), &g) in pot.lambdas[k].iter().zip(&cons.targets[k]).zip(&cons.weights[k]) {
            j += h * l * c - h * h * l * l / (2.0 * g);
        }
    }
    j
}

/// Primal objective of the (un-normalised) tilted measure: `h` times the
/// generalised KL to the reference, plus the moment and price penalties.
pub fn primal_objective(problem: &Problem, pot: &PotentialSet, props: &Propagators) -> f64 {
    let op = &problem.op;
    let h = op.h();
    let cons = &problem.constraints;
    let mut e_u = 0.0;
    let mut mass = 0.0;
    let mut penalty = 0.0;
    for k in 0..=op.n_steps() {
        let nu = op.marginal(k, pot, props);
        let a = op.arrival(k, pot);
        for (&v, &ak) in nu.iter().zip(&a) {
            if v > 0.0 {
                e_u += v * ak;
            }
        }
        if k == 0 {
            mass = nu.iter().sum();
        }
        for (i, row) in op.payoffs[k].rows().into_iter().enumerate() {
            let e: f64 = row.iter().zip(&nu).map(|(g, v)| g * v).sum();
            penalty += 0.5 * cons.weights[k][i] * (e - cons.targets[k][i]).powi(2);
        }
        if k < op.n_steps() {
            let joint = op.pairwise_joint(k, pot, props);
            let bm = op.moment(k);
            for (i, row) in joint.rows().into_iter().enumerate() {
                let eb: f64 = row.iter().zip(bm.row(i)).map(|(p, b)| p * b).sum();
                e_u += pot.phi_b[k][i] * eb / h;
                if let Some(c) = cons.martingale_weight {
                    if nu[i] > 0.0 {
                        let b = eb / (h * nu[i]);
                        penalty += h * nu[i] * c * b * b;
                    }
                }
            }
        }
    }
    h * (e_u - mass + 1.0) + penalty
}

pub fn evaluate(problem: &Problem, pot: &PotentialSet) -> Result<(Propagators, Diagnostics)> {
    let op = &problem.op;
    let props = op.propagators(pot)?;
    let total = op.total_mass(pot, &props);
    let mut model_prices = Vec::with_capacity(op.n_steps() + 1);
    let mut sq = 0.0;
    for k in 0..=op.n_steps() {
        let nu = op.marginal(k, pot, &props);
        let prices: Vec<f64> = op.payoffs[k]
            .rows()
            .into_iter()
            .map(|g| g.iter().zip(&nu).map(|(g, v)| g * v).sum::<f64>() / total)
            .collect();
        for (p, c) in prices.iter().zip(&problem.constraints.targets[k]) {
            sq += (p - c).powi(2);
        }
        model_prices.push(prices);
    }
    let mut mart = 0.0;
    for k in 0..op.n_steps() {
        let cm = op.conditional_moments(k, pot, &props);
        for (m, b) in cm.mass.iter().zip(&cm.b) {
            if *m > 0.0 {
                mart += m * b * b;
            }
        }
    }
    let diag = Diagnostics {
        total_mass: total,
        model_prices,
        price_err_l2: sq.sqrt(),
        mart_err_l2: (op.h() * mart / total).sqrt(),
        dual_objective: dual_objective(problem, pot, &props),
    };
    Ok((props, diag))
}

/// One row of the residual log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sweeps: usize,
    pub accepted: bool,
    pub e_max: f64,
    pub residual_inf: f64,
    pub price_err_l2: f64,
    pub mart_err_l2: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub converged: bool,
    pub iterations: usize,
    pub sweeps: usize,
    pub rejections: usize,
    /// Moment-block points left unconverged by the last sweep.
    pub flagged_points: usize,
    pub records: Vec<IterationRecord>,
    pub diagnostics: Diagnostics,
    pub elapsed_secs: f64,
}

fn relative_change(new: &[f64], old: &[f64]) -> f64 {
    let diff = new.iter().zip(old).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let den = norm_inf(old);
    if den < 1e-30 {
        diff
    } else {
        diff / den
    }
}

/// Runs sweeps from zero potentials until the stop rule fires or the sweep
/// budget is spent. Non-convergence is reported, not raised.
pub fn run(problem: &Problem, cfg: &SolverConfig) -> Result<(PotentialSet, RunReport)> {
    let mut init = problem.op.zero_potentials();
    problem.complete(&mut init);
    run_from(problem, cfg, init)
}

pub fn run_from(problem: &Problem, cfg: &SolverConfig, init: PotentialSet) -> Result<(PotentialSet, RunReport)> {
    if !(cfg.tolerance > 0.0) || cfg.max_iterations == 0 {
        return Err(CalibError::Invalid(
            "solver tolerance and budget must be positive".into(),
        ));
    }
    let start = Instant::now();
    let mask0 = problem.mask0();
    let template = init.clone();
    let flagged = Cell::new(0usize);
    let to_pot = |x: &[f64]| {
        let mut p = template.clone();
        p.unflatten(x, &mask0);
        problem.complete(&mut p);
        p
    };
    let map = |x: &[f64]| -> Result<Vec<f64>> {
        let mut p = to_pot(x);
        let stats = sinkhorn_sweep(problem, &mut p, cfg)?;
        flagged.set(stats.flagged_points);
        Ok(p.flatten(&mask0))
    };
    let mut records = Vec::new();
    let mut failure: Option<CalibError> = None;
    let observer = |s: &crate::acceleration::StepInfo| -> bool {
        let e_max = relative_change(s.x, s.previous);
        let (price, mart) = match evaluate(problem, &to_pot(s.x)) {
            Ok((_, d)) => (d.price_err_l2, d.mart_err_l2),
            Err(e) => {
                failure = Some(e);
                return true;
            }
        };
        if !(e_max.is_finite() && price.is_finite() && mart.is_finite()) {
            failure = Some(CalibError::NonFinite(format!("residuals at iteration {}", s.iteration)));
            return true;
        }
        records.push(IterationRecord {
            iteration: s.iteration,
            sweeps: s.evaluations,
            accepted: s.accepted,
            e_max,
            residual_inf: norm_inf(s.residual),
            price_err_l2: price,
            mart_err_l2: mart,
        });
        log::trace!(
            "iteration {} e_max {e_max:.3e} price {price:.3e} mart {mart:.3e}",
            s.iteration
        );
        cfg.stop_rule == StopRule::RelativeChange && e_max < cfg.tolerance
    };
    let aa = cfg.anderson.clone().unwrap_or_else(AndersonConfig::plain);
    let stop_tol = match cfg.stop_rule {
        StopRule::Residual => cfg.tolerance,
        StopRule::RelativeChange => 0.0,
    };
    let outcome = anderson_solve(init.flatten(&mask0), map, &aa, stop_tol, cfg.max_iterations, observer)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let pot = to_pot(&outcome.x);
    let (_, diagnostics) = evaluate(problem, &pot)?;
    let report = RunReport {
        converged: outcome.converged,
        iterations: outcome.iterations,
        sweeps: outcome.evaluations,
        rejections: outcome.rejections,
        flagged_points: flagged.get(),
        records,
        diagnostics,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    Ok((pot, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretization::{build_reference, InitialLaw, SpaceGrid, StepCoefficients};

    fn toy_reference(n_steps: usize, n_points: usize, initial: InitialLaw) -> ReferenceMeasure {
        let g = SpaceGrid::new(-0.6, 0.6, n_points).unwrap();
        let grids = vec![g; n_steps + 1];
        let coeffs = StepCoefficients::martingale(&grids, |_, _| 0.04);
        build_reference(grids, 0.2, coeffs, initial).unwrap()
    }

    fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let flo = f(lo);
        assert!(flo * f(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn moment_point_matches_bisection() {
        let q = [-0.3f64, -1.1, -2.0];
        let b = [0.4f64, -0.1, -0.6];
        let (h, c) = (0.05, 3.0);
        let cfg = SolverConfig::default();
        let s = solve_moment_point(&q, &b, h, c, 0.0, &cfg);
        assert!(s.converged);
        let oracle = bisect(-100.0, 100.0, |phi| {
            let t: Vec<f64> = q.iter().zip(&b).map(|(q, b)| q + phi * b / h).collect();
            let m = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = t.iter().map(|t| (t - m).exp()).collect();
            let z: f64 = w.iter().sum();
            let e: f64 = w.iter().zip(&b).map(|(w, b)| w * b).sum::<f64>() / z;
            e + h * phi / (2.0 * c)
        });
        assert!((s.phi - oracle).abs() < 1e-10, "{} vs {oracle}", s.phi);
    }

    #[test]
    fn moment_point_is_zero_for_centred_row() {
        let q = [0.0f64, 0.0];
        let b = [0.5f64, -0.5];
        let s = solve_moment_point(&q, &b, 0.1, 1e4, 0.0, &SolverConfig::default());
        assert_eq!(s.phi, 0.0);
    }

    #[test]
    fn single_price_matches_bisection() {
        let g = Array2::from_shape_vec((1, 5), vec![0.0, 0.0, 0.1, 0.3, 0.6]).unwrap();
        let base: Vec<f64> = [0.1f64, 0.2, 0.4, 0.2, 0.1].iter().map(|v| v.ln()).collect();
        let (c, gamma, h) = (0.2, 50.0, 0.1);
        let lam = solve_prices(1, &g, &[c], &[gamma], h, &base, &[0.0], &SolverConfig::default()).unwrap()[0];
        let oracle = bisect(-50.0, 50.0, |l| {
            let e: f64 = base.iter().zip(g.row(0)).map(|(b, g)| (b + l * g).exp() * g).sum();
            c - e - h * l / gamma
        });
        assert!((lam - oracle).abs() < 1e-10);
    }

    #[test]
    fn stationary_prices_give_zero_multiplier() {
        let g = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 0.5, 2.0]).unwrap();
        let base: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|v| v.ln()).collect();
        let lam = solve_prices(
            1,
            &g,
            &[0.5, 0.55],
            &[1.0, 1.0],
            0.1,
            &base,
            &[0.0, 0.0],
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(lam.iter().all(|l| l.abs() < 1e-14));
    }

    #[test]
    fn gamma_sweep_tightens_constraint() {
        let g = Array2::from_shape_vec((1, 5), vec![0.0, 0.0, 0.1, 0.3, 0.6]).unwrap();
        let base: Vec<f64> = [0.1f64, 0.2, 0.4, 0.2, 0.1].iter().map(|v| v.ln()).collect();
        let mut prev = f64::INFINITY;
        for gamma in [1.0, 10.0, 100.0, 1e3, 1e4] {
            let lam = solve_prices(1, &g, &[0.2], &[gamma], 0.1, &base, &[0.0], &SolverConfig::default()).unwrap()[0];
            let e: f64 = base.iter().zip(g.row(0)).map(|(b, g)| (b + lam * g).exp() * g).sum();
            let err = (e - 0.2).abs();
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn initial_marginal_update_is_exact() {
        let r = toy_reference(3, 9, InitialLaw::Gaussian { mean: 0.0, std: 0.2 });
        let rho = r.rho0.clone();
        let op = Operator::unconstrained(r, MomentFunction::martingale()).unwrap();
        let mut pot = op.zero_potentials();
        for (i, v) in pot.phi_b[0].iter_mut().enumerate() {
            *v = 0.3 * i as f64 - 1.0;
        }
        pot.phi_nu[2][3] = 0.7;
        let props = op.propagators(&pot).unwrap();
        pot.phi_nu[0] = solve_marginal_initial(&rho, &props.psi_up[0], &props.psi_down[0]);
        let props = op.propagators(&pot).unwrap();
        let nu = op.marginal(0, &pot, &props);
        for (a, b) in nu.iter().zip(&rho) {
            assert!((a - b).abs() < 1e-13);
        }
        let again = solve_marginal_initial(&rho, &props.psi_up[0], &props.psi_down[0]);
        for (a, b) in again.iter().zip(&pot.phi_nu[0]) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    fn toy_problem(c_mart: Option<f64>) -> Problem {
        let r = toy_reference(3, 15, InitialLaw::Dirac { x0: 0.0 });
        let pts = r.grid(3).points.clone();
        let mid = r.grid(2).points.clone();
        let call = |k: f64, xs: &[f64]| xs.iter().map(|x| (x.exp() - k).max(0.0)).collect::<Vec<f64>>();
        let mut payoffs = vec![Array2::zeros((0, 15)); 4];
        payoffs[2] = Array2::from_shape_vec((1, 15), call(1.0, &mid)).unwrap();
        let mut g3 = call(0.95, &pts);
        g3.extend(call(1.1, &pts));
        payoffs[3] = Array2::from_shape_vec((2, 15), g3).unwrap();
        let rho = r.rho0.clone();
        let op = Operator::new(r, MomentFunction::martingale(), payoffs).unwrap();
        Problem::new(
            op,
            ConstraintSpec {
                initial_marginal: rho,
                targets: vec![vec![], vec![], vec![0.06], vec![0.11, 0.035]],
                weights: vec![vec![], vec![], vec![1e3], vec![1e3, 1e3]],
                martingale_weight: c_mart,
            },
        )
        .unwrap()
    }

    #[test]
    fn sweep_blocks_increase_dual() {
        let p = toy_problem(Some(5.0));
        let cfg = SolverConfig::default();
        let mut pot = p.op.zero_potentials();
        p.complete(&mut pot);
        let mut prev = dual_objective(&p, &pot, &p.op.propagators(&pot).unwrap());
        for _ in 0..20 {
            sinkhorn_sweep(&p, &mut pot, &cfg).unwrap();
            let j = dual_objective(&p, &pot, &p.op.propagators(&pot).unwrap());
            assert!(j >= prev - 1e-12 * prev.abs().max(1.0), "{j} < {prev}");
            prev = j;
        }
    }

    #[test]
    fn duality_gap_closes() {
        let p = toy_problem(Some(5.0));
        let cfg = SolverConfig {
            tolerance: 1e-12,
            stop_rule: StopRule::Residual,
            max_iterations: 20_000,
            ..SolverConfig::default()
        };
        let (pot, rep) = run(&p, &cfg).unwrap();
        assert!(rep.converged);
        let props = p.op.propagators(&pot).unwrap();
        let primal = primal_objective(&p, &pot, &props);
        let dual = dual_objective(&p, &pot, &props);
        assert!((primal - dual).abs() < 1e-9, "primal {primal} dual {dual}");
        assert!((rep.diagnostics.total_mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn moment_residuals_vanish_after_block() {
        let p = toy_problem(Some(5.0));
        let cfg = SolverConfig::default();
        let mut pot = p.op.zero_potentials();
        p.complete(&mut pot);
        sinkhorn_sweep(&p, &mut pot, &cfg).unwrap();
        let psi_down = p.op.backward_sweep(&pot).unwrap();
        let psi_up = p.op.forward_sweep(&pot).unwrap();
        let (pb, flagged) = solve_driftvol(&p, 2, &pot, &psi_up[2], &psi_down[3], &cfg);
        assert_eq!(flagged, 0);
        pot.phi_b[2] = pb;
        p.complete(&mut pot);
        // pointwise optimality read off the tilted joint: b + phi / (2c) = 0
        let props = p.op.propagators(&pot).unwrap();
        let cm = p.op.conditional_moments(2, &pot, &props);
        for (b, phi) in cm.b.iter().zip(&pot.phi_b[2]) {
            assert!((b + phi / 10.0).abs() < 1e-9, "{b} {phi}");
        }
    }

    #[test]
    fn c_mart_sweep_drives_martingale_error_down() {
        let cfg = SolverConfig {
            tolerance: 1e-10,
            max_iterations: 20_000,
            ..SolverConfig::default()
        };
        let mut prev = f64::INFINITY;
        for c in [1.0, 10.0, 100.0, 1000.0] {
            let (_, rep) = run(&toy_problem(Some(c)), &cfg).unwrap();
            assert!(rep.diagnostics.mart_err_l2 < prev, "c = {c}");
            prev = rep.diagnostics.mart_err_l2;
        }
    }

    #[test]
    fn reference_is_a_fixed_point() {
        let r = toy_reference(4, 21, InitialLaw::Gaussian { mean: 0.0, std: 0.1 });
        let rho = r.rho0.clone();
        let op = Operator::unconstrained(r, MomentFunction::martingale()).unwrap();
        let p = Problem::new(
            op,
            ConstraintSpec {
                initial_marginal: rho,
                targets: vec![vec![]; 5],
                weights: vec![vec![]; 5],
                martingale_weight: None,
            },
        )
        .unwrap();
        let (pot, rep) = run(&p, &SolverConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 1);
        assert!(pot.phi_nu.iter().flatten().all(|v| v.abs() < 1e-13));
    }
}
