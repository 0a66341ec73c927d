//! Dual potentials, the forward/backward log-domain propagators and the
//! quantities of the tilted measure they induce (marginals, pairwise joints,
//! conditional moments).
//!
//! The tilted path log-density is
//! `sum_k a_k(x_k) + sum_{k<N} phi_b_k(x_k) B(x_k, x_{k+1}) / h`
//! with `a_k = phi_nu_k + Lambda_k . G_k`, taken relative to the reference
//! chain.

pub mod entropy;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

use crate::discretization::ReferenceMeasure;
use crate::error::{CalibError, Result};

pub use entropy::{chain_kl, gaussian_kl, specific_entropy_rate};

/// Log of zero; entries carrying it never move and never enter `exp`
/// un-shifted.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// `log sum exp(v)` with max-shift; `-inf` when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Streaming version over an iterator; avoids a temporary buffer.
fn lse_iter(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + it.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Scalar moment function `B(x, y)` of a transition.
#[derive(Clone, Copy)]
pub struct MomentFunction {
    pub name: &'static str,
    pub eval: fn(f64, f64) -> f64,
}

impl std::fmt::Debug for MomentFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MomentFunction").field("name", &self.name).finish()
    }
}

fn martingale_moment(x: f64, y: f64) -> f64 {
    1.0 - (y - x).exp()
}

impl MomentFunction {
    /// `B(x, y) = 1 - e^{y - x}`: vanishes in conditional mean iff `e^X` is a
    /// martingale.
    pub fn martingale() -> Self {
        Self {
            name: "martingale",
            eval: martingale_moment,
        }
    }
}

/// Dual variables. `phi_b` has one entry per transition; `lambdas[k]` holds
/// the multipliers of the price constraints settled at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSet {
    pub phi_nu: Vec<Vec<f64>>,
    pub phi_b: Vec<Vec<f64>>,
    pub lambdas: Vec<Vec<f64>>,
}

impl PotentialSet {
    pub fn zeros(sizes: &[usize], constraints_per_step: &[usize]) -> Self {
        let n = sizes.len();
        Self {
            phi_nu: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            phi_b: sizes[..n - 1].iter().map(|&s| vec![0.0; s]).collect(),
            lambdas: constraints_per_step.iter().map(|&m| vec![0.0; m]).collect(),
        }
    }

    pub fn is_finite_or_sentinel(&self) -> bool {
        let ok = |v: &Vec<f64>| v.iter().all(|x| x.is_finite() || *x == LOG_ZERO);
        self.phi_nu.iter().all(ok)
            && self.phi_b.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.lambdas.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Concatenates every moving entry: finite `phi_nu_0` entries selected by
    /// `mask0`, interior `phi_nu` are excluded (they are functions of
    /// `phi_b`), then all `phi_b`, then all multipliers.
    pub fn flatten(&self, mask0: &[bool]) -> Vec<f64> {
        let mut out: Vec<f64> = self.phi_nu[0]
            .iter()
            .zip(mask0)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        for v in &self.phi_b {
            out.extend_from_slice(v);
        }
        for v in &self.lambdas {
            out.extend_from_slice(v);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for the moving entries; the
    /// caller re-derives interior `phi_nu` from `phi_b`.
    pub fn unflatten(&mut self, flat: &[f64], mask0: &[bool]) {
        let mut it = flat.iter().copied();
        for (v, &m) in self.phi_nu[0].iter_mut().zip(mask0) {
            if m {
                *v = it.next().expect("flat vector too short");
            }
        }
        for v in self.phi_b.iter_mut().chain(self.lambdas.iter_mut()) {
            for x in v.iter_mut() {
                *x = it.next().expect("flat vector too short");
            }
        }
        debug_assert!(it.next().is_none(), "flat vector too long");
    }
}

/// Forward and backward log-domain accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagators {
    pub psi_up: Vec<Vec<f64>>,
    pub psi_down: Vec<Vec<f64>>,
}

/// Per-point conditional moments of one transition. Rows with no mass carry
/// `NaN` and `mass = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mass: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma2: Vec<f64>,
}

/// Moments from a joint on `x × y`: drift `beta`, second moment `alpha`,
/// general moment `b` and the local variance `alpha - h beta^2`.
pub fn conditional_moments(
    joint: &Array2<f64>,
    x: &[f64],
    y: &[f64],
    moment: &Array2<f64>,
    h: f64,
) -> ConditionalMoments {
    let n = x.len();
    let mut out = ConditionalMoments {
        mass: vec![0.0; n],
        beta: vec![f64::NAN; n],
        alpha: vec![f64::NAN; n],
        b: vec![f64::NAN; n],
        sigma2: vec![f64::NAN; n],
    };
    for i in 0..n {
        let row = joint.row(i);
        let mass: f64 = row.sum();
        out.mass[i] = mass;
        if !(mass > 0.0) {
            continue;
        }
        let (mut m1, mut m2, mut mb) = (0.0, 0.0, 0.0);
        for (j, &p) in row.iter().enumerate() {
            let d = y[j] - x[i];
            m1 += p * d;
            m2 += p * d * d;
            mb += p * moment[[i, j]];
        }
        let beta = m1 / (mass * h);
        let alpha = m2 / (mass * h);
        out.beta[i] = beta;
        out.alpha[i] = alpha;
        out.b[i] = mb / (mass * h);
        out.sigma2[i] = alpha - h * beta * beta;
    }
    out
}

/// The reference chain together with the tabulated moment function and the
/// payoff matrices of every step: everything needed to evaluate the tilted
/// measure for a given set of potentials.
#[derive(Debug, Clone)]
pub struct Operator {
    pub reference: ReferenceMeasure,
    pub moment_fn: MomentFunction,
    /// `B(x_k, x_{k+1})` per transition, and its transpose.
    moments: Vec<Array2<f64>>,
    moments_t: Vec<Array2<f64>>,
    /// Payoffs settled at step `k`: shape `(|I_k|, n_k)`.
    pub payoffs: Vec<Array2<f64>>,
}

impl Operator {
    /// `payoffs[k]` rows are the payoff vectors of the constraints at step k;
    /// pass empty (0-row) matrices for steps without constraints.
    pub fn new(reference: ReferenceMeasure, moment_fn: MomentFunction, payoffs: Vec<Array2<f64>>) -> Result<Self> {
        let n = reference.n_steps();
        if payoffs.len() != n + 1 {
            return Err(CalibError::Invalid(format!(
                "expected {} payoff blocks, got {}",
                n + 1,
                payoffs.len()
            )));
        }
        for (k, p) in payoffs.iter().enumerate() {
            if p.nrows() > 0 && p.ncols() != reference.grid(k).len() {
                return Err(CalibError::Invalid(format!(
                    "payoff block {k} has {} columns, grid has {}",
                    p.ncols(),
                    reference.grid(k).len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(CalibError::NonFinite(format!("payoff block {k}")));
            }
        }
        let mut moments = Vec::with_capacity(n);
        let mut moments_t = Vec::with_capacity(n);
        for k in 0..n {
            let xs = &reference.grid(k).points;
            let ys = &reference.grid(k + 1).points;
            let m = Array2::from_shape_fn((xs.len(), ys.len()), |(i, j)| (moment_fn.eval)(xs[i], ys[j]));
            moments_t.push(m.t().as_standard_layout().to_owned());
            moments.push(m);
        }
        let payoffs = payoffs
            .into_iter()
            .enumerate()
            .map(|(k, p)| {
                if p.nrows() == 0 {
                    Array2::zeros((0, reference.grid(k).len()))
                } else {
                    p
                }
            })
            .collect();
        Ok(Self {
            reference,
            moment_fn,
            moments,
            moments_t,
            payoffs,
        })
    }

    /// Operator without price constraints.
    pub fn unconstrained(reference: ReferenceMeasure, moment_fn: MomentFunction) -> Result<Self> {
        let payoffs = reference.grids.iter().map(|g| Array2::zeros((0, g.len()))).collect();
        Self::new(reference, moment_fn, payoffs)
    }

    pub fn n_steps(&self) -> usize {
        self.reference.n_steps()
    }

    pub fn h(&self) -> f64 {
        self.reference.h
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.reference.grids.iter().map(|g| g.len()).collect()
    }

    pub fn constraints_per_step(&self) -> Vec<usize> {
        self.payoffs.iter().map(|p| p.nrows()).collect()
    }

    pub fn zero_potentials(&self) -> PotentialSet {
        PotentialSet::zeros(&self.sizes(), &self.constraints_per_step())
    }

    pub fn moment(&self, k: usize) -> &Array2<f64> {
        &self.moments[k]
    }

    /// `Lambda_k . G_k(x)` per grid point.
    pub fn price_tilt(&self, k: usize, lambdas: &[f64]) -> Vec<f64> {
        let g = &self.payoffs[k];
        let mut out = vec![0.0; g.ncols()];
        for (row, &l) in g.rows().into_iter().zip(lambdas) {
            if l != 0.0 {
                for (o, &v) in out.iter_mut().zip(row.iter()) {
                    *o += l * v;
                }
            }
        }
        out
    }

    /// Arrival term `a_k = phi_nu_k + Lambda_k . G_k`.
    pub fn arrival(&self, k: usize, pot: &PotentialSet) -> Vec<f64> {
        let mut a = self.price_tilt(k, &pot.lambdas[k]);
        for (o, &p) in a.iter_mut().zip(&pot.phi_nu[k]) {
            *o += p;
        }
        a
    }

    /// `L_k(x, y) = B(x, y) phi_b_k(x) / h + a_k(x) + log P(x, y)`.
    pub fn transition_log_tilt(&self, k: usize, pot: &PotentialSet) -> Array2<f64> {
        let h = self.h();
        let a = self.arrival(k, pot);
        let mut l = self.reference.log_kernel(k).clone();
        let b = &self.moments[k];
        for (i, mut row) in l.axis_iter_mut(Axis(0)).enumerate() {
            let (pb, ai) = (pot.phi_b[k][i], a[i]);
            for (j, v) in row.iter_mut().enumerate() {
                *v += b[[i, j]] * pb / h + ai;
            }
        }
        l
    }

    /// `psi_up_{k+1}(y) = LSE_x[psi_up_k(x) + a_k(x) + phi_b_k(x) B(x,y)/h + log P(x,y)]`.
    pub fn forward_step(&self, k: usize, psi_up_k: &[f64], pot: &PotentialSet) -> Result<Vec<f64>> {
        let h = self.h();
        let a = self.arrival(k, pot);
        let src: Vec<f64> = psi_up_k.iter().zip(&a).map(|(p, a)| p + a).collect();
        let pb = &pot.phi_b[k];
        let lk = self.reference.log_kernel_t(k);
        let bt = &self.moments_t[k];
        let out: Vec<f64> = (0..lk.nrows())
            .into_par_iter()
            .map(|j| {
                let lrow = lk.row(j);
                let brow = bt.row(j);
                let (lrow, brow) = (lrow.as_slice().unwrap(), brow.as_slice().unwrap());
                lse_iter((0..src.len()).map(|i| src[i] + pb[i] * brow[i] / h + lrow[i]))
            })
            .collect();
        if let Some(j) = out.iter().position(|v| *v == f64::NEG_INFINITY) {
            return Err(CalibError::DegenerateMass { step: k + 1, index: j });
        }
        if out.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(CalibError::NonFinite(format!("forward propagator at step {}", k + 1)));
        }
        Ok(out)
    }

    /// `psi_down_k(x) = LSE_y[log P(x,y) + phi_b_k(x) B(x,y)/h + a_{k+1}(y) + psi_down_{k+1}(y)]`.
    pub fn backward_step(&self, k: usize, psi_down_next: &[f64], pot: &PotentialSet) -> Result<Vec<f64>> {
        let h = self.h();
        let a = self.arrival(k + 1, pot);
        let dst: Vec<f64> = psi_down_next.iter().zip(&a).map(|(p, a)| p + a).collect();
        let pb = &pot.phi_b[k];
        let lk = self.reference.log_kernel(k);
        let bm = &self.moments[k];
        let out: Vec<f64> = (0..lk.nrows())
            .into_par_iter()
            .map(|i| {
                let lrow = lk.row(i);
                let brow = bm.row(i);
                let (lrow, brow) = (lrow.as_slice().unwrap(), brow.as_slice().unwrap());
                let t = pb[i] / h;
                lse_iter((0..dst.len()).map(|j| lrow[j] + t * brow[j] + dst[j]))
            })
            .collect();
        if out.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(CalibError::NonFinite(format!("backward propagator at step {k}")));
        }
        Ok(out)
    }

    pub fn forward_sweep(&self, pot: &PotentialSet) -> Result<Vec<Vec<f64>>> {
        let mut psi = Vec::with_capacity(self.n_steps() + 1);
        psi.push(self.reference.log_rho0());
        for k in 0..self.n_steps() {
            let next = self.forward_step(k, &psi[k], pot)?;
            psi.push(next);
        }
        Ok(psi)
    }

    pub fn backward_sweep(&self, pot: &PotentialSet) -> Result<Vec<Vec<f64>>> {
        let n = self.n_steps();
        let mut psi = vec![Vec::new(); n + 1];
        psi[n] = vec![0.0; self.reference.grid(n).len()];
        for k in (0..n).rev() {
            psi[k] = self.backward_step(k, &psi[k + 1], pot)?;
        }
        Ok(psi)
    }

    pub fn propagators(&self, pot: &PotentialSet) -> Result<Propagators> {
        Ok(Propagators {
            psi_up: self.forward_sweep(pot)?,
            psi_down: self.backward_sweep(pot)?,
        })
    }

    /// `log nu_k = psi_up_k + a_k + psi_down_k`.
    pub fn log_marginal(&self, k: usize, pot: &PotentialSet, props: &Propagators) -> Vec<f64> {
        self.arrival(k, pot)
            .iter()
            .zip(&props.psi_up[k])
            .zip(&props.psi_down[k])
            .map(|((a, u), d)| a + u + d)
            .collect()
    }

    pub fn marginal(&self, k: usize, pot: &PotentialSet, props: &Propagators) -> Vec<f64> {
        self.log_marginal(k, pot, props).into_iter().map(f64::exp).collect()
    }

    /// Total mass of the (un-normalised) tilted measure.
    pub fn total_mass(&self, pot: &PotentialSet, props: &Propagators) -> f64 {
        log_sum_exp(&self.log_marginal(0, pot, props)).exp()
    }

    /// Pairwise joint of `(X_k, X_{k+1})` under the tilted measure.
    pub fn pairwise_joint(&self, k: usize, pot: &PotentialSet, props: &Propagators) -> Array2<f64> {
        let mut l = self.transition_log_tilt(k, pot);
        let right: Vec<f64> = self
            .arrival(k + 1, pot)
            .iter()
            .zip(&props.psi_down[k + 1])
            .map(|(a, d)| a + d)
            .collect();
        for (i, mut row) in l.axis_iter_mut(Axis(0)).enumerate() {
            let u = props.psi_up[k][i];
            for (v, r) in row.iter_mut().zip(&right) {
                *v = (*v + u + r).exp();
            }
        }
        l
    }

    pub fn conditional_moments(&self, k: usize, pot: &PotentialSet, props: &Propagators) -> ConditionalMoments {
        let joint = self.pairwise_joint(k, pot, props);
        conditional_moments(
            &joint,
            &self.reference.grid(k).points,
            &self.reference.grid(k + 1).points,
            &self.moments[k],
            self.h(),
        )
    }
}
