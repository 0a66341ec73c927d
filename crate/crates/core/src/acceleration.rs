//! Safeguarded Anderson acceleration for a fixed-point map `s`, with
//! residual `g(x) = s(x) - x`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Ridge added to the Gram matrix of residual differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Ridge {
    /// `value * ||G^T G||_inf`.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AndersonConfig {
    /// Number of stored `(x, g)` pairs; depth 1 is the plain iteration.
    pub depth: usize,
    pub ridge: Ridge,
    /// Safeguard: accept only if `||g(candidate)||_2 <= tau ||g(x)||_2`.
    pub tau: f64,
}

impl Default for AndersonConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            ridge: Ridge::Relative(1e-10),
            tau: 2.0,
        }
    }
}

impl AndersonConfig {
    pub fn plain() -> Self {
        Self {
            depth: 1,
            ..Self::default()
        }
    }
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||g||_inf < tol`, strictly.
pub fn stop_check(residual: &[f64], tol: f64) -> bool {
    norm_inf(residual) < tol
}

/// Simplex weights implied by `gamma` (oldest pair first); they sum to one.
pub fn alpha_weights(gamma: &[f64]) -> Vec<f64> {
    let p = gamma.len();
    if p == 0 {
        return vec![1.0];
    }
    let mut a = Vec::with_capacity(p + 1);
    a.push(gamma[0]);
    for j in 1..p {
        a.push(gamma[j] - gamma[j - 1]);
    }
    a.push(1.0 - gamma[p - 1]);
    a
}

/// Sliding window of the most recent accepted iterates and residuals.
#[derive(Debug, Clone)]
pub struct AndersonWindow {
    pub config: AndersonConfig,
    iterates: VecDeque<Vec<f64>>,
    residuals: VecDeque<Vec<f64>>,
}

impl AndersonWindow {
    pub fn new(config: AndersonConfig) -> Self {
        assert!(config.depth >= 1, "window depth must be >= 1");
        Self {
            config,
            iterates: VecDeque::new(),
            residuals: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, g: Vec<f64>) {
        if self.iterates.len() == self.config.depth {
            self.iterates.pop_front();
            self.residuals.pop_front();
        }
        self.iterates.push_back(x);
        self.residuals.push_back(g);
    }

    pub fn latest(&self) -> Option<(&[f64], &[f64])> {
        Some((self.iterates.back()?, self.residuals.back()?))
    }

    /// Least-squares coefficients `gamma`, or `None` with fewer than two
    /// entries or a singular Gram system.
    pub fn gamma(&self) -> Option<Vec<f64>> {
        let p = self.len().checked_sub(1).filter(|&p| p > 0)?;
        let n = self.residuals[0].len();
        let g_mat = DMatrix::from_fn(n, p, |r, c| self.residuals[c + 1][r] - self.residuals[c][r]);
        let gk = DVector::from_column_slice(self.residuals.back()?);
        let mut gram = g_mat.transpose() * &g_mat;
        let ridge = match self.config.ridge {
            Ridge::Absolute(e) => e,
            Ridge::Relative(r) => {
                let inf = (0..p)
                    .map(|i| gram.row(i).iter().map(|v| v.abs()).sum::<f64>())
                    .fold(0.0, f64::max);
                r * inf
            }
        };
        for i in 0..p {
            gram[(i, i)] += ridge;
        }
        let rhs = g_mat.transpose() * gk;
        let sol = match gram.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => gram.lu().solve(&rhs)?,
        };
        if sol.iter().all(|v| v.is_finite()) {
            Some(sol.iter().copied().collect())
        } else {
            None
        }
    }

    /// Accelerated candidate `x_k + g_k - (G + dX) gamma`; plain step
    /// `x_k + g_k` when no history is available.
    pub fn propose(&self) -> Vec<f64> {
        let (x, g) = self.latest().expect("propose on empty window");
        let mut cand: Vec<f64> = x.iter().zip(g).map(|(a, b)| a + b).collect();
        match self.gamma() {
            Some(gamma) => {
                for (c, &gm) in gamma.iter().enumerate() {
                    let (x0, x1) = (&self.iterates[c], &self.iterates[c + 1]);
                    let (g0, g1) = (&self.residuals[c], &self.residuals[c + 1]);
                    for r in 0..cand.len() {
                        cand[r] -= gm * ((x1[r] - x0[r]) + (g1[r] - g0[r]));
                    }
                }
            }
            None if self.len() >= 2 => log::debug!("Anderson Gram solve failed, taking plain step"),
            None => {}
        }
        cand
    }
}

/// One iteration of [`anderson_solve`] as seen by the observer.
#[derive(Debug)]
pub struct StepInfo<'a> {
    pub iteration: usize,
    pub evaluations: usize,
    pub previous: &'a [f64],
    pub x: &'a [f64],
    pub residual: &'a [f64],
    /// False when the accelerated candidate failed the safeguard.
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct AndersonOutcome {
    pub x: Vec<f64>,
    pub residual: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub rejections: usize,
}

/// Iterates `map` from `x0` until `||g||_inf < stop_tol`, the observer asks
/// to stop, or `max_evaluations` map calls have been spent.
///
/// The observer runs after every accepted iterate and returns `true` to
/// request termination (counted as converged).
pub fn anderson_solve<F, O>(
    x0: Vec<f64>,
    mut map: F,
    config: &AndersonConfig,
    stop_tol: f64,
    max_evaluations: usize,
    mut observer: O,
) -> Result<AndersonOutcome>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
    O: FnMut(&StepInfo) -> bool,
{
    let residual_of = |x: &[f64], s: Vec<f64>| -> Vec<f64> { s.iter().zip(x).map(|(a, b)| a - b).collect() };
    let mut window = AndersonWindow::new(config.clone());
    let s0 = map(&x0)?;
    let g0 = residual_of(&x0, s0);
    let mut evaluations = 1;
    let mut iterations = 0;
    let mut rejections = 0;
    window.push(x0, g0);
    loop {
        let (x, g) = window.latest().unwrap();
        if stop_check(g, stop_tol) {
            return Ok(finish(&window, iterations, evaluations, true, rejections));
        }
        if evaluations >= max_evaluations {
            return Ok(finish(&window, iterations, evaluations, false, rejections));
        }
        let plain: Vec<f64> = x.iter().zip(g).map(|(a, b)| a + b).collect();
        let (x_new, g_new, accepted) = if window.len() < 2 {
            let s = map(&plain)?;
            evaluations += 1;
            let g = residual_of(&plain, s);
            (plain, g, true)
        } else {
            let cand = window.propose();
            evaluations += 1;
            // A candidate the map cannot evaluate is treated as a rejection.
            let gc = map(&cand).ok().map(|s| residual_of(&cand, s));
            if let Some(gc) = gc.filter(|gc| gc.iter().all(|v| v.is_finite()) && norm2(gc) <= config.tau * norm2(g)) {
                (cand, gc, true)
            } else {
                rejections += 1;
                let s = map(&plain)?;
                evaluations += 1;
                let g = residual_of(&plain, s);
                (plain, g, false)
            }
        };
        let previous = x.to_vec();
        iterations += 1;
        let stop = observer(&StepInfo {
            iteration: iterations,
            evaluations,
            previous: &previous,
            x: &x_new,
            residual: &g_new,
            accepted,
        });
        window.push(x_new, g_new);
        if stop {
            return Ok(finish(&window, iterations, evaluations, true, rejections));
        }
    }
}

fn finish(
    window: &AndersonWindow,
    iterations: usize,
    evaluations: usize,
    converged: bool,
    rejections: usize,
) -> AndersonOutcome {
    let (x, g) = window.latest().unwrap();
    AndersonOutcome {
        x: x.to_vec(),
        residual: g.to_vec(),
        iterations,
        evaluations,
        converged,
        rejections,
    }
}
