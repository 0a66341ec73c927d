//! Relative-entropy utilities: Gaussian KL, the specific-entropy integrand
//! and the exact KL between two discrete chains on common grids.

use crate::discretization::ReferenceMeasure;
use crate::error::{CalibError, Result};

/// Factor applied to [`specific_entropy_rate`] when comparing with `h KL`.
pub const SPECIFIC_ENTROPY_FACTOR: f64 = 0.5;

/// `KL(N(mu1, var1) | N(mu2, var2))`.
pub fn gaussian_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<f64> {
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(CalibError::Domain(format!(
            "variances must be positive, got {var1} and {var2}"
        )));
    }
    let r = var1 / var2;
    Ok(0.5 * (r + (mu1 - mu2).powi(2) / var2 - 1.0 - r.ln()))
}

/// Un-halved specific-entropy integrand `r - 1 - log r`, `r = sigma2 / sigma_bar2`.
pub fn specific_entropy_rate(sigma2: f64, sigma_bar2: f64) -> Result<f64> {
    if !(sigma2 > 0.0 && sigma_bar2 > 0.0) {
        return Err(CalibError::Domain(format!(
            "variances must be positive, got {sigma2} and {sigma_bar2}"
        )));
    }
    let r = sigma2 / sigma_bar2;
    Ok(r - 1.0 - r.ln())
}

/// `KL(P | Q)` between two chains sharing grids, via the chain rule:
/// initial term plus the kernel divergences weighted by P's marginals.
pub fn chain_kl(p: &ReferenceMeasure, q: &ReferenceMeasure) -> Result<f64> {
    if p.grids != q.grids {
        return Err(CalibError::Invalid("chain KL needs identical grids".into()));
    }
    let mut kl = 0.0;
    for (a, b) in p.rho0.iter().zip(&q.rho0) {
        if *a > 0.0 {
            if !(*b > 0.0) {
                return Ok(f64::INFINITY);
            }
            kl += a * (a / b).ln();
        }
    }
    let marginals = p.forward_marginals();
    for (k, marginal) in marginals.iter().take(p.n_steps()).enumerate() {
        let (lp, lq) = (p.log_kernel(k), q.log_kernel(k));
        for (i, &w) in marginal.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row: f64 = lp
                .row(i)
                .iter()
                .zip(lq.row(i))
                .map(|(&a, &b)| if a.exp() > 0.0 { a.exp() * (a - b) } else { 0.0 })
                .sum();
            kl += w * row;
        }
    }
    Ok(kl)
}
