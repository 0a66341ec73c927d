//! Synthetic market: SSVI implied total variance, undiscounted Black–Scholes
//! prices on the forward, implied-volatility inversion and vanilla payoffs on
//! log-price grids.
//!
//! Rates and dividends are zero throughout, so the forward equals the spot.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{CalibError, Result};
use crate::table::{fmt_f64, parse_f64};

/// Power-law SSVI parameters with ATM total variance `theta_slope * t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsviParams {
    pub eta: f64,
    pub lambda: f64,
    pub rho: f64,
    pub theta_slope: f64,
}

impl Default for SsviParams {
    fn default() -> Self {
        Self {
            eta: 1.6,
            lambda: 0.4,
            rho: -0.15,
            theta_slope: 0.04,
        }
    }
}

impl SsviParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(CalibError::Domain(format!("|rho| must be < 1, got {}", self.rho)));
        }
        if !(self.eta > 0.0) {
            return Err(CalibError::Domain(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(CalibError::Domain(format!(
                "lambda must lie in (0,1), got {}",
                self.lambda
            )));
        }
        if !(self.theta_slope > 0.0) {
            return Err(CalibError::Domain(format!(
                "theta_slope must be > 0, got {}",
                self.theta_slope
            )));
        }
        Ok(())
    }

    /// ATM total variance at time `t`.
    pub fn theta(&self, t: f64) -> f64 {
        self.theta_slope * t
    }
}

/// Total implied variance `w(k, t)` at log-moneyness `k = log(K/F)`.
pub fn ssvi_total_variance(p: &SsviParams, k: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(CalibError::Domain(format!("SSVI needs t > 0, got {t}")));
    }
    let theta = p.theta(t);
    let phi = p.eta * theta.powf(-p.lambda);
    let pk = phi * k;
    // (pk + rho)^2 + 1 - rho^2 rearranged so the ATM bracket is exactly 2
    let w = 0.5 * theta * (1.0 + p.rho * pk + (pk * (pk + 2.0 * p.rho) + 1.0).sqrt());
    if !w.is_finite() || w <= 0.0 {
        return Err(CalibError::Domain(format!(
            "SSVI total variance {w} at k={k}, t={t} is not positive and finite"
        )));
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptionKind {
    Call,
    Put,
}

impl OptionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptionKind::Call => "call",
            OptionKind::Put => "put",
        }
    }

    /// Payoff on the underlying price `s`.
    #[inline]
    pub fn payoff(&self, strike: f64, s: f64) -> f64 {
        match self {
            OptionKind::Call => (s - strike).max(0.0),
            OptionKind::Put => (strike - s).max(0.0),
        }
    }

    /// Static no-arbitrage price bounds `(lower, upper)` on the forward.
    pub fn bounds(&self, forward: f64, strike: f64) -> (f64, f64) {
        match self {
            OptionKind::Call => ((forward - strike).max(0.0), forward),
            OptionKind::Put => ((strike - forward).max(0.0), strike),
        }
    }
}

impl fmt::Display for OptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptionKind {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "call" | "c" => Ok(OptionKind::Call),
            "put" | "p" => Ok(OptionKind::Put),
            other => Err(CalibError::Table(format!("unknown option kind '{other}'"))),
        }
    }
}

/// Standard normal cumulative distribution.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[inline]
fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Undiscounted Black–Scholes price on the forward. Zero total variance
/// returns the intrinsic value.
pub fn bs_price(forward: f64, strike: f64, total_variance: f64, kind: OptionKind) -> f64 {
    debug_assert!(forward > 0.0 && strike > 0.0 && total_variance >= 0.0);
    if total_variance <= 0.0 {
        return kind.payoff(strike, forward);
    }
    let sd = total_variance.sqrt();
    let d1 = ((forward / strike).ln() + 0.5 * total_variance) / sd;
    let d2 = d1 - sd;
    match kind {
        OptionKind::Call => forward * norm_cdf(d1) - strike * norm_cdf(d2),
        OptionKind::Put => strike * norm_cdf(-d2) - forward * norm_cdf(-d1),
    }
}

/// Black–Scholes vega with respect to the volatility at maturity `t`.
pub fn bs_vega(forward: f64, strike: f64, sigma: f64, t: f64) -> f64 {
    let sd = sigma * t.sqrt();
    if sd <= 0.0 {
        return 0.0;
    }
    let d1 = ((forward / strike).ln() + 0.5 * sd * sd) / sd;
    forward * norm_pdf(d1) * t.sqrt()
}

/// Implied volatility of an undiscounted price by bracketing bisection followed
/// by safeguarded Newton polishing. In-the-money quotes are mapped to the
/// out-of-the-money side through put–call parity before inversion.
pub fn implied_vol(price: f64, forward: f64, strike: f64, maturity: f64, kind: OptionKind) -> Result<f64> {
    if !(forward > 0.0 && strike > 0.0 && maturity > 0.0) {
        return Err(CalibError::Domain(format!(
            "implied_vol needs positive forward, strike and maturity (got {forward}, {strike}, {maturity})"
        )));
    }
    let (lower, upper) = kind.bounds(forward, strike);
    if !(price > lower && price < upper) {
        return Err(CalibError::OutOfBounds {
            price,
            lower,
            upper,
            strike,
            kind: kind.as_str(),
        });
    }
    // invert on the out-of-the-money side
    let (otm_kind, otm_price) = match kind {
        OptionKind::Call if strike < forward => (OptionKind::Put, price - (forward - strike)),
        OptionKind::Put if strike > forward => (OptionKind::Call, price - (strike - forward)),
        _ => (kind, price),
    };
    if !(otm_price > 0.0) {
        return Err(CalibError::OutOfBounds {
            price,
            lower,
            upper,
            strike,
            kind: kind.as_str(),
        });
    }
    let f = |sigma: f64| bs_price(forward, strike, sigma * sigma * maturity, otm_kind) - otm_price;

    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        if hi > 1e4 {
            return Err(CalibError::Domain(format!(
                "implied_vol: no bracket below sigma = {hi} for price {price}"
            )));
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-3 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut sigma = 0.5 * (lo + hi);
    for _ in 0..100 {
        let r = f(sigma);
        if r == 0.0 {
            break;
        }
        if r < 0.0 {
            lo = sigma;
        } else {
            hi = sigma;
        }
        let vega = bs_vega(forward, strike, sigma, maturity);
        let mut next = if vega > 0.0 { sigma - r / vega } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - sigma).abs();
        sigma = next;
        if step <= 4.0 * f64::EPSILON * sigma || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }
    Ok(sigma)
}

/// A calibration instrument: a vanilla option with its target price and the
/// curvature of its quadratic soft constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instrument {
    pub maturity_index: usize,
    pub maturity_time: f64,
    pub kind: OptionKind,
    pub strike: f64,
    pub target_price: f64,
    pub penalty_weight: f64,
}

impl Instrument {
    pub fn validate(&self, forward: f64) -> Result<()> {
        if !(self.strike > 0.0) {
            return Err(CalibError::Invalid(format!("strike must be > 0, got {}", self.strike)));
        }
        if !(self.penalty_weight > 0.0) {
            return Err(CalibError::Invalid(format!(
                "penalty weight must be > 0, got {}",
                self.penalty_weight
            )));
        }
        let (lo, hi) = self.kind.bounds(forward, self.strike);
        if !(self.target_price >= lo && self.target_price <= hi) {
            return Err(CalibError::OutOfBounds {
                price: self.target_price,
                lower: lo,
                upper: hi,
                strike: self.strike,
                kind: self.kind.as_str(),
            });
        }
        Ok(())
    }

    /// Payoff evaluated on log-price grid points.
    pub fn payoff_vector(&self, log_prices: &[f64]) -> PayoffVector {
        PayoffVector::new(self.kind, self.strike, log_prices)
    }
}

/// Payoff `G_i(x)` on the points of a log-price grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffVector {
    pub values: Vec<f64>,
}

impl PayoffVector {
    pub fn new(kind: OptionKind, strike: f64, log_prices: &[f64]) -> Self {
        Self {
            values: log_prices.iter().map(|&x| kind.payoff(strike, x.exp())).collect(),
        }
    }
}

/// Strike ladder: calls at `spot + offset + spacing*j`, puts at
/// `spot - offset - spacing*j`, `j = 0..=counts[i]` for the i-th maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrikeRule {
    pub offset: f64,
    pub spacing: f64,
    pub counts: Vec<usize>,
}

impl Default for StrikeRule {
    fn default() -> Self {
        Self {
            offset: 1.0,
            spacing: 4.0,
            counts: vec![5, 7, 9, 10, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentSet {
    pub spot: f64,
    pub calibration_times: Vec<f64>,
    pub instruments: Vec<Instrument>,
}

impl InstrumentSet {
    pub fn len(&self) -> usize {
        self.instruments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instruments.is_empty()
    }

    pub fn forward(&self) -> f64 {
        self.spot
    }

    /// Instruments maturing at calibration time index `i`.
    pub fn at_maturity(&self, i: usize) -> impl Iterator<Item = &Instrument> {
        self.instruments.iter().filter(move |ins| ins.maturity_index == i)
    }

    pub fn with_penalty_weight(mut self, weight: f64) -> Self {
        for ins in &mut self.instruments {
            ins.penalty_weight = weight;
        }
        self
    }

    /// Implied vol of the instrument struck closest to the forward, per
    /// calibration time; `None` where a maturity has no instrument.
    pub fn atm_implied_vols(&self) -> Result<Vec<Option<f64>>> {
        let f = self.forward();
        (0..self.calibration_times.len())
            .map(|m| {
                self.at_maturity(m)
                    .min_by(|a, b| (a.strike - f).abs().total_cmp(&(b.strike - f).abs()))
                    .map(|i| implied_vol(i.target_price, f, i.strike, i.maturity_time, i.kind))
                    .transpose()
            })
            .collect()
    }

    /// Writes `maturity_time,kind,strike,target_price,penalty_weight`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["maturity_time", "kind", "strike", "target_price", "penalty_weight"])?;
        for ins in &self.instruments {
            wtr.write_record([
                fmt_f64(ins.maturity_time),
                ins.kind.as_str().to_string(),
                fmt_f64(ins.strike),
                fmt_f64(ins.target_price),
                fmt_f64(ins.penalty_weight),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Reads an instrument table. Maturity indices follow the sorted distinct
    /// maturity times.
    pub fn read_csv<R: std::io::Read>(r: R, spot: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(CalibError::Table(format!(
                    "instrument row has {} fields, expected 5",
                    rec.len()
                )));
            }
            rows.push((
                parse_f64(&rec[0])?,
                rec[1].parse::<OptionKind>()?,
                parse_f64(&rec[2])?,
                parse_f64(&rec[3])?,
                parse_f64(&rec[4])?,
            ));
        }
        let mut times: Vec<f64> = rows.iter().map(|r| r.0).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let instruments = rows
            .into_iter()
            .map(|(t, kind, strike, target_price, penalty_weight)| Instrument {
                maturity_index: times.iter().position(|&s| s == t).unwrap(),
                maturity_time: t,
                kind,
                strike,
                target_price,
                penalty_weight,
            })
            .collect();
        Ok(Self {
            spot,
            calibration_times: times,
            instruments,
        })
    }

    pub fn load(path: &Path, spot: f64) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f), spot)
    }
}

/// Prices the strike ladder on the SSVI surface at each calibration time.
pub fn generate_market(
    p: &SsviParams,
    spot: f64,
    calibration_times: &[f64],
    rule: &StrikeRule,
    penalty_weight: f64,
) -> Result<InstrumentSet> {
    p.validate()?;
    if calibration_times.is_empty() {
        return Err(CalibError::Invalid("calibration times are empty".into()));
    }
    if calibration_times[0] <= 0.0 || calibration_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CalibError::Invalid(
            "calibration times must be positive and strictly increasing".into(),
        ));
    }
    if rule.counts.len() != calibration_times.len() {
        return Err(CalibError::Invalid(format!(
            "strike rule has {} counts for {} calibration times",
            rule.counts.len(),
            calibration_times.len()
        )));
    }
    let forward = spot;
    let mut instruments = Vec::new();
    for (i, (&tau, &n)) in calibration_times.iter().zip(&rule.counts).enumerate() {
        for kind in [OptionKind::Call, OptionKind::Put] {
            for j in 0..=n {
                let shift = rule.offset + rule.spacing * j as f64;
                let strike = match kind {
                    OptionKind::Call => spot + shift,
                    OptionKind::Put => spot - shift,
                };
                if strike <= 0.0 {
                    log::warn!("dropping {kind} with non-positive strike {strike} at t={tau}");
                    continue;
                }
                let w = ssvi_total_variance(p, (strike / forward).ln(), tau)?;
                instruments.push(Instrument {
                    maturity_index: i,
                    maturity_time: tau,
                    kind,
                    strike,
                    target_price: bs_price(forward, strike, w, kind),
                    penalty_weight,
                });
            }
        }
    }
    Ok(InstrumentSet {
        spot,
        calibration_times: calibration_times.to_vec(),
        instruments,
    })
}
