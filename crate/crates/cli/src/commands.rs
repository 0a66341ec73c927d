//! The four subcommands as library functions. Every file they write is a
//! deterministic function of the configuration and inputs; wall-clock
//! timings are returned to the caller, never written.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lvcal_core::discretization::{bootstrap_reference_vol, InitialLaw, PiecewiseVariance};
use lvcal_core::market::{generate_market, implied_vol, ssvi_total_variance, InstrumentSet};
use lvcal_core::multiscale::{run_ladder, LadderResult, ScaleResult};
use lvcal_core::table::{fmt_f64, Table};

use crate::config::RunConfig;
use crate::mc::{reprice, McSettings};
use crate::report;
use crate::surface::Surface;

pub const INSTRUMENTS_FILE: &str = "instruments.csv";
pub const SURFACE_FILE: &str = "surface.csv";
pub const IMPLIED_VOLS_FILE: &str = "implied_vols.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MC_AUDIT_FILE: &str = "mc_audit.csv";

pub fn residuals_file(n_steps: usize) -> String {
    format!("residuals_n{n_steps}.csv")
}

pub fn scale_surface_file(n_steps: usize) -> String {
    format!("surface_n{n_steps}.csv")
}

pub fn reference_file(n_steps: usize) -> String {
    format!("reference_n{n_steps}.csv")
}

/// Process exit status of a completed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Output written, but a solve stopped unconverged or inputs were missing.
    Incomplete,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Complete => 0,
            Status::Incomplete => 2,
        }
    }
}

fn save(t: &Table, path: &Path) -> Result<()> {
    t.save(path).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

/// Writes the SSVI instrument table to `<dir>/instruments.csv`.
pub fn cmd_generate_market(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(dir)?;
    let m = &cfg.market;
    let set = generate_market(
        &m.ssvi,
        m.spot,
        &m.calibration_times,
        &m.strike_rule(),
        cfg.solver.gamma,
    )?;
    let path = dir.join(INSTRUMENTS_FILE);
    set.save(&path).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {} instruments to {}", set.len(), path.display());
    Ok(path)
}

/// Loads an instrument table and aligns it with the configured calibration
/// times. The configured `gamma` replaces the stored penalty weights.
pub fn load_instruments(cfg: &RunConfig, path: &Path) -> Result<InstrumentSet> {
    let m = &cfg.market;
    let mut set = InstrumentSet::load(path, m.spot).with_context(|| format!("reading {}", path.display()))?;
    for ins in &mut set.instruments {
        let t = ins.maturity_time;
        let Some(j) = m
            .calibration_times
            .iter()
            .position(|&c| (c - t).abs() <= 1e-12 * c.max(1.0))
        else {
            bail!("instrument maturity {t} is not one of market.calibration_times");
        };
        ins.maturity_index = j;
        ins.maturity_time = m.calibration_times[j];
        ins.validate(set.spot)
            .with_context(|| format!("{} strike {} at maturity {t}", ins.kind, ins.strike))?;
    }
    set.calibration_times = m.calibration_times.clone();
    Ok(set.with_penalty_weight(cfg.solver.gamma))
}

/// Piecewise-constant prior variance bootstrapped from the implied vol
/// nearest the money at each calibration time, falling back to the SSVI
/// ATM level where a maturity has no instrument.
pub fn prior_variance(cfg: &RunConfig, set: &InstrumentSet) -> Result<PiecewiseVariance> {
    let m = &cfg.market;
    let atm = set
        .atm_implied_vols()?
        .into_iter()
        .zip(&m.calibration_times)
        .map(|(v, &t)| match v {
            Some(v) => Ok(v),
            None => Ok((ssvi_total_variance(&m.ssvi, 0.0, t)? / t).sqrt()),
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(bootstrap_reference_vol(&atm, &m.calibration_times)?)
}

/// Per-scale quality figures, as written to `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSummary {
    pub n_steps: usize,
    pub converged: bool,
    pub iterations: usize,
    pub sweeps: usize,
    pub rejections: usize,
    pub flagged_points: usize,
    pub price_err_l2: f64,
    pub mart_err_l2: f64,
    pub max_rel_price_err: f64,
    pub max_iv_err: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub instruments: InstrumentSet,
    pub ladder: LadderResult,
    pub scales: Vec<ScaleSummary>,
}

impl CalibrationOutcome {
    pub fn status(&self) -> Status {
        if self.ladder.converged() {
            Status::Complete
        } else {
            Status::Incomplete
        }
    }
}

/// Calibrated and target implied vols at one scale; `NaN` where a price has
/// no implied vol.
pub fn implied_vol_rows(set: &InstrumentSet, model_prices: &[f64]) -> Vec<(f64, f64)> {
    let f = set.forward();
    set.instruments
        .iter()
        .zip(model_prices)
        .map(|(ins, &p)| {
            let iv = |price| implied_vol(price, f, ins.strike, ins.maturity_time, ins.kind).unwrap_or(f64::NAN);
            (iv(ins.target_price), iv(p))
        })
        .collect()
}

fn summarize(set: &InstrumentSet, s: &ScaleResult) -> ScaleSummary {
    let max_rel = s
        .model_prices
        .iter()
        .zip(&set.instruments)
        .map(|(m, i)| (m - i.target_price).abs() / i.target_price)
        .fold(0.0, f64::max);
    let max_iv = implied_vol_rows(set, &s.model_prices)
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(
            0.0,
            |m: f64, e| if m.is_nan() || e.is_nan() { f64::NAN } else { m.max(e) },
        );
    let r = &s.report;
    ScaleSummary {
        n_steps: s.n_steps,
        converged: r.converged,
        iterations: r.iterations,
        sweeps: r.sweeps,
        rejections: r.rejections,
        flagged_points: r.flagged_points,
        price_err_l2: r.diagnostics.price_err_l2,
        mart_err_l2: r.diagnostics.mart_err_l2,
        max_rel_price_err: max_rel,
        max_iv_err: max_iv,
        elapsed_secs: s.elapsed_secs,
    }
}

fn residual_table(s: &ScaleResult) -> Table {
    let mut t = Table::new(&report::RESIDUAL_HEADER);
    for r in &s.report.records {
        t.push(vec![
            s.n_steps.to_string(),
            r.iteration.to_string(),
            r.accepted.to_string(),
            fmt_f64(r.e_max),
            fmt_f64(r.price_err_l2),
            fmt_f64(r.mart_err_l2),
        ]);
    }
    t
}

fn implied_vol_table(set: &InstrumentSet, s: &ScaleResult) -> Table {
    let mut t = Table::new(&[
        "maturity_time",
        "kind",
        "strike",
        "target_price",
        "model_price",
        "target_iv",
        "calibrated_iv",
    ]);
    for ((ins, m), (a, b)) in set
        .instruments
        .iter()
        .zip(&s.model_prices)
        .zip(implied_vol_rows(set, &s.model_prices))
    {
        t.push(vec![
            fmt_f64(ins.maturity_time),
            ins.kind.to_string(),
            fmt_f64(ins.strike),
            fmt_f64(ins.target_price),
            fmt_f64(*m),
            fmt_f64(a),
            fmt_f64(b),
        ]);
    }
    t
}

fn summary_table(scales: &[ScaleSummary]) -> Table {
    let mut t = Table::new(&[
        "scale",
        "converged",
        "iterations",
        "sweeps",
        "rejections",
        "flagged_points",
        "price_err_l2",
        "mart_err_l2",
        "max_rel_price_err",
        "max_iv_err",
    ]);
    for s in scales {
        t.push(vec![
            s.n_steps.to_string(),
            s.converged.to_string(),
            s.iterations.to_string(),
            s.sweeps.to_string(),
            s.rejections.to_string(),
            s.flagged_points.to_string(),
            fmt_f64(s.price_err_l2),
            fmt_f64(s.mart_err_l2),
            fmt_f64(s.max_rel_price_err),
            fmt_f64(s.max_iv_err),
        ]);
    }
    t
}

/// Runs the ladder on the instruments in `instruments` and writes the
/// residual logs, surfaces, implied-vol table and summary to `dir`.
pub fn cmd_calibrate(cfg: &RunConfig, instruments: &Path, dir: &Path) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    ensure_dir(dir)?;
    let set = load_instruments(cfg, instruments)?;
    let base = prior_variance(cfg, &set)?;
    let initial = InitialLaw::Dirac {
        x0: cfg.market.spot.ln(),
    };
    let ladder = run_ladder(&cfg.ladder_config(), &set, &base, initial)?;
    let out = &cfg.output;
    let mut scales = Vec::with_capacity(ladder.scales.len());
    for s in &ladder.scales {
        let n = s.n_steps;
        if out.residuals {
            save(&residual_table(s), &dir.join(residuals_file(n)))?;
        }
        if out.surfaces {
            Surface::from_table(&s.surface).save(&dir.join(scale_surface_file(n)))?;
        }
        if out.reference {
            let r = Surface {
                step: s.time_grid.step,
                points: ladder.grid.points.clone(),
                values: s.reference_variance.clone(),
            };
            r.save(&dir.join(reference_file(n)))?;
        }
        scales.push(summarize(&set, s));
    }
    let last = ladder.last();
    Surface::from_table(&last.surface).save(&dir.join(SURFACE_FILE))?;
    if out.implied_vols {
        save(&implied_vol_table(&set, last), &dir.join(IMPLIED_VOLS_FILE))?;
    }
    save(&summary_table(&scales), &dir.join(SUMMARY_FILE))?;
    Ok(CalibrationOutcome {
        instruments: set,
        ladder,
        scales,
    })
}

/// One row of the Monte Carlo audit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub maturity_time: f64,
    pub strike: f64,
    pub mc_price: f64,
    pub mc_stderr: f64,
    pub mc_iv: f64,
    pub calibrated_iv: f64,
    pub target_iv: f64,
}

/// Calibrated implied vols keyed by instrument, read from a previous
/// `calibrate` run.
fn calibrated_ivs(path: &Path, set: &InstrumentSet) -> Result<Vec<f64>> {
    let t = Table::load(path).with_context(|| format!("reading {}", path.display()))?;
    let (mats, strikes, ivs) = (
        t.f64_column("maturity_time")?,
        t.f64_column("strike")?,
        t.f64_column("calibrated_iv")?,
    );
    let kinds = t.column("kind")?;
    set.instruments
        .iter()
        .map(|ins| {
            (0..t.rows.len())
                .find(|&r| {
                    mats[r] == ins.maturity_time && strikes[r] == ins.strike && t.rows[r][kinds] == ins.kind.as_str()
                })
                .map(|r| ivs[r])
                .with_context(|| format!("{} has no row for {} strike {}", path.display(), ins.kind, ins.strike))
        })
        .collect()
}

/// Reprices the instruments by simulation on `surface` and writes
/// `mc_audit.csv`. Refuses to run without a seed.
pub fn cmd_verify(cfg: &RunConfig, surface: &Path, instruments: &Path, dir: &Path) -> Result<Vec<AuditRow>> {
    cfg.validate()?;
    let Some(seed) = cfg.seed else {
        bail!("verify needs a seed (set `seed` in the config or pass --seed) so the audit is reproducible");
    };
    ensure_dir(dir)?;
    let set = load_instruments(cfg, instruments)?;
    let surf = Surface::load(surface)?;
    let settings = McSettings {
        paths: cfg.verify.paths,
        block_size: cfg.verify.block_size,
        seed,
    };
    let est = reprice(&surf, set.spot, &set.instruments, &settings)?;
    let iv_path = surface.with_file_name(IMPLIED_VOLS_FILE);
    let calibrated = if iv_path.exists() {
        calibrated_ivs(&iv_path, &set)?
    } else {
        log::warn!("{} not found; calibrated implied vols left empty", iv_path.display());
        vec![f64::NAN; set.len()]
    };
    let f = set.forward();
    let mut rows = Vec::with_capacity(set.len());
    let mut t = Table::new(&[
        "maturity_time",
        "kind",
        "strike",
        "target_price",
        "mc_price",
        "mc_stderr",
        "target_iv",
        "calibrated_iv",
        "mc_iv",
    ]);
    for ((ins, e), &cal) in set.instruments.iter().zip(&est).zip(&calibrated) {
        let iv = |p: f64| implied_vol(p, f, ins.strike, ins.maturity_time, ins.kind).unwrap_or(f64::NAN);
        let row = AuditRow {
            maturity_time: ins.maturity_time,
            strike: ins.strike,
            mc_price: e.price,
            mc_stderr: e.stderr,
            mc_iv: iv(e.price),
            calibrated_iv: cal,
            target_iv: iv(ins.target_price),
        };
        t.push(vec![
            fmt_f64(ins.maturity_time),
            ins.kind.to_string(),
            fmt_f64(ins.strike),
            fmt_f64(ins.target_price),
            fmt_f64(row.mc_price),
            fmt_f64(row.mc_stderr),
            fmt_f64(row.target_iv),
            fmt_f64(row.calibrated_iv),
            fmt_f64(row.mc_iv),
        ]);
        rows.push(row);
    }
    ensure!(rows.len() == set.len());
    save(&t, &dir.join(MC_AUDIT_FILE))?;
    Ok(rows)
}
