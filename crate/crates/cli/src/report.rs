//! Merges per-scale residual logs into one long-format convergence table.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use lvcal_core::table::Table;

use crate::commands::Status;

pub const RESIDUAL_HEADER: [&str; 6] = ["scale", "iteration", "accepted", "e_max", "price_err_l2", "mart_err_l2"];

/// `row` counts iterations across the whole ladder; `scale_start` marks
/// the first row of every scale after the first.
pub const CONVERGENCE_HEADER: [&str; 8] = [
    "row",
    "scale",
    "iteration",
    "accepted",
    "e_max",
    "price_err_l2",
    "mart_err_l2",
    "scale_start",
];

pub const CONVERGENCE_FILE: &str = "convergence.csv";

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub path: PathBuf,
    pub rows: usize,
    pub scales: Vec<usize>,
    pub boundaries: usize,
    /// Inputs that were missing or unreadable, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl ReportOutcome {
    pub fn status(&self) -> Status {
        if self.skipped.is_empty() {
            Status::Complete
        } else {
            Status::Incomplete
        }
    }
}

/// Residual logs written by `calibrate` into `dir`, in name order.
pub fn discover(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("residuals_n") && n.ends_with(".csv"))
        })
        .collect();
    found.sort();
    Ok(found)
}

fn read_log(path: &Path) -> Result<(usize, Table)> {
    let t = Table::load(path)?;
    ensure!(t.header == RESIDUAL_HEADER, "unexpected header {:?}", t.header);
    ensure!(!t.rows.is_empty(), "no rows");
    let scales: Vec<&str> = t.rows.iter().map(|r| r[0].as_str()).collect();
    ensure!(scales.iter().all(|s| *s == scales[0]), "mixes several scales");
    let scale = scales[0]
        .parse::<usize>()
        .with_context(|| format!("bad scale '{}'", scales[0]))?;
    Ok((scale, t))
}

/// Merges `inputs` (or every residual log in `dir` when empty) into
/// `<dir>/convergence.csv`, ordered by scale. Unreadable inputs are listed
/// and skipped; it is an error only if nothing can be read.
pub fn cmd_report(dir: &Path, inputs: &[PathBuf]) -> Result<ReportOutcome> {
    let inputs = if inputs.is_empty() {
        discover(dir)?
    } else {
        inputs.to_vec()
    };
    let mut skipped = Vec::new();
    let mut logs = Vec::new();
    for p in &inputs {
        match read_log(p) {
            Ok(l) => logs.push(l),
            Err(e) => skipped.push((p.clone(), format!("{e:#}"))),
        }
    }
    if logs.is_empty() {
        bail!(
            "no readable residual logs among {} input(s) in {}",
            inputs.len(),
            dir.display()
        );
    }
    logs.sort_by_key(|(s, _)| *s);
    let mut out = Table::new(&CONVERGENCE_HEADER);
    let mut boundaries = 0;
    for (j, (_, t)) in logs.iter().enumerate() {
        for (i, r) in t.rows.iter().enumerate() {
            let start = j > 0 && i == 0;
            boundaries += usize::from(start);
            let mut row = Vec::with_capacity(CONVERGENCE_HEADER.len());
            row.push(out.rows.len().to_string());
            row.extend(r.iter().cloned());
            row.push(start.to_string());
            out.push(row);
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(CONVERGENCE_FILE);
    out.save(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(ReportOutcome {
        path,
        rows: out.rows.len(),
        scales: logs.iter().map(|(s, _)| *s).collect(),
        boundaries,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_log(dir: &Path, scale: usize, iters: usize) -> PathBuf {
        let mut t = Table::new(&RESIDUAL_HEADER);
        for i in 1..=iters {
            t.push(vec![
                scale.to_string(),
                i.to_string(),
                "true".into(),
                "1e-3".into(),
                "0.5".into(),
                "0.1".into(),
            ]);
        }
        let p = dir.join(format!("residuals_n{scale}.csv"));
        t.save(&p).unwrap();
        p
    }

    #[test]
    fn single_scale_passes_through() {
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), 5, 3);
        let r = cmd_report(dir.path(), &[]).unwrap();
        assert_eq!((r.rows, r.boundaries), (3, 0));
        let t = Table::load(&r.path).unwrap();
        assert_eq!(t.header, CONVERGENCE_HEADER);
        assert!(t.rows.iter().all(|row| row[1] == "5"));
    }

    #[test]
    fn scales_are_ordered_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for s in [80, 5, 10, 40, 20] {
            write_log(dir.path(), s, 2);
        }
        let r = cmd_report(dir.path(), &[]).unwrap();
        assert_eq!(r.scales, vec![5, 10, 20, 40, 80]);
        assert_eq!(r.boundaries, 4);
        assert_eq!(r.status(), Status::Complete);
    }

    #[test]
    fn missing_inputs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let good = write_log(dir.path(), 5, 2);
        let bad = dir.path().join("residuals_n10.csv");
        let r = cmd_report(dir.path(), &[good, bad.clone()]).unwrap();
        assert_eq!(r.rows, 2);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].0, bad);
        assert_eq!(r.status(), Status::Incomplete);
        assert!(cmd_report(dir.path(), &[bad]).is_err());
    }
}
