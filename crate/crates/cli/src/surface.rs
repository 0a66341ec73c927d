//! Local variance surfaces as flat tables: one row per transition and grid
//! point, `step,t_start,t_end,x,variance`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use lvcal_core::multiscale::LocalVarianceTable;
use lvcal_core::table::{fmt_f64, Table};

pub const SURFACE_HEADER: [&str; 5] = ["step", "t_start", "t_end", "x", "variance"];

/// Variance per transition and point of a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub step: f64,
    pub points: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Surface {
    pub fn from_table(t: &LocalVarianceTable) -> Self {
        Self {
            step: t.step,
            points: t.grid.points.clone(),
            values: t.values.clone(),
        }
    }

    /// Same variance on every transition and point.
    pub fn constant(variance: f64, step: f64, n_steps: usize, points: Vec<f64>) -> Self {
        let n = points.len();
        Self {
            step,
            points,
            values: vec![vec![variance; n]; n_steps],
        }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    /// Index of the grid point nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let n = self.points.len();
        if n < 2 {
            return 0;
        }
        let dx = self.points[1] - self.points[0];
        let r = ((x - self.points[0]) / dx).round();
        if r <= 0.0 {
            0
        } else {
            (r as usize).min(n - 1)
        }
    }

    /// Transition whose end time equals `t`, if any.
    pub fn step_ending_at(&self, t: f64) -> Option<usize> {
        let r = t / self.step;
        let k = r.round();
        ((r - k).abs() <= 1e-9 && k >= 1.0 && k as usize <= self.n_steps()).then(|| k as usize - 1)
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&SURFACE_HEADER);
        for (k, row) in self.values.iter().enumerate() {
            let (a, b) = (fmt_f64(k as f64 * self.step), fmt_f64((k + 1) as f64 * self.step));
            for (x, v) in self.points.iter().zip(row) {
                t.push(vec![k.to_string(), a.clone(), b.clone(), fmt_f64(*x), fmt_f64(*v)]);
            }
        }
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_table()
            .save(path)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn from_rows(t: &Table) -> Result<Self> {
        let steps: Vec<usize> = {
            let c = t.column("step")?;
            t.rows
                .iter()
                .map(|r| r[c].parse::<usize>().with_context(|| format!("bad step '{}'", r[c])))
                .collect::<Result<_>>()?
        };
        let (t0, t1) = (t.f64_column("t_start")?, t.f64_column("t_end")?);
        let (xs, vs) = (t.f64_column("x")?, t.f64_column("variance")?);
        ensure!(!steps.is_empty(), "surface table is empty");
        let n_steps = steps.iter().max().unwrap() + 1;
        let n_points = steps.len() / n_steps;
        ensure!(
            n_points * n_steps == steps.len(),
            "surface rows do not form a full step by point grid"
        );
        let step = t1[0] - t0[0];
        ensure!(step > 0.0, "surface step must be positive");
        let points = xs[..n_points].to_vec();
        let mut values = vec![Vec::with_capacity(n_points); n_steps];
        for (r, (&k, (&x, &v))) in steps.iter().zip(xs.iter().zip(&vs)).enumerate() {
            if k != r / n_points || x != points[r % n_points] {
                bail!("surface row {} is out of order (step {k}, x {x})", r + 2);
            }
            ensure!(
                v >= 0.0 && v.is_finite(),
                "surface row {} has invalid variance {v}",
                r + 2
            );
            values[k].push(v);
        }
        Ok(Self { step, points, values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t = Table::load(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_rows(&t).with_context(|| format!("in {}", path.display()))
    }
}
