//! Observation window, point patterns, cell counts and raster covariates.
//!
//! Cells are indexed row-major, `index = row * ncol + col`, with row 0 at
//! `ymin` and column 0 at `xmin`. A point on an edge shared by two cells
//! belongs to the cell with the larger index along that axis; points on the
//! outer `xmax`/`ymax` edges belong to the last cell.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LgcpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nrow: usize,
    pub ncol: usize,
}

impl Window {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64, nrow: usize, ncol: usize) -> Result<Self> {
        let w = Window {
            xmin,
            xmax,
            ymin,
            ymax,
            nrow,
            ncol,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.xmax, self.ymin, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(LgcpError::invalid("window bounds must be finite"));
        }
        if !(self.xmax > self.xmin && self.ymax > self.ymin) {
            return Err(LgcpError::invalid(format!(
                "zero-area window [{}, {}] x [{}, {}]",
                self.xmin, self.xmax, self.ymin, self.ymax
            )));
        }
        if self.nrow == 0 || self.ncol == 0 {
            return Err(LgcpError::invalid("grid must have at least one row and one column"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.nrow * self.ncol
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn cell_area(&self) -> f64 {
        self.width() * self.height() / self.n_cells() as f64
    }

    /// Same extent, `factor` times as many rows and columns.
    pub fn refined(&self, factor: usize) -> Window {
        Window {
            nrow: self.nrow * factor,
            ncol: self.ncol * factor,
            ..*self
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xmin && x <= self.xmax && y >= self.ymin && y <= self.ymax
    }

    /// Cell index of a point, or `None` when it lies outside the window.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        if !self.contains(x, y) {
            return None;
        }
        let col = axis_bin((x - self.xmin) / self.width(), self.ncol);
        let row = axis_bin((y - self.ymin) / self.height(), self.nrow);
        Some(row * self.ncol + col)
    }

    /// Centre coordinates of every cell in index order.
    pub fn cell_centres(&self) -> Vec<(f64, f64)> {
        let dx = self.width() / self.ncol as f64;
        let dy = self.height() / self.nrow as f64;
        let mut out = Vec::with_capacity(self.n_cells());
        for r in 0..self.nrow {
            for c in 0..self.ncol {
                out.push((
                    self.xmin + (c as f64 + 0.5) * dx,
                    self.ymin + (r as f64 + 0.5) * dy,
                ));
            }
        }
        out
    }
}

// `frac` is computed once per axis so that a grid and its 2x refinement bin
// the same scaled value; multiplying by a power of two is exact.
fn axis_bin(frac: f64, cells: usize) -> usize {
    let scaled = frac * cells as f64;
    let bin = scaled.floor();
    if bin < 0.0 {
        0
    } else {
        (bin as usize).min(cells - 1)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PointPattern {
    pub points: Vec<(f64, f64)>,
    pub label: String,
}

impl PointPattern {
    pub fn new(points: Vec<(f64, f64)>, label: impl Into<String>) -> Self {
        PointPattern {
            points,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountGrid {
    pub counts: Vec<u64>,
    pub areas: Vec<f64>,
    pub window: Window,
    /// Points that fell outside the window and were not counted.
    pub dropped: usize,
}

impl CountGrid {
    /// Builds a grid from explicit counts with uniform cell areas.
    pub fn from_counts(window: Window, counts: Vec<u64>) -> Result<Self> {
        window.validate()?;
        if counts.len() != window.n_cells() {
            return Err(LgcpError::invalid(format!(
                "expected {} counts, got {}",
                window.n_cells(),
                counts.len()
            )));
        }
        let areas = vec![window.cell_area(); counts.len()];
        Ok(CountGrid {
            counts,
            areas,
            window,
            dropped: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Replaces every cell area by `area` (e.g. unit exposure).
    pub fn with_uniform_area(mut self, area: f64) -> Result<Self> {
        if !(area > 0.0 && area.is_finite()) {
            return Err(LgcpError::invalid("cell area must be positive"));
        }
        self.areas.iter_mut().for_each(|a| *a = area);
        Ok(self)
    }

    /// Sums counts over `factor x factor` blocks.
    pub fn aggregate(&self, factor: usize) -> Result<CountGrid> {
        let w = self.window;
        if factor == 0 || !w.nrow.is_multiple_of(factor) || !w.ncol.is_multiple_of(factor) {
            return Err(LgcpError::invalid(format!(
                "grid {}x{} is not divisible by {factor}",
                w.nrow, w.ncol
            )));
        }
        let coarse = Window {
            nrow: w.nrow / factor,
            ncol: w.ncol / factor,
            ..w
        };
        let mut counts = vec![0u64; coarse.n_cells()];
        let mut areas = vec![0.0; coarse.n_cells()];
        for r in 0..w.nrow {
            for c in 0..w.ncol {
                let dst = (r / factor) * coarse.ncol + c / factor;
                counts[dst] += self.counts[r * w.ncol + c];
                areas[dst] += self.areas[r * w.ncol + c];
            }
        }
        Ok(CountGrid {
            counts,
            areas,
            window: coarse,
            dropped: self.dropped,
        })
    }
}

/// Counts the points of `pattern` in each cell of `window`.
///
/// Points outside the window are dropped; the number dropped is kept on the
/// returned grid and logged.
pub fn grid_counts(pattern: &PointPattern, window: &Window) -> Result<CountGrid> {
    window.validate()?;
    let mut counts = vec![0u64; window.n_cells()];
    let mut dropped = 0usize;
    for &(x, y) in &pattern.points {
        match window.cell_of(x, y) {
            Some(i) => counts[i] += 1,
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "{dropped} of {} points of '{}' lie outside the window and were dropped",
            pattern.len(),
            pattern.label
        );
    }
    let areas = vec![window.cell_area(); counts.len()];
    Ok(CountGrid {
        counts,
        areas,
        window: *window,
        dropped,
    })
}

/// Named raster covariates aligned to a lattice, stored column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateStack {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub transform_log: Vec<bool>,
    /// Per-column mean removed at standardization (0 when raw).
    pub means: Vec<f64>,
    /// Per-column scale divided out at standardization (1 when raw).
    pub sds: Vec<f64>,
}

impl CovariateStack {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(LgcpError::invalid("covariate names and columns differ in length"));
        }
        if let Some(first) = columns.first() {
            let n = first.len();
            for (name, col) in names.iter().zip(&columns) {
                if col.len() != n {
                    return Err(LgcpError::invalid(format!(
                        "covariate '{name}' has {} cells, expected {n}",
                        col.len()
                    )));
                }
                if col.iter().any(|v| !v.is_finite()) {
                    return Err(LgcpError::invalid(format!("covariate '{name}' has non-finite values")));
                }
            }
        }
        let p = names.len();
        Ok(CovariateStack {
            names,
            columns,
            transform_log: vec![false; p],
            means: vec![0.0; p],
            sds: vec![1.0; p],
        })
    }

    pub fn empty() -> Self {
        CovariateStack {
            names: Vec::new(),
            columns: Vec::new(),
            transform_log: Vec::new(),
            means: Vec::new(),
            sds: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn n(&self) -> Option<usize> {
        self.columns.first().map(|c| c.len())
    }

    pub fn value(&self, cell: usize, j: usize) -> f64 {
        self.columns[j][cell]
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.columns[j].as_slice())
    }

    /// Keeps the named columns, in the given order.
    pub fn select(&self, keep: &[String]) -> Result<CovariateStack> {
        let mut out = CovariateStack::empty();
        for name in keep {
            let j = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| LgcpError::invalid(format!("unknown covariate '{name}'")))?;
            out.names.push(self.names[j].clone());
            out.columns.push(self.columns[j].clone());
            out.transform_log.push(self.transform_log[j]);
            out.means.push(self.means[j]);
            out.sds.push(self.sds[j]);
        }
        Ok(out)
    }

    /// Block means over `factor x factor` cells of a `nrow x ncol` raster.
    pub fn aggregate(&self, nrow: usize, ncol: usize, factor: usize) -> Result<CovariateStack> {
        if factor == 0 || !nrow.is_multiple_of(factor) || !ncol.is_multiple_of(factor) {
            return Err(LgcpError::invalid(format!(
                "raster {nrow}x{ncol} is not divisible by {factor}"
            )));
        }
        if self.n().is_some_and(|n| n != nrow * ncol) {
            return Err(LgcpError::invalid("raster size does not match covariate length"));
        }
        let (cr, cc) = (nrow / factor, ncol / factor);
        let scale = 1.0 / (factor * factor) as f64;
        let mut out = self.clone();
        for col in out.columns.iter_mut() {
            let mut agg = vec![0.0; cr * cc];
            for r in 0..nrow {
                for c in 0..ncol {
                    agg[(r / factor) * cc + c / factor] += col[r * ncol + c] * scale;
                }
            }
            *col = agg;
        }
        Ok(out)
    }

    /// Undoes standardization (and the log transform) for one column.
    pub fn original_values(&self, j: usize) -> Vec<f64> {
        self.columns[j]
            .iter()
            .map(|&z| {
                let v = z * self.sds[j] + self.means[j];
                if self.transform_log[j] {
                    v.exp()
                } else {
                    v
                }
            })
            .collect()
    }
}

fn mean_sd(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let ss = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    let sd = if col.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Log-transforms flagged columns, then centres and scales every column to
/// unit sample standard deviation (divisor `n - 1`).
///
/// The recorded means/sds refer to the (possibly logged) values, so
/// `original = exp(z * sd + mean)` for a logged column.
pub fn preprocess_covariates(raw: &CovariateStack, log_flags: &[bool]) -> Result<CovariateStack> {
    if log_flags.len() != raw.p() {
        return Err(LgcpError::invalid(format!(
            "{} log flags for {} covariates",
            log_flags.len(),
            raw.p()
        )));
    }
    let mut out = raw.clone();
    for (j, &flag) in log_flags.iter().enumerate() {
        let name = &raw.names[j];
        let mut col = raw.columns[j].clone();
        if flag {
            if let Some(bad) = col.iter().find(|v| **v <= 0.0) {
                return Err(LgcpError::invalid(format!(
                    "covariate '{name}' is flagged for log transform but contains non-positive value {bad}"
                )));
            }
            col.iter_mut().for_each(|v| *v = v.ln());
        }
        let (mean, sd) = mean_sd(&col);
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(LgcpError::invalid(format!("covariate '{name}' is constant")));
        }
        col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        out.columns[j] = col;
        out.transform_log[j] = flag;
        out.means[j] = mean;
        out.sds[j] = sd;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VifOutcome {
    /// Retained covariate names, in input order.
    pub kept: Vec<String>,
    /// Final VIF of every retained covariate.
    pub vif: Vec<(String, f64)>,
    /// Removed covariates with the VIF they had when removed (infinite for
    /// exact collinearity).
    pub removed: Vec<(String, f64)>,
}

/// VIF of every column against the others (intercept included).
///
/// Exactly collinear columns get `f64::INFINITY`.
pub fn variance_inflation(columns: &[&[f64]]) -> Vec<f64> {
    let p = columns.len();
    let n = columns.first().map_or(0, |c| c.len());
    (0..p)
        .map(|j| {
            let y = DVector::from_column_slice(columns[j]);
            let ybar = y.mean();
            let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
            if sst <= 0.0 {
                return f64::INFINITY;
            }
            let mut x = DMatrix::<f64>::zeros(n, p);
            for i in 0..n {
                x[(i, 0)] = 1.0;
            }
            let mut k = 1;
            for (l, col) in columns.iter().enumerate() {
                if l == j {
                    continue;
                }
                for i in 0..n {
                    x[(i, k)] = col[i];
                }
                k += 1;
            }
            let svd = x.clone().svd(true, true);
            let smax = svd.singular_values.max();
            let coef = match svd.solve(&y, 1e-12 * smax.max(1.0)) {
                Ok(c) => c,
                Err(_) => return f64::INFINITY,
            };
            let resid = &y - &x * coef;
            let sse: f64 = resid.iter().map(|v| v * v).sum();
            let r2 = 1.0 - sse / sst;
            if r2 >= 1.0 - 1e-12 {
                f64::INFINITY
            } else {
                1.0 / (1.0 - r2)
            }
        })
        .collect()
}

/// Greedy removal of the covariate with the largest VIF until all VIFs are
/// below `threshold`. Ties go to the covariate listed first.
pub fn vif_filter(stack: &CovariateStack, threshold: f64) -> Result<VifOutcome> {
    if !(threshold > 1.0) {
        return Err(LgcpError::invalid("VIF threshold must exceed 1"));
    }
    let p = stack.p();
    if p < 2 {
        return Err(LgcpError::invalid("VIF filtering needs at least two covariates"));
    }
    let n = stack.n().unwrap_or(0);
    if n <= p {
        return Err(LgcpError::invalid(format!("need more cells ({n}) than covariates ({p})")));
    }
    let mut active: Vec<usize> = (0..p).collect();
    let mut removed = Vec::new();
    loop {
        let cols: Vec<&[f64]> = active.iter().map(|&j| stack.columns[j].as_slice()).collect();
        let vifs = if active.len() >= 2 {
            variance_inflation(&cols)
        } else {
            vec![1.0; active.len()]
        };
        let mut worst: Option<(usize, f64)> = None;
        for (pos, &v) in vifs.iter().enumerate() {
            if worst.is_none_or(|(_, w)| v > w) {
                worst = Some((pos, v));
            }
        }
        match worst {
            Some((pos, v)) if v >= threshold => {
                let j = active.remove(pos);
                if v.is_infinite() {
                    log::warn!("covariate '{}' is exactly collinear with the others", stack.names[j]);
                }
                removed.push((stack.names[j].clone(), v));
            }
            _ => {
                return Ok(VifOutcome {
                    kept: active.iter().map(|&j| stack.names[j].clone()).collect(),
                    vif: active
                        .iter()
                        .zip(vifs)
                        .map(|(&j, v)| (stack.names[j].clone(), v))
                        .collect(),
                    removed,
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_window(n: usize) -> Window {
        Window::new(0.0, 1.0, 0.0, 1.0, n, n).unwrap()
    }

    #[test]
    fn three_points_are_conserved() {
        let pat = PointPattern::new(vec![(0.1, 0.2), (0.7, 0.9), (0.5, 0.5)], "t");
        let g = grid_counts(&pat, &unit_window(2)).unwrap();
        assert_eq!(g.total(), 3);
        assert_eq!(g.dropped, 0);
    }

    #[test]
    fn centre_point_lands_in_one_cell() {
        let w = Window::new(0.0, 2.0, 0.0, 2.0, 2, 2).unwrap();
        let g = grid_counts(&PointPattern::new(vec![(1.0, 1.0)], "c"), &w).unwrap();
        assert_eq!(g.total(), 1);
        // larger index along both axes
        assert_eq!(g.counts, vec![0, 0, 0, 1]);
    }

    #[test]
    fn outer_edges_belong_to_last_cells() {
        let w = unit_window(3);
        assert_eq!(w.cell_of(1.0, 1.0), Some(8));
        assert_eq!(w.cell_of(0.0, 0.0), Some(0));
        assert_eq!(w.cell_of(1.0 + 1e-9, 0.5), None);
    }

    #[test]
    fn outside_points_are_dropped_and_counted() {
        let pat = PointPattern::new(vec![(0.5, 0.5), (-1.0, 0.5), (0.5, 3.0)], "t");
        let g = grid_counts(&pat, &unit_window(3)).unwrap();
        assert_eq!(g.total(), 1);
        assert_eq!(g.dropped, 2);
    }

    #[test]
    fn zero_area_window_is_rejected() {
        assert!(Window::new(0.0, 0.0, 0.0, 1.0, 3, 3).is_err());
        assert!(Window::new(0.0, 1.0, 2.0, 1.0, 3, 3).is_err());
    }

    #[test]
    fn row_zero_is_at_ymin() {
        let w = Window::new(0.0, 3.0, 0.0, 2.0, 2, 3).unwrap();
        assert_eq!(w.cell_of(2.5, 0.1), Some(2));
        assert_eq!(w.cell_of(0.1, 1.9), Some(3));
        assert!((w.cell_area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standardizes_one_to_four() {
        let raw = CovariateStack::new(vec!["a".into()], vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let out = preprocess_covariates(&raw, &[false]).unwrap();
        let expect = [-1.161895003862225, -0.3872983346207417, 0.3872983346207417, 1.161895003862225];
        for (v, e) in out.columns[0].iter().zip(expect) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
    }

    #[test]
    fn log_flagged_column_is_standardized() {
        let e = std::f64::consts::E;
        let raw = CovariateStack::new(vec!["a".into()], vec![vec![1.0, e, e * e]]).unwrap();
        let out = preprocess_covariates(&raw, &[true]).unwrap();
        let (m, s) = mean_sd(&out.columns[0]);
        assert!(m.abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
        assert!((out.means[0] - 1.0).abs() < 1e-12);
        let back = out.original_values(0);
        assert!((back[2] - e * e).abs() < 1e-12);
    }

    #[test]
    fn standardized_input_is_unchanged() {
        let raw = CovariateStack::new(vec!["a".into()], vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let once = preprocess_covariates(&raw, &[false]).unwrap();
        let twice = preprocess_covariates(&once, &[false]).unwrap();
        for (a, b) in once.columns[0].iter().zip(&twice.columns[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nonpositive_log_column_is_named() {
        let raw = CovariateStack::new(vec!["soil_al".into()], vec![vec![1.0, 0.0, 3.0]]).unwrap();
        let err = preprocess_covariates(&raw, &[true]).unwrap_err();
        assert!(err.to_string().contains("soil_al"));
    }

    #[test]
    fn constant_column_is_rejected() {
        let raw = CovariateStack::new(vec!["flat".into()], vec![vec![2.0; 5]]).unwrap();
        let err = preprocess_covariates(&raw, &[false]).unwrap_err();
        assert!(err.to_string().contains("flat"));
    }

    #[test]
    fn orthogonal_columns_have_unit_vif() {
        let a = vec![1.0, -1.0, 1.0, -1.0];
        let b = vec![1.0, 1.0, -1.0, -1.0];
        let stack = CovariateStack::new(vec!["a".into(), "b".into()], vec![a, b]).unwrap();
        let out = vif_filter(&stack, 5.0).unwrap();
        assert_eq!(out.kept, vec!["a", "b"]);
        for (_, v) in &out.vif {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_collinearity_removes_first_offender() {
        let a: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).cos()).collect();
        let c: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let stack =
            CovariateStack::new(vec!["a".into(), "b".into(), "c".into()], vec![a, b, c]).unwrap();
        let out = vif_filter(&stack, 10.0).unwrap();
        assert_eq!(out.removed.len(), 1);
        assert_eq!(out.removed[0].0, "a");
        assert!(out.removed[0].1.is_infinite());
        assert_eq!(out.kept, vec!["b", "c"]);
    }

    #[test]
    fn block_aggregation_sums_counts() {
        let w = unit_window(4);
        let counts: Vec<u64> = (0..16).collect();
        let g = CountGrid::from_counts(w, counts).unwrap();
        let c = g.aggregate(2).unwrap();
        assert_eq!(c.counts, vec![1 + 4 + 5, 2 + 3 + 6 + 7, 8 + 9 + 12 + 13, 10 + 11 + 14 + 15]);
        assert!((c.areas[0] - 0.25).abs() < 1e-15);
    }
}
