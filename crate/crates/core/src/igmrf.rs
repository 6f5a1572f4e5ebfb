//! Second-order intrinsic GMRF (RW2D) on a regular lattice.
//!
//! The structure matrix is `R = D^T D` where `D` is the graph Laplacian of
//! the lattice with free boundaries. `D` is diagonalised by the tensor
//! product of the path-graph DCT-II bases, so the spectrum of `R` and every
//! generalized-inverse quantity is available in closed form. Dense
//! eigendecomposition is only used by tests as an independent check.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LgcpError, Result};
use crate::linalg::{BandMatrix, LatticeOrder};

/// Eigenvalues below this fraction of the largest one are treated as zero.
pub const NULL_SPACE_TOL: f64 = 1e-10;

/// Side multiplier of the torus the lattice is embedded in for the torus
/// approximation (a `2 nrow x 2 ncol` torus).
pub const TORUS_EMBEDDING: usize = 2;

/// Cell count up to which [`SpectrumMethod::Auto`] picks the exact route.
pub const DEFAULT_EXACT_LIMIT: usize = 6000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumMethod {
    Exact,
    Torus,
}

impl SpectrumMethod {
    /// Exact up to `limit` cells, torus beyond.
    pub fn auto(n: usize, limit: usize) -> Self {
        if n <= limit {
            SpectrumMethod::Exact
        } else {
            SpectrumMethod::Torus
        }
    }
}

impl std::str::FromStr for SpectrumMethod {
    type Err = LgcpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SpectrumMethod::Exact),
            "torus" => Ok(SpectrumMethod::Torus),
            other => Err(LgcpError::invalid(format!("unknown spectrum method '{other}'"))),
        }
    }
}

/// Sparse symmetric RW2D structure matrix `weight * D^T D` in CSR form.
#[derive(Debug, Clone)]
pub struct StructureMatrix {
    pub nrow: usize,
    pub ncol: usize,
    /// Multiplier applied to `D^T D` (1 for the unscaled matrix).
    pub weight: f64,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    pub rank_deficiency: usize,
    /// Linear constraints imposed on the field, each of length `n`.
    pub constraints: Vec<Vec<f64>>,
    spectrum: LatticeSpectrum,
}

/// Builds the RW2D structure matrix for an `nrow x ncol` lattice.
///
/// The default constraint set is sum-to-zero.
pub fn build_rw2d(nrow: usize, ncol: usize) -> Result<StructureMatrix> {
    if nrow < 3 || ncol < 3 {
        return Err(LgcpError::invalid(format!(
            "RW2D needs at least a 3x3 lattice, got {nrow}x{ncol}"
        )));
    }
    let n = nrow * ncol;
    let lap = laplacian_rows(nrow, ncol);
    // R = D^T D with D symmetric: R_ij = sum_k D_ki D_kj
    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
    for row in &lap {
        for &(i, di) in row {
            for &(j, dj) in row {
                *rows[i].entry(j).or_insert(0.0) += di * dj;
            }
        }
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for row in rows {
        for (j, v) in row {
            if v != 0.0 {
                col_idx.push(j);
                values.push(v);
            }
        }
        row_ptr.push(col_idx.len());
    }
    let spectrum = LatticeSpectrum::new(nrow, ncol);
    let eig = spectrum.eigenvalues(1.0);
    let lmax = eig.iter().cloned().fold(0.0, f64::max);
    let rank_deficiency = eig.iter().filter(|&&l| l <= NULL_SPACE_TOL * lmax).count();
    Ok(StructureMatrix {
        nrow,
        ncol,
        weight: 1.0,
        row_ptr,
        col_idx,
        values,
        rank_deficiency,
        constraints: vec![vec![1.0; n]],
        spectrum,
    })
}

// Rows of the free-boundary lattice Laplacian as (column, value) lists.
fn laplacian_rows(nrow: usize, ncol: usize) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(nrow * ncol);
    for r in 0..nrow {
        for c in 0..ncol {
            let mut row = Vec::with_capacity(5);
            let mut deg = 0.0;
            let mut push = |rr: usize, cc: usize| {
                row.push((rr * ncol + cc, 1.0));
                deg += 1.0;
            };
            if r > 0 {
                push(r - 1, c);
            }
            if r + 1 < nrow {
                push(r + 1, c);
            }
            if c > 0 {
                push(r, c - 1);
            }
            if c + 1 < ncol {
                push(r, c + 1);
            }
            row.push((r * ncol + c, -deg));
            out.push(row);
        }
    }
    out
}

impl StructureMatrix {
    pub fn n(&self) -> usize {
        self.nrow * self.ncol
    }

    /// Adds centred x- and y-coordinate constraints to the sum-to-zero one.
    pub fn with_trend_constraints(mut self) -> Self {
        let (nr, nc) = (self.nrow as f64, self.ncol as f64);
        let mut xs = Vec::with_capacity(self.n());
        let mut ys = Vec::with_capacity(self.n());
        for r in 0..self.nrow {
            for c in 0..self.ncol {
                xs.push(c as f64 - (nc - 1.0) / 2.0);
                ys.push(r as f64 - (nr - 1.0) / 2.0);
            }
        }
        self.constraints.truncate(1);
        self.constraints.push(xs);
        self.constraints.push(ys);
        self
    }

    pub fn has_trend_constraints(&self) -> bool {
        self.constraints.len() > 1
    }

    /// `c * R` with the same constraints.
    pub fn scaled(&self, c: f64) -> StructureMatrix {
        let mut out = self.clone();
        out.weight *= c;
        out.values.iter_mut().for_each(|v| *v *= c);
        out
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    /// Non-zero entries of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Adds `scale * R` into a band matrix laid out by `order`.
    pub fn add_to_band(&self, band: &mut BandMatrix, order: &LatticeOrder, scale: f64) {
        for i in 0..self.n() {
            let bi = order.to_band[i];
            for (j, v) in self.row(i) {
                if j <= i {
                    let bj = order.to_band[j];
                    if i == j {
                        band.add_diag(bi, scale * v);
                    } else {
                        band.add(bi, bj, scale * v);
                    }
                }
            }
        }
    }

    /// Eigenvalues of this matrix in lattice-mode order (closed form).
    pub fn eigenvalues(&self) -> Vec<f64> {
        self.spectrum.eigenvalues(self.weight)
    }

    pub fn spectrum(&self) -> &LatticeSpectrum {
        &self.spectrum
    }

    /// Log of the product of the non-zero eigenvalues.
    pub fn log_generalized_determinant(&self) -> f64 {
        let eig = self.eigenvalues();
        let lmax = eig.iter().cloned().fold(0.0, f64::max);
        eig.iter()
            .filter(|&&l| l > NULL_SPACE_TOL * lmax)
            .map(|l| l.ln())
            .sum()
    }

    /// `R^+ x`: Moore-Penrose inverse applied to `x`.
    pub fn apply_pseudo_inverse(&self, x: &[f64]) -> Vec<f64> {
        let eig = self.eigenvalues();
        let lmax = eig.iter().cloned().fold(0.0, f64::max);
        self.spectrum.apply_spectral(x, |k| {
            let l = eig[k];
            if l > NULL_SPACE_TOL * lmax {
                1.0 / l
            } else {
                0.0
            }
        })
    }

    /// Covariance of the field under the imposed constraints (the
    /// constrained generalized inverse) applied to `x`.
    pub fn apply_constrained_ginv(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.apply_pseudo_inverse(x);
        if let Some((u, kinv)) = self.extra_constraint_terms() {
            let ux: DVector<f64> = DVector::from_fn(u.len(), |a, _| dot(&u[a], x));
            let coef = &kinv * ux;
            for (a, ua) in u.iter().enumerate() {
                for (yi, ui) in y.iter_mut().zip(ua) {
                    *yi -= coef[a] * ui;
                }
            }
        }
        y
    }

    // U = R^+ A^T and (A R^+ A^T)^{-1} for the constraints beyond sum-to-zero.
    fn extra_constraint_terms(&self) -> Option<(Vec<Vec<f64>>, DMatrix<f64>)> {
        if self.constraints.len() <= 1 {
            return None;
        }
        let extra = &self.constraints[1..];
        let u: Vec<Vec<f64>> = extra.iter().map(|a| self.apply_pseudo_inverse(a)).collect();
        let k = DMatrix::from_fn(extra.len(), extra.len(), |a, b| dot(&extra[a], &u[b]));
        let kinv = k.try_inverse().expect("trend constraints are linearly independent");
        Some((u, kinv))
    }

    /// Conditioning-by-kriging correction of a draw from `N(0, R^+)` onto the
    /// constraints beyond sum-to-zero.
    pub fn condition_extra_constraints(&self, x: &mut [f64]) {
        if let Some((u, kinv)) = self.extra_constraint_terms() {
            let ax = DVector::from_fn(u.len(), |a, _| dot(&self.constraints[a + 1], x));
            let coef = &kinv * ax;
            for (a, ua) in u.iter().enumerate() {
                for (xi, ui) in x.iter_mut().zip(ua) {
                    *xi -= coef[a] * ui;
                }
            }
        }
    }

    /// Diagonal of the constrained generalized inverse.
    pub fn constrained_ginv_diagonal(&self) -> Vec<f64> {
        let eig = self.eigenvalues();
        let lmax = eig.iter().cloned().fold(0.0, f64::max);
        let mut d = self.spectrum.diagonal_of(|k| {
            let l = eig[k];
            if l > NULL_SPACE_TOL * lmax {
                1.0 / l
            } else {
                0.0
            }
        });
        if let Some((u, kinv)) = self.extra_constraint_terms() {
            for (i, di) in d.iter_mut().enumerate() {
                let ui = DVector::from_fn(u.len(), |a, _| u[a][i]);
                *di -= (ui.transpose() * &kinv * &ui)[(0, 0)];
            }
        }
        d
    }

    /// Non-zero eigenvalues of the constrained generalized inverse.
    ///
    /// Closed form under sum-to-zero alone; with trend constraints a dense
    /// eigendecomposition is used.
    pub fn constrained_ginv_eigenvalues(&self) -> Vec<f64> {
        if !self.has_trend_constraints() {
            let eig = self.eigenvalues();
            let lmax = eig.iter().cloned().fold(0.0, f64::max);
            return eig
                .iter()
                .filter(|&&l| l > NULL_SPACE_TOL * lmax)
                .map(|l| 1.0 / l)
                .collect();
        }
        let n = self.n();
        let mut cov = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply_constrained_ginv(&e);
            e[j] = 0.0;
            for i in 0..n {
                cov[(i, j)] = col[i];
            }
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let ev = cov.symmetric_eigenvalues();
        let vmax = ev.iter().cloned().fold(0.0, f64::max);
        ev.iter().filter(|&&v| v > NULL_SPACE_TOL * vmax).copied().collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Tensor-product DCT-II eigenbasis of the free-boundary lattice Laplacian.
#[derive(Debug, Clone)]
pub struct LatticeSpectrum {
    nrow: usize,
    ncol: usize,
    /// Column k is the k-th path eigenvector.
    basis_row: DMatrix<f64>,
    basis_col: DMatrix<f64>,
    lap_row: Vec<f64>,
    lap_col: Vec<f64>,
}

fn path_basis(m: usize) -> (DMatrix<f64>, Vec<f64>) {
    let mf = m as f64;
    let basis = DMatrix::from_fn(m, m, |i, k| {
        let s = if k == 0 { (1.0 / mf).sqrt() } else { (2.0 / mf).sqrt() };
        s * (PI * k as f64 * (i as f64 + 0.5) / mf).cos()
    });
    let eig = (0..m).map(|k| 2.0 - 2.0 * (PI * k as f64 / mf).cos()).collect();
    (basis, eig)
}

impl LatticeSpectrum {
    pub fn new(nrow: usize, ncol: usize) -> Self {
        let (basis_row, lap_row) = path_basis(nrow);
        let (basis_col, lap_col) = path_basis(ncol);
        LatticeSpectrum {
            nrow,
            ncol,
            basis_row,
            basis_col,
            lap_row,
            lap_col,
        }
    }

    /// Eigenvalues of `weight * D^T D`, mode `(p, q)` at index `p * ncol + q`.
    pub fn eigenvalues(&self, weight: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nrow * self.ncol);
        for p in 0..self.nrow {
            for q in 0..self.ncol {
                let mu = self.lap_row[p] + self.lap_col[q];
                out.push(weight * mu * mu);
            }
        }
        out
    }

    fn as_grid(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.nrow, self.ncol, x)
    }

    /// Coefficients of `x` in the eigenbasis (mode-major order).
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let g = self.basis_row.transpose() * self.as_grid(x) * &self.basis_col;
        grid_to_vec(&g)
    }

    pub fn inverse(&self, coef: &[f64]) -> Vec<f64> {
        let g = &self.basis_row * self.as_grid(coef) * self.basis_col.transpose();
        grid_to_vec(&g)
    }

    /// `V diag(f) V^T x`.
    pub fn apply_spectral(&self, x: &[f64], f: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut c = self.forward(x);
        for (k, ck) in c.iter_mut().enumerate() {
            *ck *= f(k);
        }
        self.inverse(&c)
    }

    /// Diagonal of `V diag(f) V^T`.
    pub fn diagonal_of(&self, f: impl Fn(usize) -> f64) -> Vec<f64> {
        let sq_row = self.basis_row.map(|v| v * v);
        let sq_col = self.basis_col.map(|v| v * v);
        let m = DMatrix::from_fn(self.nrow, self.ncol, |p, q| f(p * self.ncol + q));
        let g = sq_row * m * sq_col.transpose();
        grid_to_vec(&g)
    }

    /// Basis vector of mode `k`.
    pub fn mode(&self, k: usize) -> Vec<f64> {
        let (p, q) = (k / self.ncol, k % self.ncol);
        let mut out = Vec::with_capacity(self.nrow * self.ncol);
        for r in 0..self.nrow {
            for c in 0..self.ncol {
                out.push(self.basis_row[(r, p)] * self.basis_col[(c, q)]);
            }
        }
        out
    }
}

fn grid_to_vec(g: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.len());
    for r in 0..g.nrows() {
        for c in 0..g.ncols() {
            out.push(g[(r, c)]);
        }
    }
    out
}

/// Eigenvalues `(4 - 2cos(2 pi i / nrow) - 2cos(2 pi j / ncol))^2` of the RW2D
/// operator on an `nrow x ncol` torus, index `i * ncol + j`.
pub fn torus_spectrum(nrow: usize, ncol: usize) -> Result<Vec<f64>> {
    if nrow < 3 || ncol < 3 {
        return Err(LgcpError::invalid(format!(
            "torus needs at least 3x3 cells, got {nrow}x{ncol}"
        )));
    }
    let mut out = Vec::with_capacity(nrow * ncol);
    for i in 0..nrow {
        let a = 2.0 - 2.0 * (2.0 * PI * i as f64 / nrow as f64).cos();
        for j in 0..ncol {
            let b = 2.0 - 2.0 * (2.0 * PI * j as f64 / ncol as f64).cos();
            out.push((a + b) * (a + b));
        }
    }
    // the constant mode is exactly zero even if cos rounding says otherwise
    out[0] = 0.0;
    Ok(out)
}

/// Spectrum of the embedding torus used by the torus approximation.
pub fn embedding_torus_spectrum(nrow: usize, ncol: usize) -> Result<Vec<f64>> {
    torus_spectrum(TORUS_EMBEDDING * nrow, TORUS_EMBEDDING * ncol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedVariance {
    pub gv: f64,
    pub ginv_diag: Vec<f64>,
    pub method: SpectrumMethod,
}

/// Geometric mean of the marginal variances implied by `r`.
pub fn generalized_variance(r: &StructureMatrix, method: SpectrumMethod) -> Result<GeneralizedVariance> {
    let n = r.n();
    let diag = match method {
        SpectrumMethod::Exact => r.constrained_ginv_diagonal(),
        SpectrumMethod::Torus => {
            let spec = embedding_torus_spectrum(r.nrow, r.ncol)?;
            let lmax = spec.iter().cloned().fold(0.0, f64::max);
            if lmax <= 0.0 {
                return Err(LgcpError::numerical("torus spectrum is identically zero"));
            }
            let total: f64 = spec
                .iter()
                .filter(|&&l| l > NULL_SPACE_TOL * lmax)
                .map(|l| 1.0 / (r.weight * l))
                .sum();
            vec![total / spec.len() as f64; n]
        }
    };
    if let Some((i, v)) = diag.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
        return Err(LgcpError::numerical(format!(
            "non-positive marginal variance {v:.3e} at cell {i}"
        )));
    }
    let gv = (diag.iter().map(|v| v.ln()).sum::<f64>() / n as f64).exp();
    Ok(GeneralizedVariance {
        gv,
        ginv_diag: diag,
        method,
    })
}

/// RW2D structure matrix scaled to unit generalized variance.
#[derive(Debug, Clone)]
pub struct ScaledPrecision {
    pub base: StructureMatrix,
    /// `c` with `R* = c R`.
    pub scale_factor: f64,
    pub gv_before: f64,
    /// Marginal variances of the constrained generalized inverse of `R*`.
    pub ginv_diag: Vec<f64>,
    /// Eigenvalues of `R*`'s counterpart on the embedding torus.
    pub torus_spectrum: Vec<f64>,
    pub method: SpectrumMethod,
    scaled: StructureMatrix,
}

pub fn scale_to_unit_gv(r: &StructureMatrix, method: SpectrumMethod) -> Result<ScaledPrecision> {
    let before = generalized_variance(r, method)?;
    let c = before.gv;
    let scaled = r.scaled(c);
    let ginv_diag = before.ginv_diag.iter().map(|v| v / c).collect();
    let torus_spectrum = embedding_torus_spectrum(r.nrow, r.ncol)?
        .into_iter()
        .map(|l| l * scaled.weight)
        .collect();
    Ok(ScaledPrecision {
        base: r.clone(),
        scale_factor: c,
        gv_before: c,
        ginv_diag,
        torus_spectrum,
        method,
        scaled,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDiagnostics {
    pub nrow: usize,
    pub ncol: usize,
    pub scale_factor: f64,
    pub gv_before: f64,
    pub rank_deficiency: usize,
    pub method: SpectrumMethod,
    pub trend_constraints: bool,
}

impl ScaledPrecision {
    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn nrow(&self) -> usize {
        self.base.nrow
    }

    pub fn ncol(&self) -> usize {
        self.base.ncol
    }

    /// The scaled matrix `R*`.
    pub fn matrix(&self) -> &StructureMatrix {
        &self.scaled
    }

    /// Generalized variance of `R*` recomputed with the scaling method.
    pub fn gv_after(&self) -> Result<f64> {
        Ok(generalized_variance(&self.scaled, self.method)?.gv)
    }

    pub fn diagnostics(&self) -> ScaleDiagnostics {
        ScaleDiagnostics {
            nrow: self.nrow(),
            ncol: self.ncol(),
            scale_factor: self.scale_factor,
            gv_before: self.gv_before,
            rank_deficiency: self.base.rank_deficiency,
            method: self.method,
            trend_constraints: self.base.has_trend_constraints(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // D^T D from an independently built dense Laplacian.
    fn dense_rw2d(nrow: usize, ncol: usize) -> DMatrix<f64> {
        let n = nrow * ncol;
        let mut d = DMatrix::<f64>::zeros(n, n);
        for r in 0..nrow {
            for c in 0..ncol {
                let i = r * ncol + c;
                let nbrs = [
                    (r as i64 - 1, c as i64),
                    (r as i64 + 1, c as i64),
                    (r as i64, c as i64 - 1),
                    (r as i64, c as i64 + 1),
                ];
                for (rr, cc) in nbrs {
                    if rr >= 0 && cc >= 0 && (rr as usize) < nrow && (cc as usize) < ncol {
                        let j = rr as usize * ncol + cc as usize;
                        d[(i, j)] = 1.0;
                        d[(i, i)] -= 1.0;
                    }
                }
            }
        }
        d.transpose() * d
    }

    #[test]
    fn rows_sum_to_zero() {
        for (nr, nc) in [(3, 3), (4, 7), (6, 5)] {
            let r = build_rw2d(nr, nc).unwrap();
            let y = r.mul_vec(&vec![1.0; nr * nc]);
            assert!(y.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn interior_stencil_on_5x5() {
        let r = build_rw2d(5, 5).unwrap();
        let centre = 12;
        let mut vals: Vec<f64> = r.row(centre).map(|(_, v)| v).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = vec![20.0, -8.0, -8.0, -8.0, -8.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0];
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(vals, want);
        let dense = dense_rw2d(5, 5);
        for (j, v) in r.row(centre) {
            assert_eq!(v, dense[(centre, j)]);
        }
    }

    #[test]
    fn matches_dense_construction_on_4x4() {
        let r = build_rw2d(4, 4).unwrap().to_dense();
        let d = dense_rw2d(4, 4);
        assert!((r - d).abs().max() < 1e-12);
    }

    #[test]
    fn small_lattices_are_rejected() {
        assert!(build_rw2d(2, 5).is_err());
        assert!(build_rw2d(5, 2).is_err());
    }

    #[test]
    fn closed_form_spectrum_matches_dense_eigenvalues() {
        let r = build_rw2d(5, 4).unwrap();
        let mut closed = r.eigenvalues();
        closed.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut dense: Vec<f64> = r.to_dense().symmetric_eigenvalues().iter().copied().collect();
        dense.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in closed.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert_eq!(r.rank_deficiency, 1);
    }

    #[test]
    fn spectral_transform_round_trips() {
        let s = LatticeSpectrum::new(4, 6);
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let back = s.inverse(&s.forward(&x));
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn torus_spectrum_values() {
        let t = torus_spectrum(4, 4).unwrap();
        assert_eq!(t[0], 0.0);
        assert!((t[2 * 4 + 2] - 64.0).abs() < 1e-12);
        assert_eq!(t.iter().filter(|&&v| v == 0.0).count(), 1);
        let (nr, nc) = (5, 7);
        let t = torus_spectrum(nr, nc).unwrap();
        for i in 0..nr {
            for j in 0..nc {
                let mirrored = t[((nr - i) % nr) * nc + (nc - j) % nc];
                assert!((t[i * nc + j] - mirrored).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trend_constraints_remove_planes() {
        let r = build_rw2d(6, 5).unwrap().with_trend_constraints();
        let x = r.constraints[1].clone();
        let y = r.apply_constrained_ginv(&x);
        assert!(y.iter().all(|v| v.abs() < 1e-9));
        let z: Vec<f64> = (0..30).map(|i| (i as f64).cos()).collect();
        let w = r.apply_constrained_ginv(&z);
        for c in &r.constraints {
            assert!(dot(c, &w).abs() < 1e-9);
        }
    }

    #[test]
    fn band_assembly_reproduces_matrix() {
        for (nr, nc) in [(4, 7), (7, 4)] {
            let r = build_rw2d(nr, nc).unwrap();
            let order = LatticeOrder::new(nr, nc);
            let mut band = BandMatrix::zeros(r.n(), order.bandwidth());
            r.add_to_band(&mut band, &order, 1.0);
            for i in 0..r.n() {
                for j in 0..r.n() {
                    assert_eq!(band.get(order.to_band[i], order.to_band[j]), r.get(i, j));
                }
            }
        }
    }

    fn dense_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
        let eig = m.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let inv = eig
            .eigenvalues
            .map(|l| if l > NULL_SPACE_TOL * lmax { 1.0 / l } else { 0.0 });
        &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
    }

    #[test]
    fn exact_gv_matches_dense_pseudo_inverse_on_6x6() {
        let r = build_rw2d(6, 6).unwrap();
        let pinv = dense_pinv(&dense_rw2d(6, 6));
        let gv = generalized_variance(&r, SpectrumMethod::Exact).unwrap();
        for i in 0..36 {
            assert!((gv.ginv_diag[i] - pinv[(i, i)]).abs() < 1e-8);
        }
        let oracle = ((0..36).map(|i| pinv[(i, i)].ln()).sum::<f64>() / 36.0).exp();
        assert!((gv.gv - oracle).abs() < 1e-8, "{} vs {}", gv.gv, oracle);
        // frozen from the dense oracle
        assert!((gv.gv - 0.892_26).abs() < 1e-4);
    }

    #[test]
    fn pseudo_inverse_application_matches_dense() {
        let r = build_rw2d(5, 7).unwrap();
        let pinv = dense_pinv(&r.to_dense());
        let x: Vec<f64> = (0..35).map(|i| ((i * i) as f64 * 0.13).sin()).collect();
        let y = r.apply_pseudo_inverse(&x);
        let want = &pinv * DVector::from_vec(x);
        for i in 0..35 {
            assert!((y[i] - want[i]).abs() < 1e-9);
        }
        let ldet: f64 = r
            .to_dense()
            .symmetric_eigenvalues()
            .iter()
            .filter(|&&l| l > 1e-8)
            .map(|l| l.ln())
            .sum();
        assert!((r.log_generalized_determinant() - ldet).abs() < 1e-8);
    }

    #[test]
    fn scaling_reaches_unit_gv_and_is_idempotent() {
        for n in [16, 32] {
            let r = build_rw2d(n, n).unwrap();
            let s = scale_to_unit_gv(&r, SpectrumMethod::Exact).unwrap();
            assert!((s.gv_after().unwrap() - 1.0).abs() < 1e-8);
            let again = scale_to_unit_gv(s.matrix(), SpectrumMethod::Exact).unwrap();
            assert!((again.scale_factor - 1.0).abs() < 1e-8);
            let g = (s.ginv_diag.iter().map(|v| v.ln()).sum::<f64>() / s.n() as f64).exp();
            assert!((g - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn refinement_ratio_approaches_k_squared() {
        let g16 = generalized_variance(&build_rw2d(16, 16).unwrap(), SpectrumMethod::Exact).unwrap();
        let g32 = generalized_variance(&build_rw2d(32, 32).unwrap(), SpectrumMethod::Exact).unwrap();
        let ratio = g32.gv / g16.gv;
        assert!((3.4..=4.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn torus_marginals_are_constant_and_scale_to_one() {
        let r = build_rw2d(8, 10).unwrap();
        let gv = generalized_variance(&r, SpectrumMethod::Torus).unwrap();
        assert!(gv.ginv_diag.iter().all(|&v| v == gv.ginv_diag[0]));
        let s = scale_to_unit_gv(&r, SpectrumMethod::Torus).unwrap();
        assert!((s.gv_after().unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(s.torus_spectrum.iter().filter(|&&v| v == 0.0).count(), 1);
    }

    #[test]
    fn diagnostics_serialize() {
        let s = scale_to_unit_gv(&build_rw2d(4, 4).unwrap(), SpectrumMethod::Exact).unwrap();
        let json = serde_json::to_string(&s.diagnostics()).unwrap();
        let back: ScaleDiagnostics = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s.diagnostics());
        assert_eq!(back.rank_deficiency, 1);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn structure_matrix_is_psd(nr in 3usize..=12, nc in 3usize..=12) {
            let r = build_rw2d(nr, nc).unwrap().to_dense();
            let norm = r.abs().max();
            let lmin = r.symmetric_eigenvalues().min();
            proptest::prop_assert!(lmin >= -1e-10 * norm);
        }

        #[test]
        fn quadratic_form_is_squared_laplacian(
            nr in 3usize..=8,
            nc in 3usize..=8,
            seed in proptest::collection::vec(-3.0f64..3.0, 64),
        ) {
            let r = build_rw2d(nr, nc).unwrap();
            let u = &seed[..nr * nc];
            let mut want = 0.0;
            for row in 0..nr {
                for col in 0..nc {
                    let i = row * nc + col;
                    let mut lap = 0.0;
                    let nbrs = [(row.wrapping_sub(1), col), (row + 1, col), (row, col.wrapping_sub(1)), (row, col + 1)];
                    for (rr, cc) in nbrs {
                        if rr < nr && cc < nc {
                            lap += u[rr * nc + cc] - u[i];
                        }
                    }
                    want += lap * lap;
                }
            }
            let got = r.quadratic_form(u);
            proptest::prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want));
        }
    }
}
