//! Banded Cholesky with a dense border ("arrowhead" systems).
//!
//! The latent Hessians in this crate are a lattice-banded block (the
//! structured field) coupled to a handful of dense rows (regression
//! coefficients). Ordering the lattice along its shorter side keeps the
//! half-bandwidth at `2 * min(nrow, ncol)`; the border is handled by a Schur
//! complement.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{LgcpError, Result};

/// Symmetric matrix stored by its lower band, row by row.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    // entry (i, j), 0 <= i - j <= bw, at data[i * (bw + 1) + (i - j)]
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        BandMatrix {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Entry (i, j) of the symmetric matrix; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to the symmetric pair (i, j)/(j, i).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn add_diag(&mut self, i: usize, v: f64) {
        let k = self.idx(i, i);
        self.data[k] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.data[self.idx(i, i)] * x[i];
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn cholesky(&self) -> Result<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let mut l = self.data.clone();
        let at = |i: usize, j: usize| i * (bw + 1) + (i - j);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = l[at(i, j)];
                for k in klo..j {
                    s -= l[at(i, k)] * l[at(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(LgcpError::numerical(format!(
                            "band matrix is not positive definite (pivot {i} = {s:.3e})"
                        )));
                    }
                    l[at(i, i)] = s.sqrt();
                } else {
                    l[at(i, j)] = s / l[at(j, j)];
                }
            }
        }
        Ok(BandCholesky { n, bw, l })
    }
}

/// Lower factor `L` with `A = L L^T`, same band layout as [`BandMatrix`].
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + (i - j)]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.at(i, i).ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn forward(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let mut s = b[i];
            for k in lo..i {
                s -= self.at(i, k) * b[k];
            }
            b[i] = s / self.at(i, i);
        }
    }

    /// Solves `L^T x = y` in place.
    pub fn backward(&self, y: &mut [f64]) {
        for i in (0..self.n).rev() {
            let hi = (i + self.bw).min(self.n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.at(k, i) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.forward(b);
        self.backward(b);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Entries of `A^{-1}` inside the band (Takahashi recursion).
    pub fn selected_inverse(&self) -> BandMatrix {
        let (n, bw) = (self.n, self.bw);
        let mut s = BandMatrix::zeros(n, bw);
        for j in (0..n).rev() {
            let ljj = self.at(j, j);
            let hi = (j + bw).min(n - 1);
            for i in (j..=hi).rev() {
                let mut acc = if i == j { 1.0 / ljj } else { 0.0 };
                for k in j + 1..=hi {
                    acc -= self.at(k, j) * s.get(k, i);
                }
                let idx = s.idx(i, j);
                s.data[idx] = acc / ljj;
            }
        }
        s
    }

    /// Diagonal of `A^{-1}`.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let sel = self.selected_inverse();
        (0..self.n).map(|i| sel.get(i, i)).collect()
    }
}

/// Symmetric positive definite system `[[B, C^T], [C, D]]` with banded `B`
/// (size `nb`) and a dense border `C` (`nd x nb`).
#[derive(Debug, Clone)]
pub struct ArrowMatrix {
    pub band: BandMatrix,
    /// Row-major `nd x nb`.
    pub border: Vec<f64>,
    pub corner: DMatrix<f64>,
}

impl ArrowMatrix {
    pub fn new(band: BandMatrix, nd: usize) -> Self {
        let nb = band.n();
        ArrowMatrix {
            band,
            border: vec![0.0; nd * nb],
            corner: DMatrix::zeros(nd, nd),
        }
    }

    pub fn nb(&self) -> usize {
        self.band.n()
    }

    pub fn nd(&self) -> usize {
        self.corner.nrows()
    }

    pub fn border_row(&self, r: usize) -> &[f64] {
        let nb = self.nb();
        &self.border[r * nb..(r + 1) * nb]
    }

    pub fn border_row_mut(&mut self, r: usize) -> &mut [f64] {
        let nb = self.nb();
        &mut self.border[r * nb..(r + 1) * nb]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (nb, nd) = (self.nb(), self.nd());
        let mut m = DMatrix::zeros(nb + nd, nb + nd);
        m.view_mut((0, 0), (nb, nb)).copy_from(&self.band.to_dense());
        for r in 0..nd {
            for i in 0..nb {
                let v = self.border[r * nb + i];
                m[(nb + r, i)] = v;
                m[(i, nb + r)] = v;
            }
        }
        m.view_mut((nb, nb), (nd, nd)).copy_from(&self.corner);
        m
    }

    pub fn factor(&self) -> Result<ArrowFactor> {
        let (nb, nd) = (self.nb(), self.nd());
        let chol = self.band.cholesky()?;
        // G = B^{-1} C^T, stored row-major as nd x nb; Y = L^{-1} C^T likewise.
        let mut g = self.border.clone();
        let mut schur = self.corner.clone();
        let mut y = self.border.clone();
        for r in 0..nd {
            chol.forward(&mut y[r * nb..(r + 1) * nb]);
        }
        for r in 0..nd {
            for s in 0..=r {
                let yr = &y[r * nb..(r + 1) * nb];
                let ys = &y[s * nb..(s + 1) * nb];
                let dot: f64 = yr.iter().zip(ys).map(|(a, b)| a * b).sum();
                schur[(r, s)] -= dot;
                if s != r {
                    schur[(s, r)] -= dot;
                }
            }
        }
        for r in 0..nd {
            let row = &mut g[r * nb..(r + 1) * nb];
            row.copy_from_slice(&y[r * nb..(r + 1) * nb]);
            chol.backward(row);
        }
        let schur_chol = Cholesky::new(schur.clone()).ok_or_else(|| {
            LgcpError::numerical("Schur complement of the border block is not positive definite")
        })?;
        Ok(ArrowFactor {
            chol,
            g,
            schur_chol,
            nb,
            nd,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ArrowFactor {
    chol: BandCholesky,
    g: Vec<f64>,
    schur_chol: Cholesky<f64, Dyn>,
    nb: usize,
    nd: usize,
}

impl ArrowFactor {
    pub fn nb(&self) -> usize {
        self.nb
    }

    pub fn nd(&self) -> usize {
        self.nd
    }

    pub fn log_det(&self) -> f64 {
        let sl = self.schur_chol.l_dirty();
        self.chol.log_det() + 2.0 * (0..self.nd).map(|i| sl[(i, i)].ln()).sum::<f64>()
    }

    fn g_row(&self, r: usize) -> &[f64] {
        &self.g[r * self.nb..(r + 1) * self.nb]
    }

    /// Solves the full system; `x` holds the band part followed by the border part.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (nb, nd) = (self.nb, self.nd);
        assert_eq!(rhs.len(), nb + nd);
        let rb = &rhs[..nb];
        // x_d = S^{-1} (r_d - C B^{-1} r_b) = S^{-1} (r_d - G^T r_b)
        let mut xd = DVector::from_fn(nd, |r, _| {
            rhs[nb + r] - self.g_row(r).iter().zip(rb).map(|(a, b)| a * b).sum::<f64>()
        });
        self.schur_chol.solve_mut(&mut xd);
        // x_b = B^{-1} r_b - G x_d
        let mut xb = self.chol.solve(rb);
        for r in 0..nd {
            let gr = self.g_row(r);
            for (x, g) in xb.iter_mut().zip(gr) {
                *x -= g * xd[r];
            }
        }
        xb.extend(xd.iter());
        xb
    }

    /// Inverse of the Schur complement: the border block of the full inverse.
    pub fn border_covariance(&self) -> DMatrix<f64> {
        self.schur_chol.inverse()
    }

    /// Diagonal of the band block of the full inverse.
    pub fn band_inverse_diagonal(&self) -> Vec<f64> {
        let mut d = self.chol.inverse_diagonal();
        let sinv = self.border_covariance();
        for (i, di) in d.iter_mut().enumerate() {
            let gi = DVector::from_fn(self.nd, |r, _| self.g[r * self.nb + i]);
            *di += (gi.transpose() * &sinv * &gi)[(0, 0)];
        }
        d
    }

    /// For every band index `i`, returns `Var(a * x_i + w_i^T x_d)` under the
    /// covariance given by the inverse, where `w_i` is row `i` of `weights`
    /// (`nb x nd`, row-major).
    pub fn combined_variance(&self, a: f64, weights: &[f64]) -> Vec<f64> {
        let (nb, nd) = (self.nb, self.nd);
        assert_eq!(weights.len(), nb * nd);
        let band_diag = self.chol.inverse_diagonal();
        let sinv = self.border_covariance();
        (0..nb)
            .map(|i| {
                // Var = a^2 (B^{-1})_ii + (a g_i - w_i)^T S^{-1} (a g_i - w_i)
                let t = DVector::from_fn(nd, |r, _| a * self.g[r * nb + i] - weights[i * nd + r]);
                a * a * band_diag[i] + (t.transpose() * &sinv * &t)[(0, 0)]
            })
            .collect()
    }
}

/// Ordering of a lattice that keeps the RW2D stencil inside a narrow band.
///
/// `to_band[cell]` is the band position of a row-major cell index.
#[derive(Debug, Clone)]
pub struct LatticeOrder {
    pub nrow: usize,
    pub ncol: usize,
    pub to_band: Vec<usize>,
    pub to_cell: Vec<usize>,
}

impl LatticeOrder {
    pub fn new(nrow: usize, ncol: usize) -> Self {
        let n = nrow * ncol;
        let mut to_band = vec![0; n];
        let mut to_cell = vec![0; n];
        for r in 0..nrow {
            for c in 0..ncol {
                let cell = r * ncol + c;
                let pos = if ncol <= nrow { cell } else { c * nrow + r };
                to_band[cell] = pos;
                to_cell[pos] = cell;
            }
        }
        LatticeOrder {
            nrow,
            ncol,
            to_band,
            to_cell,
        }
    }

    /// Half-bandwidth needed for a stencil reaching two cells along each axis.
    pub fn bandwidth(&self) -> usize {
        2 * self.nrow.min(self.ncol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(n: usize, bw: usize, seed: u64) -> BandMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = BandMatrix::zeros(n, bw);
        for i in 0..n {
            for j in i.saturating_sub(bw)..i {
                b.add(i, j, rng.random_range(-1.0..1.0));
            }
            b.add_diag(i, 2.0 * bw as f64 + 1.0 + rng.random::<f64>());
        }
        b
    }

    #[test]
    fn band_cholesky_matches_dense() {
        let b = random_band(30, 4, 1);
        let dense = b.to_dense();
        let chol = b.cholesky().unwrap();
        let rhs: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let x = chol.solve(&rhs);
        let want = dense.clone().cholesky().unwrap().solve(&DVector::from_vec(rhs));
        for (a, b) in x.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let ld = dense.cholesky().unwrap().l().diagonal().map(|v| v.ln()).sum() * 2.0;
        assert!((chol.log_det() - ld).abs() < 1e-10);
    }

    #[test]
    fn selected_inverse_matches_dense_inverse() {
        let b = random_band(25, 3, 2);
        let inv = b.to_dense().try_inverse().unwrap();
        let sel = b.cholesky().unwrap().selected_inverse();
        for i in 0..25usize {
            for j in i.saturating_sub(3)..=i {
                assert!((sel.get(i, j) - inv[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn arrow_solve_and_inverse_blocks_match_dense() {
        let nb = 20;
        let band = random_band(nb, 3, 3);
        let mut m = ArrowMatrix::new(band, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for v in m.border.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        m.corner = DMatrix::from_row_slice(2, 2, &[5.0, 0.5, 0.5, 4.0]);
        let dense = m.to_dense();
        let f = m.factor().unwrap();
        let rhs: Vec<f64> = (0..nb + 2).map(|i| (i as f64 * 0.3).cos()).collect();
        let x = f.solve(&rhs);
        let want = dense.clone().cholesky().unwrap().solve(&DVector::from_vec(rhs));
        for (a, b) in x.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let inv = dense.clone().try_inverse().unwrap();
        let d = f.band_inverse_diagonal();
        for i in 0..nb {
            assert!((d[i] - inv[(i, i)]).abs() < 1e-12);
        }
        let s = f.border_covariance();
        assert!((s[(0, 1)] - inv[(nb, nb + 1)]).abs() < 1e-12);
        let ld = dense.cholesky().unwrap().l().diagonal().map(|v| v.ln()).sum() * 2.0;
        assert!((f.log_det() - ld).abs() < 1e-10);

        // Var(a x_i + w_i^T x_d)
        let a = 0.7;
        let w: Vec<f64> = (0..nb * 2).map(|k| (k as f64 * 0.11).sin()).collect();
        let cv = f.combined_variance(a, &w);
        for i in 0..nb {
            let mut t = DVector::zeros(nb + 2);
            t[i] = a;
            t[nb] = w[i * 2];
            t[nb + 1] = w[i * 2 + 1];
            let want = (t.transpose() * &inv * &t)[(0, 0)];
            assert!((cv[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_order_uses_short_side() {
        let o = LatticeOrder::new(3, 5);
        assert_eq!(o.bandwidth(), 6);
        for cell in 0..15 {
            assert_eq!(o.to_cell[o.to_band[cell]], cell);
        }
        // neighbours two columns apart stay within the band
        assert!(o.to_band[2].abs_diff(o.to_band[0]) <= o.bandwidth());
    }
}
