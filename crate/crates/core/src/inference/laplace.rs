//! Gaussian approximation of the latent field at fixed hyperparameters.
//!
//! The posterior precision `H = A^T W A + Q` is never formed densely. The
//! unstructured block is diagonal and eliminated analytically, leaving an
//! arrow system: the lattice-banded structured block bordered by the fixed
//! effects. Linear constraints are imposed by conditioning by kriging.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LgcpError, Result};
use crate::linalg::{ArrowFactor, ArrowMatrix, BandMatrix, LatticeOrder};
use crate::model::{
    apply_prior_covariance, constraint_rows, dot, family_log_likelihood, linear_predictor, prior_log_det,
    Family, Hyperparameters, LatentState, ModelSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceOptions {
    pub max_iter: usize,
    /// Relative tolerance on the projected gradient infinity norm.
    pub tol: f64,
    /// Replace the joint mode by a variational mean for Poisson data: the
    /// mean solves the mode equations with `exp(eta)` replaced by its
    /// expectation `exp(eta + var/2)` under the Gaussian approximation.
    pub mean_correction: bool,
}

impl Default for LaplaceOptions {
    fn default() -> Self {
        LaplaceOptions {
            max_iter: 100,
            tol: 1e-8,
            mean_correction: true,
        }
    }
}

/// Gaussian approximation at one hyperparameter value.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub hyper: Hyperparameters,
    /// Joint posterior mode of the latent vector.
    pub mode: LatentState,
    /// Approximate posterior mean; equals `mode` without mean correction.
    pub mean: LatentState,
    /// Laplace approximation of `ln p(y | hyper)`.
    pub log_marginal: f64,
    /// Latent log posterior (without hyperprior) at the mode.
    pub objective: f64,
    pub iterations: usize,
    /// Negative likelihood curvature `W` at the mode; with the hyperparameters
    /// and the prior it determines the Gaussian precision.
    pub curvature: Vec<f64>,
    /// Linear predictor at `mean`, without the exposure offset.
    pub eta: Vec<f64>,
    /// Posterior variance of each `eta_i` under the constraints.
    pub eta_var: Vec<f64>,
    /// Posterior covariance of `(beta0, beta)` under the constraints.
    pub fixed_cov: DMatrix<f64>,
}

impl LaplaceFit {
    /// Dense posterior precision `A^T W A + Q` (for small problems and tests).
    pub fn precision_dense(&self, spec: &ModelSpec) -> DMatrix<f64> {
        let n = spec.n();
        let d = spec.n_fixed();
        let dim = 2 * n + d;
        let a = self.hyper.weight_structured();
        let b = self.hyper.weight_unstructured();
        let x = spec.design_matrix();
        let mut amat = DMatrix::zeros(n, dim);
        for i in 0..n {
            amat[(i, i)] = a;
            amat[(i, n + i)] = b;
            for r in 0..d {
                amat[(i, 2 * n + r)] = x[(i, r)];
            }
        }
        let w = DMatrix::from_diagonal(&DVector::from_column_slice(&self.curvature));
        let mut h = amat.transpose() * w * &amat;
        let r = spec.prec.matrix().to_dense();
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] += r[(i, j)];
            }
            h[(n + i, n + i)] += 1.0;
        }
        for k in 0..d {
            h[(2 * n + k, 2 * n + k)] += spec.beta_prec;
        }
        h
    }
}

/// Reusable per-model workspace for repeated Laplace fits.
#[derive(Debug, Clone)]
pub struct LaplaceEngine<'a> {
    pub spec: &'a ModelSpec,
    pub options: LaplaceOptions,
    order: LatticeOrder,
    r_band: BandMatrix,
    design: DMatrix<f64>,
    /// `ln |Q'|`.
    prior_log_det: f64,
}

// Factorized curvature at one latent point.
struct Curvature<'e> {
    engine: &'e LaplaceEngine<'e>,
    a: f64,
    b: f64,
    w: Vec<f64>,
    h: Vec<f64>,
    factor: ArrowFactor,
}

impl<'a> LaplaceEngine<'a> {
    pub fn new(spec: &'a ModelSpec, options: LaplaceOptions) -> Self {
        let order = LatticeOrder::new(spec.prec.nrow(), spec.prec.ncol());
        let mut r_band = BandMatrix::zeros(spec.n(), order.bandwidth());
        spec.prec.matrix().add_to_band(&mut r_band, &order, 1.0);
        LaplaceEngine {
            spec,
            options,
            order,
            r_band,
            design: spec.design_matrix(),
            prior_log_det: prior_log_det(spec),
        }
    }

    fn n(&self) -> usize {
        self.spec.n()
    }

    fn d(&self) -> usize {
        self.spec.n_fixed()
    }

    /// Starting point: intercept at the log of the pooled rate, fields zero.
    pub fn initial_state(&self) -> LatentState {
        let mut s = LatentState::zeros(self.n(), self.spec.p());
        s.beta0 = match &self.spec.family {
            Family::Poisson => {
                let total = self.spec.counts.total() as f64;
                let expo: f64 = self.spec.exposure_values().iter().sum();
                ((total + 0.5) / expo).ln()
            }
            Family::Gaussian { y, .. } => y.iter().sum::<f64>() / y.len() as f64,
        };
        s
    }

    // Latent log posterior (no hyperprior), gradient and curvature, with the
    // likelihood evaluated at `eta + shift`.
    fn evaluate(&self, x: &[f64], hyper: &Hyperparameters, shift: Option<&[f64]>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (n, d) = (self.n(), self.d());
        let state = LatentState::from_vec(x, n, self.spec.p());
        let mut eta = linear_predictor(&state, hyper, self.spec)?;
        if let Some(sh) = shift {
            eta.iter_mut().zip(sh).for_each(|(e, s)| *e += s);
        }
        let lik = family_log_likelihood(&eta, self.spec)?;
        let a = hyper.weight_structured();
        let b = hyper.weight_unstructured();
        let u = &x[..n];
        let v = &x[n..2 * n];
        let beta = &x[2 * n..];
        let ru = self.spec.prec.matrix().mul_vec(u);
        let obj = lik.value
            - 0.5 * dot(&ru, u)
            - 0.5 * dot(v, v)
            - 0.5 * self.spec.beta_prec * dot(beta, beta);
        let g = &lik.gradient;
        let mut grad = Vec::with_capacity(2 * n + d);
        grad.extend((0..n).map(|i| a * g[i] - ru[i]));
        grad.extend((0..n).map(|i| b * g[i] - v[i]));
        for r in 0..d {
            let s: f64 = (0..n).map(|i| g[i] * self.design[(i, r)]).sum();
            grad.push(s - self.spec.beta_prec * beta[r]);
        }
        Ok((obj, grad, lik.curvature))
    }

    fn curvature(&self, hyper: &Hyperparameters, w: Vec<f64>) -> Result<Curvature<'_>> {
        let (n, d) = (self.n(), self.d());
        let a = hyper.weight_structured();
        let b = hyper.weight_unstructured();
        let h: Vec<f64> = w.iter().map(|wi| b * b * wi + 1.0).collect();
        let mut band = self.r_band.clone();
        for i in 0..n {
            band.add_diag(self.order.to_band[i], a * a * w[i] / h[i]);
        }
        let mut arrow = ArrowMatrix::new(band, d);
        for r in 0..d {
            let row = arrow.border_row_mut(r);
            for i in 0..n {
                row[self.order.to_band[i]] = a * w[i] / h[i] * self.design[(i, r)];
            }
        }
        for r in 0..d {
            for s in 0..=r {
                let v: f64 = (0..n)
                    .map(|i| w[i] / h[i] * self.design[(i, r)] * self.design[(i, s)])
                    .sum();
                arrow.corner[(r, s)] = v;
                arrow.corner[(s, r)] = v;
            }
            arrow.corner[(r, r)] += self.spec.beta_prec;
        }
        let factor = arrow.factor()?;
        Ok(Curvature {
            engine: self,
            a,
            b,
            w,
            h,
            factor,
        })
    }

    // Constrained Newton ascent on the latent objective from a feasible `x`.
    fn newton(
        &self,
        hyper: &Hyperparameters,
        rows: &[Vec<f64>],
        project: &dyn Fn(&[f64]) -> Vec<f64>,
        mut x: Vec<f64>,
        shift: Option<&[f64]>,
    ) -> Result<(Vec<f64>, f64, Vec<f64>, usize)> {
        let k = rows.len();
        let projected_norm = |g: &[f64]| -> f64 { project(g).iter().fold(0.0, |m, v| m.max(v.abs())) };
        let (mut obj, mut grad, mut w) = self.evaluate(&x, hyper, shift)?;
        let mut iterations = 0;
        loop {
            let curv = self.curvature(hyper, w.clone())?;
            let cx = DVector::from_fn(k, |i, _| dot(&rows[i], &x));
            let norm = projected_norm(&grad);
            if norm < self.options.tol * (1.0 + obj.abs()) && cx.amax() < 1e-8 {
                break;
            }
            if iterations >= self.options.max_iter {
                return Err(LgcpError::NonConvergence {
                    iterations,
                    last: norm,
                    context: format!(
                        "latent mode at tau = {:.4e}, phi = {:.4}",
                        hyper.tau, hyper.phi
                    ),
                });
            }
            iterations += 1;
            let y: Vec<Vec<f64>> = rows.iter().map(|c| curv.solve(c)).collect();
            let m = DMatrix::from_fn(k, k, |i, j| dot(&rows[i], &y[j]));
            let mut step = curv.solve(&grad);
            let cs = DVector::from_fn(k, |i, _| dot(&rows[i], &step)) + cx;
            let coef = m
                .cholesky()
                .ok_or_else(|| LgcpError::numerical("constraint system of the Newton step is singular"))?
                .solve(&cs);
            for (j, yj) in y.iter().enumerate() {
                for (s, yv) in step.iter_mut().zip(yj) {
                    *s -= coef[j] * yv;
                }
            }
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi + scale * si).collect();
                if let Ok((o, g, wt)) = self.evaluate(&trial, hyper, shift) {
                    if o >= obj - 1e-12 * (1.0 + obj.abs()) {
                        x = trial;
                        obj = o;
                        grad = g;
                        w = wt;
                        accepted = true;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                return Err(LgcpError::NonConvergence {
                    iterations,
                    last: norm,
                    context: "line search failed to improve the latent objective".into(),
                });
            }
        }

        Ok((x, obj, w, iterations))
    }

    /// Laplace fit at `hyper`, optionally warm-started.
    pub fn fit(&self, hyper: &Hyperparameters, init: Option<&LatentState>) -> Result<LaplaceFit> {
        hyper.validate()?;
        let (n, d) = (self.n(), self.d());
        let dim = 2 * n + d;
        // an orthonormal basis of the constraint rows leaves every result
        // unchanged and keeps the kriging systems well conditioned
        let rows = orthonormalize(constraint_rows(self.spec, hyper))?;
        let k = rows.len();
        // Euclidean projector onto the constraint null space
        let cct = DMatrix::from_fn(k, k, |i, j| dot(&rows[i], &rows[j]));
        let cct_chol = cct
            .clone()
            .cholesky()
            .ok_or_else(|| LgcpError::invalid("latent constraints are linearly dependent"))?;
        let project = |g: &[f64]| -> Vec<f64> {
            let cg = DVector::from_fn(k, |i, _| dot(&rows[i], g));
            let mu = cct_chol.solve(&cg);
            (0..dim)
                .map(|t| g[t] - (0..k).map(|i| rows[i][t] * mu[i]).sum::<f64>())
                .collect()
        };
        // the Newton steps keep feasibility only from a feasible start
        let x0 = project(&match init {
            Some(s) => s.to_vec(),
            None => self.initial_state().to_vec(),
        });
        let (x, obj, w, iterations) = match self.newton(hyper, &rows, &project, x0, None) {
            Ok(v) => v,
            Err(_) if init.is_some() => {
                let x0 = project(&self.initial_state().to_vec());
                self.newton(hyper, &rows, &project, x0, None)?
            }
            Err(e) => return Err(e),
        };

        let curv = self.curvature(hyper, w)?;
        let y: Vec<Vec<f64>> = rows.iter().map(|c| curv.solve(c)).collect();
        let m = DMatrix::from_fn(k, k, |i, j| dot(&rows[i], &y[j]));
        let m = (&m + m.transpose()) * 0.5;
        let m_chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| LgcpError::numerical("constraint covariance is not positive definite"))?;
        let m_logdet = 2.0 * m_chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let m_inv = m_chol.inverse();

        let qc: Vec<Vec<f64>> = rows.iter().map(|c| apply_prior_covariance(self.spec, c)).collect();
        let mq = DMatrix::from_fn(k, k, |i, j| dot(&rows[i], &qc[j]));
        let mq_logdet = mq
            .cholesky()
            .map(|c| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
            .ok_or_else(|| LgcpError::numerical("prior constraint covariance is not positive definite"))?;

        // obj = loglik - x^T Q x / 2 at the mode
        let log_marginal =
            obj + 0.5 * (self.prior_log_det + mq_logdet) - 0.5 * (curv.log_det() + m_logdet);

        // eta variance with the kriging correction
        let mut eta_var = curv.eta_variance();
        let ay: Vec<Vec<f64>> = y.iter().map(|yj| curv.project_eta(yj)).collect();
        for (i, ev) in eta_var.iter_mut().enumerate() {
            let t = DVector::from_fn(k, |j, _| ay[j][i]);
            *ev -= (t.transpose() * &m_inv * &t)[(0, 0)];
            if *ev < 0.0 {
                *ev = 0.0;
            }
        }
        let mut fixed_cov = curv.factor.border_covariance();
        let yb = DMatrix::from_fn(d, k, |r, j| y[j][2 * n + r]);
        fixed_cov -= &yb * &m_inv * yb.transpose();
        if (0..d).any(|r| !(fixed_cov[(r, r)] > 0.0)) {
            return Err(LgcpError::numerical(format!(
                "conditional fixed-effect variance lost to cancellation at tau = {:.4e}",
                hyper.tau
            )));
        }

        let mode = LatentState::from_vec(&x, n, self.spec.p());
        let mean = if self.options.mean_correction && matches!(self.spec.family, Family::Poisson) {
            let half_var: Vec<f64> = eta_var.iter().map(|v| 0.5 * v).collect();
            // a correction that overflows the intensity bound keeps the mode
            match self.newton(hyper, &rows, &project, x.clone(), Some(&half_var)) {
                Ok((xm, _, _, _)) => LatentState::from_vec(&xm, n, self.spec.p()),
                Err(_) => mode.clone(),
            }
        } else {
            mode.clone()
        };
        let eta = linear_predictor(&mean, hyper, self.spec)?;

        Ok(LaplaceFit {
            hyper: *hyper,
            mode,
            mean,
            log_marginal,
            objective: obj,
            iterations,
            curvature: curv.w.clone(),
            eta,
            eta_var,
            fixed_cov,
        })
    }
}

impl Curvature<'_> {
    fn log_det(&self) -> f64 {
        self.h.iter().map(|v| v.ln()).sum::<f64>() + self.factor.log_det()
    }

    /// `H^{-1} r` in the latent layout.
    fn solve(&self, r: &[f64]) -> Vec<f64> {
        let e = self.engine;
        let (n, d) = (e.n(), e.d());
        let (a, b) = (self.a, self.b);
        let rv = &r[n..2 * n];
        let mut red = vec![0.0; n + d];
        for i in 0..n {
            red[e.order.to_band[i]] = r[i] - a * b * self.w[i] / self.h[i] * rv[i];
        }
        for k in 0..d {
            let s: f64 = (0..n)
                .map(|i| e.design[(i, k)] * b * self.w[i] / self.h[i] * rv[i])
                .sum();
            red[n + k] = r[2 * n + k] - s;
        }
        let sol = self.factor.solve(&red);
        let mut out = vec![0.0; 2 * n + d];
        for i in 0..n {
            out[i] = sol[e.order.to_band[i]];
        }
        out[2 * n..].copy_from_slice(&sol[n..]);
        for i in 0..n {
            let xb: f64 = (0..d).map(|k| e.design[(i, k)] * sol[n + k]).sum();
            out[n + i] = (rv[i] - a * b * self.w[i] * out[i] - b * self.w[i] * xb) / self.h[i];
        }
        out
    }

    /// `A x`: the predictor contribution of a latent-layout vector.
    fn project_eta(&self, x: &[f64]) -> Vec<f64> {
        let e = self.engine;
        let (n, d) = (e.n(), e.d());
        (0..n)
            .map(|i| {
                self.a * x[i]
                    + self.b * x[n + i]
                    + (0..d).map(|k| e.design[(i, k)] * x[2 * n + k]).sum::<f64>()
            })
            .collect()
    }

    /// Unconstrained `Var(eta_i)`.
    fn eta_variance(&self) -> Vec<f64> {
        let e = self.engine;
        let (n, d) = (e.n(), e.d());
        let mut weights = vec![0.0; n * d];
        for pos in 0..n {
            let cell = e.order.to_cell[pos];
            for k in 0..d {
                weights[pos * d + k] = e.design[(cell, k)];
            }
        }
        let var_c = self.factor.combined_variance(self.a, &weights);
        (0..n)
            .map(|i| {
                let h = self.h[i];
                var_c[e.order.to_band[i]] / (h * h) + self.b * self.b / h
            })
            .collect()
    }
}

// Modified Gram-Schmidt on the rows.
fn orthonormalize(mut rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    for i in 0..rows.len() {
        let scale = dot(&rows[i], &rows[i]).sqrt();
        for j in 0..i {
            let c = dot(&rows[i], &rows[j]);
            let (done, rest) = rows.split_at_mut(i);
            rest[0].iter_mut().zip(&done[j]).for_each(|(x, q)| *x -= c * q);
        }
        let norm = dot(&rows[i], &rows[i]).sqrt();
        if !(norm > 1e-10 * scale) {
            return Err(LgcpError::invalid("latent constraints are linearly dependent"));
        }
        rows[i].iter_mut().for_each(|x| *x /= norm);
    }
    Ok(rows)
}

/// Laplace fit with default options.
pub fn laplace_fit(spec: &ModelSpec, hyper: &Hyperparameters) -> Result<LaplaceFit> {
    LaplaceEngine::new(spec, LaplaceOptions::default()).fit(hyper, None)
}

/// True for failures that only mean the hyperparameter value is implausible
/// (as opposed to a malformed model).
pub fn is_recoverable(err: &LgcpError) -> bool {
    matches!(err, LgcpError::Numerical(_) | LgcpError::NonConvergence { .. })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_spec;
    use crate::model::{log_posterior, Family};

    // Dense constrained prior covariance of the latent vector.
    fn dense_prior_cov(spec: &ModelSpec, hyper: &Hyperparameters) -> DMatrix<f64> {
        let dim = spec.latent_dim();
        let mut qinv = DMatrix::zeros(dim, dim);
        let mut e = vec![0.0; dim];
        for j in 0..dim {
            e[j] = 1.0;
            qinv.set_column(j, &DVector::from_vec(apply_prior_covariance(spec, &e)));
            e[j] = 0.0;
        }
        let rows = constraint_rows(spec, hyper);
        let c = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        let qc = &qinv * c.transpose();
        let m = &c * &qc;
        &qinv - &qc * m.try_inverse().unwrap() * qc.transpose()
    }

    fn design_a(spec: &ModelSpec, hyper: &Hyperparameters) -> DMatrix<f64> {
        let n = spec.n();
        let x = spec.design_matrix();
        DMatrix::from_fn(n, spec.latent_dim(), |i, j| {
            if j < n {
                if i == j { hyper.weight_structured() } else { 0.0 }
            } else if j < 2 * n {
                if i + n == j { hyper.weight_unstructured() } else { 0.0 }
            } else {
                x[(i, j - 2 * n)]
            }
        })
    }

    fn gaussian_spec(rsr: bool) -> (ModelSpec, Vec<f64>) {
        let spec = toy_spec(4, 4, 1, 21);
        let y: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.9).sin() + 0.3).collect();
        let spec = spec
            .with_family(Family::Gaussian { y: y.clone(), noise_var: 0.4 })
            .unwrap()
            .with_rsr(rsr)
            .unwrap();
        (spec, y)
    }

    #[test]
    fn gaussian_surrogate_evidence_is_exact() {
        for rsr in [false, true] {
            let (spec, y) = gaussian_spec(rsr);
            let hyper = Hyperparameters::new(1.7, 0.35).unwrap();
            let fit = laplace_fit(&spec, &hyper).unwrap();
            let a = design_a(&spec, &hyper);
            let cov = &a * dense_prior_cov(&spec, &hyper) * a.transpose()
                + DMatrix::identity(16, 16) * 0.4;
            let chol = cov.clone().cholesky().unwrap();
            let yv = DVector::from_vec(y);
            let quad = (yv.transpose() * chol.solve(&yv))[(0, 0)];
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let exact = -0.5 * (quad + logdet + 16.0 * (2.0 * std::f64::consts::PI).ln());
            assert!((fit.log_marginal - exact).abs() < 1e-8, "rsr {rsr}: {} vs {exact}", fit.log_marginal);
        }
    }

    #[test]
    fn gaussian_surrogate_moments_are_exact() {
        let (spec, y) = gaussian_spec(false);
        let hyper = Hyperparameters::new(0.6, 0.8).unwrap();
        let fit = laplace_fit(&spec, &hyper).unwrap();
        let a = design_a(&spec, &hyper);
        let s = dense_prior_cov(&spec, &hyper);
        let cov_y = &a * &s * a.transpose() + DMatrix::identity(16, 16) * 0.4;
        let gain = &s * a.transpose() * cov_y.clone().try_inverse().unwrap();
        let mean = &gain * DVector::from_vec(y);
        let post = &s - &gain * &a * &s;
        let eta_mean = &a * &mean;
        let eta_cov = &a * &post * a.transpose();
        for i in 0..16 {
            assert!((fit.eta[i] - eta_mean[i]).abs() < 1e-8);
            assert!((fit.eta_var[i] - eta_cov[(i, i)]).abs() < 1e-8);
        }
        for r in 0..2 {
            for c in 0..2 {
                assert!((fit.fixed_cov[(r, c)] - post[(32 + r, 32 + c)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mean_correction_matches_gamma_posterior_of_rate() {
        // without a field, exp(beta0) has a Gamma(N, A) posterior under a flat prior
        let spec = toy_spec(6, 6, 0, 21);
        let fit = laplace_fit(&spec, &Hyperparameters::new(1e8, 0.5).unwrap()).unwrap();
        let total = spec.counts.total() as f64;
        let area: f64 = spec.exposure_values().iter().sum();
        let digamma = total.ln() - 0.5 / total - 1.0 / (12.0 * total * total) + 1.0 / (120.0 * total.powi(4));
        assert!((fit.mode.beta0 - (total / area).ln()).abs() < 1e-3);
        assert!((fit.mean.beta0 - (digamma - area.ln())).abs() < 2e-4, "{} vs {}", fit.mean.beta0, digamma - area.ln());
    }

    #[test]
    fn zero_counts_pull_intercept_down() {
        let base = toy_spec(4, 4, 0, 3);
        let counts = crate::lattice::CountGrid::from_counts(base.counts.window, vec![0; 16]).unwrap();
        let spec = ModelSpec::new(counts, base.covariates.clone(), base.prec.clone(), base.prec_prior, base.mix_prior.clone())
            .unwrap();
        let fit = laplace_fit(&spec, &Hyperparameters::new(2.0, 0.5).unwrap()).unwrap();
        assert!(fit.mode.beta0 < 0.0);
        assert!(fit.mode.u_star.iter().all(|u| u.abs() < 1e-3));
        assert!(fit.mode.v.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn poisson_mode_is_constrained_stationary_point() {
        let spec = toy_spec(5, 6, 2, 4).with_rsr(true).unwrap();
        let hyper = Hyperparameters::new(1.3, 0.6).unwrap();
        let fit = laplace_fit(&spec, &hyper).unwrap();
        let rows = constraint_rows(&spec, &hyper);
        let x = fit.mode.to_vec();
        for r in &rows {
            assert!(dot(r, &x).abs() < 1e-8);
        }
        let g = log_posterior(&fit.mode, &hyper, &spec).unwrap().gradient;
        let k = rows.len();
        let c = DMatrix::from_fn(k, x.len(), |i, j| rows[i][j]);
        let gv = DVector::from_vec(g);
        let mu = (&c * c.transpose()).try_inverse().unwrap() * (&c * &gv);
        let resid = gv - c.transpose() * mu;
        assert!(resid.amax() < 1e-6);
    }

    #[test]
    fn poisson_variances_match_dense_inverse() {
        let spec = toy_spec(4, 5, 1, 5);
        let hyper = Hyperparameters::new(0.9, 0.4).unwrap();
        let fit = laplace_fit(&spec, &hyper).unwrap();
        let h = fit.precision_dense(&spec);
        let hinv = h.try_inverse().unwrap();
        let rows = constraint_rows(&spec, &hyper);
        let c = DMatrix::from_fn(rows.len(), spec.latent_dim(), |i, j| rows[i][j]);
        let hc = &hinv * c.transpose();
        let post = &hinv - &hc * (&c * &hc).try_inverse().unwrap() * hc.transpose();
        let a = design_a(&spec, &hyper);
        let eta_cov = &a * &post * a.transpose();
        for i in 0..20 {
            assert!((fit.eta_var[i] - eta_cov[(i, i)]).abs() < 1e-9);
        }
    }
}
