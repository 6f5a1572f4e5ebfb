//! Penalised-complexity priors for the marginal precision `tau` and the
//! mixing weight `phi` of the structured + unstructured random effect.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LgcpError, Result};
use crate::igmrf::{embedding_torus_spectrum, ScaledPrecision, SpectrumMethod, NULL_SPACE_TOL};
use crate::quadrature::{adaptive_simpson, bisect, cumulative_trapezoid, interpolate, trapezoid};

/// The frequently quoted rule of thumb `E[sigma] ~ 0.31 U_sigma`. The exact
/// exponential mean is `U_sigma / (-ln alpha)`, i.e. 0.217 U for alpha = 0.01.
pub const QUOTED_SIGMA_FRACTION: f64 = 0.31;

/// Tolerance within which a slightly negative squared distance is clamped to 0.
const D2_CLAMP_TOL: f64 = 1e-10;

/// Cell count above which the exact distance with extra constraints is refused
/// (it needs a dense eigendecomposition).
pub const DENSE_EIGEN_LIMIT: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcPrecPrior {
    pub u_sigma: f64,
    pub alpha_sigma: f64,
    pub lambda: f64,
}

/// PC prior on the precision: exponential with rate `lambda` on `sigma = tau^{-1/2}`.
pub fn pc_prec_prior(u_sigma: f64, alpha_sigma: f64) -> Result<PcPrecPrior> {
    if !(u_sigma > 0.0 && u_sigma.is_finite()) {
        return Err(LgcpError::invalid(format!("U_sigma must be positive, got {u_sigma}")));
    }
    if !(alpha_sigma > 0.0 && alpha_sigma < 1.0) {
        return Err(LgcpError::invalid(format!(
            "alpha_sigma must lie in (0, 1), got {alpha_sigma}"
        )));
    }
    Ok(PcPrecPrior {
        u_sigma,
        alpha_sigma,
        lambda: -alpha_sigma.ln() / u_sigma,
    })
}

impl PcPrecPrior {
    /// `ln pi(tau) = ln(lambda/2) - 1.5 ln tau - lambda tau^{-1/2}`.
    pub fn log_density_tau(&self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (0.5 * self.lambda).ln() - 1.5 * tau.ln() - self.lambda / tau.sqrt()
    }

    pub fn density_tau(&self, tau: f64) -> f64 {
        self.log_density_tau(tau).exp()
    }

    pub fn density_sigma(&self, sigma: f64) -> f64 {
        if sigma < 0.0 {
            0.0
        } else {
            self.lambda * (-self.lambda * sigma).exp()
        }
    }

    /// Log density of `t = ln tau` (Jacobian included).
    pub fn log_density_log_tau(&self, t: f64) -> f64 {
        (0.5 * self.lambda).ln() - 0.5 * t - self.lambda * (-0.5 * t).exp()
    }

    /// Derivative of [`Self::log_density_log_tau`] in `t`.
    pub fn log_density_log_tau_grad(&self, t: f64) -> f64 {
        -0.5 + 0.5 * self.lambda * (-0.5 * t).exp()
    }

    pub fn sigma_quantile(&self, p: f64) -> f64 {
        -(-p).ln_1p() / self.lambda
    }

    pub fn mean_sigma(&self) -> f64 {
        1.0 / self.lambda
    }

    // Integral of the tau density over ln tau in [lo, hi], split into pieces so
    // the adaptive rule cannot step over the peak.
    fn integrate_log_tau(&self, lo: f64, hi: f64) -> f64 {
        let f = |t: f64| self.log_density_log_tau(t).exp();
        let pieces = 64;
        let h = (hi - lo) / pieces as f64;
        (0..pieces)
            .map(|k| {
                let a = lo + k as f64 * h;
                adaptive_simpson(&f, a, a + h, 1e-13)
            })
            .sum()
    }

    // ln tau range outside which the density carries < 1e-12 mass.
    fn log_tau_range(&self) -> (f64, f64) {
        // sigma = e^{-t/2}; sigma > 40/lambda has mass e^{-40}
        let lo = -2.0 * (40.0 / self.lambda).ln();
        // mass above t is 1 - exp(-lambda sigma) ~ lambda sigma
        let hi = 2.0 * (self.lambda * 1e12).ln();
        (lo, hi)
    }

    /// Total mass of the tau density by quadrature.
    pub fn total_mass_quadrature(&self) -> f64 {
        let (lo, hi) = self.log_tau_range();
        self.integrate_log_tau(lo, hi)
    }

    /// `P(sigma > u)` by quadrature of the tau density over `tau < u^{-2}`.
    pub fn mass_above_quadrature(&self, u: f64) -> f64 {
        let (lo, _) = self.log_tau_range();
        let t_u = -2.0 * u.ln();
        if t_u <= lo {
            return 0.0;
        }
        self.integrate_log_tau(lo, t_u)
    }
}

/// `P(sigma > u) = exp(-lambda u)`.
pub fn prec_prior_mass_above(prior: &PcPrecPrior, u: f64) -> Result<f64> {
    if !(u > 0.0) {
        return Err(LgcpError::invalid(format!("u must be positive, got {u}")));
    }
    Ok((-prior.lambda * u).exp())
}

/// `E[sigma] / U_sigma = 1 / (-ln alpha_sigma)`.
pub fn expected_sigma_fraction(prior: &PcPrecPrior) -> f64 {
    prior.mean_sigma() / prior.u_sigma
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceMeasure {
    pub kld: f64,
    pub d: f64,
}

impl DistanceMeasure {
    pub fn from_kld(kld: f64) -> Self {
        DistanceMeasure {
            kld,
            d: (2.0 * kld.max(0.0)).sqrt(),
        }
    }
}

// t - ln(1 + t) without cancellation for small t.
fn t_minus_log1p(t: f64) -> f64 {
    if t.abs() < 1e-3 {
        t * t * (0.5 - t * (1.0 / 3.0 - t * (0.25 - t / 5.0)))
    } else {
        t - t.ln_1p()
    }
}

/// Eigenvalues of the scaled covariance entering the mixing distance.
///
/// `d(phi)^2 = multiplicity * sum_k [phi (g_k - 1) - ln(1 + phi (g_k - 1))]`.
#[derive(Debug, Clone)]
pub struct MixingSpectrum {
    gamma: Vec<f64>,
    multiplicity: f64,
    pub method: SpectrumMethod,
}

impl MixingSpectrum {
    pub fn new(prec: &ScaledPrecision, method: SpectrumMethod) -> Result<Self> {
        let r = prec.matrix();
        match method {
            SpectrumMethod::Exact => {
                if r.has_trend_constraints() && r.n() > DENSE_EIGEN_LIMIT {
                    return Err(LgcpError::invalid(format!(
                        "exact mixing distance with trend constraints is limited to {DENSE_EIGEN_LIMIT} cells"
                    )));
                }
                Ok(MixingSpectrum {
                    gamma: r.constrained_ginv_eigenvalues(),
                    multiplicity: 1.0,
                    method,
                })
            }
            SpectrumMethod::Torus => {
                let spec = embedding_torus_spectrum(r.nrow, r.ncol)?;
                let lmax = spec.iter().cloned().fold(0.0, f64::max);
                let mut gamma: Vec<f64> = spec
                    .iter()
                    .filter(|&&l| l > NULL_SPACE_TOL * lmax)
                    .map(|l| 1.0 / l)
                    .collect();
                if gamma.is_empty() {
                    return Err(LgcpError::numerical("torus spectrum is identically zero"));
                }
                let mean = gamma.iter().sum::<f64>() / gamma.len() as f64;
                gamma.iter_mut().for_each(|g| *g /= mean);
                let k = (r.n() - r.constraints.len()) as f64;
                let multiplicity = k / gamma.len() as f64;
                Ok(MixingSpectrum {
                    gamma,
                    multiplicity,
                    method,
                })
            }
        }
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    fn d2(&self, phi: f64) -> f64 {
        self.multiplicity
            * self
                .gamma
                .iter()
                .map(|g| t_minus_log1p(phi * (g - 1.0)))
                .sum::<f64>()
    }

    pub fn distance(&self, phi: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&phi) {
            return Err(LgcpError::invalid(format!("phi must lie in [0, 1], got {phi}")));
        }
        let d2 = self.d2(phi);
        if d2 < 0.0 {
            if d2 < -D2_CLAMP_TOL {
                return Err(LgcpError::numerical(format!(
                    "squared mixing distance {d2:.3e} is negative at phi = {phi}"
                )));
            }
            log::warn!("clamping squared mixing distance {d2:.3e} to zero at phi = {phi}");
            return Ok(0.0);
        }
        Ok(d2.sqrt())
    }

    /// Analytic `d'(phi)`.
    pub fn distance_derivative(&self, phi: f64) -> f64 {
        let s: f64 = self
            .gamma
            .iter()
            .map(|g| (g - 1.0) * (g - 1.0) / (1.0 + phi * (g - 1.0)))
            .sum();
        let d2 = self.d2(phi);
        if phi == 0.0 || d2 <= 0.0 {
            return (0.5 * self.multiplicity * s).sqrt();
        }
        // d d^2 / d phi = m * phi * s; d' = m phi s / (2 d)
        self.multiplicity * phi * s / (2.0 * d2.sqrt())
    }
}

/// `d(phi)` for the scaled structure matrix.
pub fn phi_distance(phi: f64, prec: &ScaledPrecision, method: SpectrumMethod) -> Result<f64> {
    MixingSpectrum::new(prec, method)?.distance(phi)
}

/// PC prior on the mixing weight: truncated exponential on `d(phi)`.
#[derive(Debug, Clone)]
pub struct PcMixPrior {
    pub u_phi: f64,
    pub alpha_phi: f64,
    pub theta: f64,
    pub d_u: f64,
    pub d_one: f64,
    pub method: SpectrumMethod,
    /// `(phi, d(phi))` at the table knots.
    pub d_table: Vec<(f64, f64)>,
    /// `(logit phi, density)`, normalized by trapezoid quadrature.
    pub logit_density_table: Vec<(f64, f64)>,
    spectrum: MixingSpectrum,
}

/// Minimum number of knots in the logit density table.
pub const MIN_GRID_SIZE: usize = 64;
/// Default number of knots in the logit density table.
pub const DEFAULT_GRID_SIZE: usize = 512;

// Probability left outside the logit table in each tail.
const TABLE_TAIL_MASS: f64 = 1e-9;

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn pc_mix_prior(
    u_phi: f64,
    alpha_phi: f64,
    prec: &ScaledPrecision,
    grid_size: usize,
    method: SpectrumMethod,
) -> Result<PcMixPrior> {
    if !(u_phi > 0.0 && u_phi < 1.0) {
        return Err(LgcpError::invalid(format!("U_phi must lie in (0, 1), got {u_phi}")));
    }
    if !(alpha_phi > 0.0 && alpha_phi < 1.0) {
        return Err(LgcpError::invalid(format!("alpha_phi must lie in (0, 1), got {alpha_phi}")));
    }
    if grid_size < MIN_GRID_SIZE {
        return Err(LgcpError::invalid(format!(
            "grid_size must be at least {MIN_GRID_SIZE}, got {grid_size}"
        )));
    }
    let spectrum = MixingSpectrum::new(prec, method)?;
    let d_u = spectrum.distance(u_phi)?;
    let d_one = spectrum.distance(1.0)?;
    if !(d_one > 0.0) {
        return Err(LgcpError::numerical("d(1) is zero; the mixing prior is degenerate"));
    }
    let min_alpha = d_u / d_one;
    if alpha_phi <= min_alpha {
        return Err(LgcpError::Infeasible(format!(
            "P(phi < {u_phi}) = {alpha_phi} needs alpha_phi > d(U)/d(1) = {min_alpha:.6}"
        )));
    }
    let calib = |theta: f64| {
        let p = if theta <= 0.0 {
            min_alpha
        } else {
            (-theta * d_u).exp_m1() / (-theta * d_one).exp_m1()
        };
        p - alpha_phi
    };
    let mut hi = 1.0;
    while calib(hi) <= 0.0 {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(LgcpError::numerical("could not bracket the mixing-prior rate"));
        }
    }
    let theta = bisect(calib, 0.0, hi, 1e-14)
        .ok_or_else(|| LgcpError::numerical("mixing-prior rate bisection did not bracket"))?;
    if !(theta > 0.0) {
        return Err(LgcpError::numerical("mixing-prior rate collapsed to zero"));
    }

    let mut prior = PcMixPrior {
        u_phi,
        alpha_phi,
        theta,
        d_u,
        d_one,
        method,
        d_table: Vec::new(),
        logit_density_table: Vec::new(),
        spectrum,
    };
    prior.build_table(grid_size)?;
    Ok(prior)
}

impl PcMixPrior {
    fn norm(&self) -> f64 {
        -(-self.theta * self.d_one).exp_m1()
    }

    /// Closed-form `P(phi < u)` from the monotone distance map.
    pub fn prob_below_exact(&self, u: f64) -> Result<f64> {
        let d = self.spectrum.distance(u)?;
        Ok(-(-self.theta * d).exp_m1() / self.norm())
    }

    fn build_table(&mut self, grid_size: usize) -> Result<()> {
        let below = |x: f64| self.prob_below_exact(logistic(x)).unwrap_or(0.0);
        let x_lo = if below(-60.0) >= TABLE_TAIL_MASS {
            -60.0
        } else {
            bisect(|x| below(x) - TABLE_TAIL_MASS, -60.0, 0.0, 1e-10).unwrap_or(-60.0)
        };
        let x_hi = if 1.0 - below(60.0) >= TABLE_TAIL_MASS {
            60.0
        } else {
            bisect(|x| (1.0 - below(x)) - TABLE_TAIL_MASS, 0.0, 60.0, 1e-10).unwrap_or(60.0)
        };
        let h = (x_hi - x_lo) / (grid_size - 1) as f64;
        let xs: Vec<f64> = (0..grid_size).map(|k| x_lo + k as f64 * h).collect();
        let mut ds = Vec::with_capacity(grid_size);
        for &x in &xs {
            ds.push(self.spectrum.distance(logistic(x))?);
        }
        // centred differences of d against logit phi, one-sided at the ends
        let mut dens = Vec::with_capacity(grid_size);
        for k in 0..grid_size {
            let dd = if k == 0 {
                (ds[1] - ds[0]) / h
            } else if k == grid_size - 1 {
                (ds[k] - ds[k - 1]) / h
            } else {
                (ds[k + 1] - ds[k - 1]) / (2.0 * h)
            };
            dens.push(self.theta * (-self.theta * ds[k]).exp() / self.norm() * dd.abs());
        }
        let mass = trapezoid(&xs, &dens);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(LgcpError::numerical("mixing-prior table has no mass"));
        }
        self.d_table = xs.iter().map(|&x| logistic(x)).zip(ds).collect();
        self.logit_density_table = xs.into_iter().zip(dens.into_iter().map(|v| v / mass)).collect();
        Ok(())
    }

    pub fn spectrum(&self) -> &MixingSpectrum {
        &self.spectrum
    }

    pub fn distance(&self, phi: f64) -> Result<f64> {
        self.spectrum.distance(phi)
    }

    /// Density of the truncated exponential on `d`.
    pub fn density_d(&self, d: f64) -> f64 {
        if d < 0.0 || d > self.d_one {
            0.0
        } else {
            self.theta * (-self.theta * d).exp() / self.norm()
        }
    }

    /// Closed-form log density of `logit phi` (analytic Jacobian).
    pub fn log_density_logit(&self, x: f64) -> f64 {
        let phi = logistic(x);
        let d = match self.spectrum.distance(phi) {
            Ok(d) => d,
            Err(_) => return f64::NEG_INFINITY,
        };
        let dprime = self.spectrum.distance_derivative(phi);
        let log_jac = -softplus(-x) - softplus(x);
        self.theta.ln() - self.theta * d - self.norm().ln() + dprime.ln() + log_jac
    }

    /// Log density of `phi` on (0, 1).
    pub fn log_density_phi(&self, phi: f64) -> f64 {
        if !(phi > 0.0 && phi < 1.0) {
            return f64::NEG_INFINITY;
        }
        let x = (phi / (1.0 - phi)).ln();
        self.log_density_logit(x) - phi.ln() - (1.0 - phi).ln()
    }

    fn table_columns(&self) -> (Vec<f64>, Vec<f64>) {
        self.logit_density_table.iter().cloned().unzip()
    }

    /// Total mass of the logit density table.
    pub fn table_mass(&self) -> f64 {
        let (x, y) = self.table_columns();
        trapezoid(&x, &y)
    }

    /// `P(phi < u)` by trapezoid quadrature of the table.
    pub fn prob_below(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let (x, y) = self.table_columns();
        let cum = cumulative_trapezoid(&x, &y);
        interpolate(&x, &cum, (u / (1.0 - u)).ln())
    }

    /// Density of `phi` on a table of `phi` values (change of variables from the logit table).
    pub fn phi_density_table(&self) -> Vec<(f64, f64)> {
        self.logit_density_table
            .iter()
            .map(|&(x, dens)| {
                let p = logistic(x);
                (p, dens / (p * (1.0 - p)))
            })
            .collect()
    }
}

/// Zero-mean Gaussian KL divergence `KLD(N(0, cov1) || N(0, cov0))` on the
/// range of `cov0`.
pub fn kld_gaussian(cov1: &DMatrix<f64>, cov0: &DMatrix<f64>) -> Result<DistanceMeasure> {
    let n = cov0.nrows();
    if cov0.ncols() != n || cov1.nrows() != n || cov1.ncols() != n {
        return Err(LgcpError::invalid("covariances must be square and of equal size"));
    }
    let sym0 = (cov0 + cov0.transpose()) * 0.5;
    let sym1 = (cov1 + cov1.transpose()) * 0.5;
    let eig = sym0.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if !(lmax > 0.0) {
        return Err(LgcpError::invalid("reference covariance has empty support"));
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > NULL_SPACE_TOL * lmax)
        .collect();
    let k = keep.len();
    let v = DMatrix::from_fn(n, k, |i, j| eig.eigenvectors[(i, keep[j])]);
    let proj = &v * v.transpose();
    let outside = &sym1 - &proj * &sym1 * &proj;
    let scale = sym1.abs().max().max(1.0);
    if outside.abs().max() > 1e-8 * scale {
        return Err(LgcpError::invalid("covariances do not share a common support"));
    }
    let s1 = v.transpose() * &sym1 * &v;
    let chol = s1
        .clone()
        .cholesky()
        .ok_or_else(|| LgcpError::invalid("cov1 is singular on the support of cov0"))?;
    let logdet1: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let logdet0: f64 = keep.iter().map(|&i| eig.eigenvalues[i].ln()).sum();
    let trace: f64 = (0..k).map(|j| s1[(j, j)] / eig.eigenvalues[keep[j]]).sum();
    let kld = 0.5 * (trace - k as f64 + logdet0 - logdet1);
    Ok(DistanceMeasure::from_kld(kld))
}
