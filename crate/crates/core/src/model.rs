//! Reparameterised log-Gaussian Cox model on a lattice.
//!
//! `eta = beta0 + Z beta + tau^{-1/2} (sqrt(phi) u* + sqrt(1 - phi) v)` with
//! `y_i ~ Poisson(E_i exp(eta_i))`. The priors on `u*` and `v` have unit
//! precision; `tau` and `phi` enter only through the predictor weights.
//!
//! Latent vectors are laid out as `[u* (n), v (n), beta0, beta (p)]`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{LgcpError, Result};
use crate::igmrf::{ScaledPrecision, SpectrumMethod, NULL_SPACE_TOL};
use crate::lattice::{CountGrid, CovariateStack};
use crate::pc_priors::{PcMixPrior, PcPrecPrior};

/// Predictor values above this are rejected as implausible intensities.
pub const ETA_MAX: f64 = 40.0;

/// Default Gaussian prior precision on the fixed effects.
pub const DEFAULT_BETA_PREC: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub tau: f64,
    pub phi: f64,
}

impl Hyperparameters {
    pub fn new(tau: f64, phi: f64) -> Result<Self> {
        let h = Hyperparameters { tau, phi };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LgcpError::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(LgcpError::invalid(format!("phi must lie in (0, 1), got {}", self.phi)));
        }
        Ok(())
    }

    /// From the internal `(ln tau, logit phi)` parameterisation.
    pub fn from_internal(theta: [f64; 2]) -> Self {
        let phi = 1.0 / (1.0 + (-theta[1]).exp());
        Hyperparameters {
            tau: theta[0].exp(),
            phi,
        }
    }

    pub fn to_internal(&self) -> [f64; 2] {
        [self.tau.ln(), (self.phi / (1.0 - self.phi)).ln()]
    }

    pub fn sigma(&self) -> f64 {
        1.0 / self.tau.sqrt()
    }

    /// Weight of `u*` in the predictor, `sqrt(phi / tau)`.
    pub fn weight_structured(&self) -> f64 {
        (self.phi / self.tau).sqrt()
    }

    /// Weight of `v` in the predictor, `sqrt((1 - phi) / tau)`.
    pub fn weight_unstructured(&self) -> f64 {
        ((1.0 - self.phi) / self.tau).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub u_star: Vec<f64>,
    pub v: Vec<f64>,
}

impl LatentState {
    pub fn zeros(n: usize, p: usize) -> Self {
        LatentState {
            beta0: 0.0,
            beta: vec![0.0; p],
            u_star: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.u_star.len() + 1 + self.beta.len()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        x.extend_from_slice(&self.u_star);
        x.extend_from_slice(&self.v);
        x.push(self.beta0);
        x.extend_from_slice(&self.beta);
        x
    }

    pub fn from_vec(x: &[f64], n: usize, p: usize) -> Self {
        assert_eq!(x.len(), 2 * n + 1 + p);
        LatentState {
            u_star: x[..n].to_vec(),
            v: x[n..2 * n].to_vec(),
            beta0: x[2 * n],
            beta: x[2 * n + 1..].to_vec(),
        }
    }
}

/// Exposure `E_i` multiplying the cell intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Exposure {
    /// Physical cell area.
    #[default]
    Area,
    /// One per cell.
    Unit,
}

/// Observation model for the cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Family {
    /// Poisson counts with mean `E_i exp(eta_i)`.
    #[default]
    Poisson,
    /// `y_i ~ N(eta_i, noise_var)`: a conjugate surrogate for which the
    /// Laplace approximation is exact.
    Gaussian { y: Vec<f64>, noise_var: f64 },
}

/// Summary of the two hyperpriors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPriorSpec {
    pub u_sigma: f64,
    pub alpha_sigma: f64,
    pub lambda: f64,
    pub u_phi: f64,
    pub alpha_phi: f64,
    pub theta: f64,
    pub d_u_phi: f64,
    pub d_one: f64,
    pub phi_method: SpectrumMethod,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub counts: CountGrid,
    pub covariates: CovariateStack,
    pub prec: ScaledPrecision,
    pub prec_prior: PcPrecPrior,
    pub mix_prior: PcMixPrior,
    pub beta_prec: f64,
    pub rsr: bool,
    pub exposure: Exposure,
    pub family: Family,
    exposure_values: Vec<f64>,
}

impl ModelSpec {
    pub fn new(
        counts: CountGrid,
        covariates: CovariateStack,
        prec: ScaledPrecision,
        prec_prior: PcPrecPrior,
        mix_prior: PcMixPrior,
    ) -> Result<Self> {
        let n = counts.n();
        if counts.window.nrow != prec.nrow() || counts.window.ncol != prec.ncol() {
            return Err(LgcpError::invalid(format!(
                "count grid is {}x{} but the structure matrix is {}x{}",
                counts.window.nrow,
                counts.window.ncol,
                prec.nrow(),
                prec.ncol()
            )));
        }
        if let Some(m) = covariates.n() {
            if covariates.p() > 0 && m != n {
                return Err(LgcpError::invalid(format!(
                    "covariates have {m} cells, counts have {n}"
                )));
            }
        }
        if counts.areas.iter().any(|a| !(*a > 0.0)) {
            return Err(LgcpError::invalid("cell areas must be positive"));
        }
        let mut spec = ModelSpec {
            counts,
            covariates,
            prec,
            prec_prior,
            mix_prior,
            beta_prec: DEFAULT_BETA_PREC,
            rsr: false,
            exposure: Exposure::Area,
            family: Family::Poisson,
            exposure_values: Vec::new(),
        };
        spec.refresh_exposure();
        Ok(spec)
    }

    fn refresh_exposure(&mut self) {
        self.exposure_values = match self.exposure {
            Exposure::Area => self.counts.areas.clone(),
            Exposure::Unit => vec![1.0; self.counts.n()],
        };
    }

    pub fn with_beta_prec(mut self, beta_prec: f64) -> Result<Self> {
        if !(beta_prec > 0.0) {
            return Err(LgcpError::invalid("beta precision must be positive"));
        }
        self.beta_prec = beta_prec;
        Ok(self)
    }

    pub fn with_rsr(mut self, rsr: bool) -> Result<Self> {
        if rsr {
            check_design_rank(&self)?;
        }
        self.rsr = rsr;
        Ok(self)
    }

    pub fn with_exposure(mut self, exposure: Exposure) -> Self {
        self.exposure = exposure;
        self.refresh_exposure();
        self
    }

    pub fn with_family(mut self, family: Family) -> Result<Self> {
        if let Family::Gaussian { y, noise_var } = &family {
            if y.len() != self.n() || !(*noise_var > 0.0) {
                return Err(LgcpError::invalid("Gaussian surrogate needs n observations and positive noise"));
            }
        }
        self.family = family;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.counts.n()
    }

    pub fn p(&self) -> usize {
        self.covariates.p()
    }

    /// Number of fixed effects including the intercept.
    pub fn n_fixed(&self) -> usize {
        self.p() + 1
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.n() + self.n_fixed()
    }

    pub fn exposure_values(&self) -> &[f64] {
        &self.exposure_values
    }

    /// Covariate value `z_j` at cell `i` (`j` excludes the intercept).
    pub fn z(&self, i: usize, j: usize) -> f64 {
        self.covariates.columns[j][i]
    }

    /// `n x (p + 1)` design with a leading intercept column.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.n_fixed(), |i, j| {
            if j == 0 {
                1.0
            } else {
                self.z(i, j - 1)
            }
        })
    }

    /// `beta0 + Z beta` per cell.
    pub fn fixed_effect(&self, beta0: f64, beta: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| beta0 + beta.iter().enumerate().map(|(j, b)| b * self.z(i, j)).sum::<f64>())
            .collect()
    }

    pub fn hyper_prior_spec(&self) -> HyperPriorSpec {
        HyperPriorSpec {
            u_sigma: self.prec_prior.u_sigma,
            alpha_sigma: self.prec_prior.alpha_sigma,
            lambda: self.prec_prior.lambda,
            u_phi: self.mix_prior.u_phi,
            alpha_phi: self.mix_prior.alpha_phi,
            theta: self.mix_prior.theta,
            d_u_phi: self.mix_prior.d_u,
            d_one: self.mix_prior.d_one,
            phi_method: self.mix_prior.method,
        }
    }

    fn check_state(&self, state: &LatentState) -> Result<()> {
        if state.u_star.len() != self.n() || state.v.len() != self.n() || state.beta.len() != self.p() {
            return Err(LgcpError::invalid(format!(
                "latent state dimensions (u {}, v {}, beta {}) do not match n = {}, p = {}",
                state.u_star.len(),
                state.v.len(),
                state.beta.len(),
                self.n(),
                self.p()
            )));
        }
        Ok(())
    }
}

fn check_design_rank(spec: &ModelSpec) -> Result<()> {
    let x = spec.design_matrix();
    if x.nrows() <= x.ncols() {
        return Err(LgcpError::invalid("restricted regression needs more cells than fixed effects"));
    }
    let sv = x.svd(false, false).singular_values;
    let smax = sv.max();
    if sv.min() <= 1e-10 * smax {
        return Err(LgcpError::invalid(
            "restricted regression needs a full-rank design (intercept plus covariates)",
        ));
    }
    Ok(())
}

/// Components of the linear predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorParts {
    pub intercept: f64,
    /// `Z beta` without the intercept.
    pub fixed: Vec<f64>,
    /// `sqrt(phi / tau) u*`.
    pub structured: Vec<f64>,
    /// `sqrt((1 - phi) / tau) v`.
    pub unstructured: Vec<f64>,
    pub eta: Vec<f64>,
}

pub fn predictor_parts(state: &LatentState, hyper: &Hyperparameters, spec: &ModelSpec) -> Result<PredictorParts> {
    spec.check_state(state)?;
    let a = hyper.weight_structured();
    let b = hyper.weight_unstructured();
    let fixed = spec.fixed_effect(0.0, &state.beta);
    let structured: Vec<f64> = state.u_star.iter().map(|u| a * u).collect();
    let unstructured: Vec<f64> = state.v.iter().map(|v| b * v).collect();
    let eta = (0..spec.n())
        .map(|i| state.beta0 + fixed[i] + structured[i] + unstructured[i])
        .collect();
    Ok(PredictorParts {
        intercept: state.beta0,
        fixed,
        structured,
        unstructured,
        eta,
    })
}

pub fn linear_predictor(state: &LatentState, hyper: &Hyperparameters, spec: &ModelSpec) -> Result<Vec<f64>> {
    Ok(predictor_parts(state, hyper, spec)?.eta)
}

/// Log-likelihood with its gradient and negative curvature in `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub curvature: Vec<f64>,
}

/// Poisson cell log-likelihood `sum y (ln E + eta) - E e^eta - ln y!`.
pub fn log_likelihood(eta: &[f64], counts: &CountGrid, exposure: &[f64]) -> Result<LikelihoodEval> {
    let n = counts.n();
    if eta.len() != n || exposure.len() != n {
        return Err(LgcpError::invalid("predictor, counts and exposure lengths differ"));
    }
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(n);
    let mut curvature = Vec::with_capacity(n);
    for i in 0..n {
        let e = eta[i];
        if !(e <= ETA_MAX) {
            return Err(LgcpError::numerical(format!(
                "linear predictor {e:.3} at cell {i} exceeds {ETA_MAX}: intensity out of plausible range"
            )));
        }
        if exposure[i] <= 0.0 {
            return Err(LgcpError::invalid(format!("exposure at cell {i} is not positive")));
        }
        let y = counts.counts[i];
        let mu = exposure[i] * e.exp();
        let yf = y as f64;
        value += yf * (exposure[i].ln() + e) - mu - ln_factorial(y);
        gradient.push(yf - mu);
        curvature.push(mu);
    }
    Ok(LikelihoodEval {
        value,
        gradient,
        curvature,
    })
}

/// Log-likelihood of the configured family.
pub fn family_log_likelihood(eta: &[f64], spec: &ModelSpec) -> Result<LikelihoodEval> {
    match &spec.family {
        Family::Poisson => log_likelihood(eta, &spec.counts, spec.exposure_values()),
        Family::Gaussian { y, noise_var } => {
            let n = spec.n();
            if eta.len() != n {
                return Err(LgcpError::invalid("predictor length differs from n"));
            }
            let s2 = *noise_var;
            let norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
            let mut value = 0.0;
            let mut gradient = Vec::with_capacity(n);
            for i in 0..n {
                let r = y[i] - eta[i];
                value += norm - 0.5 * r * r / s2;
                gradient.push(r / s2);
            }
            Ok(LikelihoodEval {
                value,
                gradient,
                curvature: vec![1.0 / s2; n],
            })
        }
    }
}

/// `ln pi(ln tau) + ln pi(logit phi)`: hyperprior density in the internal
/// parameterisation (Jacobians included).
pub fn log_hyper_prior(hyper: &Hyperparameters, spec: &ModelSpec) -> f64 {
    let t = hyper.to_internal();
    spec.prec_prior.log_density_log_tau(t[0]) + spec.mix_prior.log_density_logit(t[1])
}

/// Unnormalized log posterior and its gradient in the latent layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEval {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Log-likelihood plus the Gaussian latent priors (without their
/// normalizing constants) plus the hyperprior.
pub fn log_posterior(state: &LatentState, hyper: &Hyperparameters, spec: &ModelSpec) -> Result<PosteriorEval> {
    hyper.validate()?;
    let eta = linear_predictor(state, hyper, spec)?;
    let lik = family_log_likelihood(&eta, spec)?;
    let (n, p) = (spec.n(), spec.p());
    let a = hyper.weight_structured();
    let b = hyper.weight_unstructured();
    let ru = spec.prec.matrix().mul_vec(&state.u_star);
    let uqu: f64 = ru.iter().zip(&state.u_star).map(|(x, y)| x * y).sum();
    let vv: f64 = state.v.iter().map(|x| x * x).sum();
    let bb: f64 = state.beta0 * state.beta0 + state.beta.iter().map(|x| x * x).sum::<f64>();
    let value = lik.value - 0.5 * uqu - 0.5 * vv - 0.5 * spec.beta_prec * bb + log_hyper_prior(hyper, spec);

    let g = &lik.gradient;
    let mut gradient = Vec::with_capacity(2 * n + 1 + p);
    gradient.extend((0..n).map(|i| a * g[i] - ru[i]));
    gradient.extend((0..n).map(|i| b * g[i] - state.v[i]));
    gradient.push(g.iter().sum::<f64>() - spec.beta_prec * state.beta0);
    for j in 0..p {
        let s: f64 = (0..n).map(|i| g[i] * spec.z(i, j)).sum();
        gradient.push(s - spec.beta_prec * state.beta[j]);
    }
    Ok(PosteriorEval { value, gradient })
}

/// Linear constraints `C x = 0` on the latent vector.
///
/// Always contains `1^T u* = 0` and any trend constraints of the structure
/// matrix; in restricted-regression mode adds `X^T (a u* + b v) = 0` for the
/// design `X = [1 Z]`.
pub fn constraint_rows(spec: &ModelSpec, hyper: &Hyperparameters) -> Vec<Vec<f64>> {
    let (n, d) = (spec.n(), spec.n_fixed());
    let mut rows = Vec::new();
    for c in &spec.prec.matrix().constraints {
        let mut row = vec![0.0; 2 * n + d];
        row[..n].copy_from_slice(c);
        rows.push(row);
    }
    if spec.rsr {
        rows.extend(rsr_constraints(spec, hyper));
    }
    rows
}

/// Orthogonality of the combined random component to the design span.
pub fn rsr_constraints(spec: &ModelSpec, hyper: &Hyperparameters) -> Vec<Vec<f64>> {
    let (n, d) = (spec.n(), spec.n_fixed());
    let a = hyper.weight_structured();
    let b = hyper.weight_unstructured();
    (0..d)
        .map(|j| {
            let mut row = vec![0.0; 2 * n + d];
            for i in 0..n {
                let x = if j == 0 { 1.0 } else { spec.z(i, j - 1) };
                row[i] = a * x;
                row[n + i] = b * x;
            }
            row
        })
        .collect()
}

/// Applies `Q'^{-1}` to a latent-layout vector, where `Q'` is the prior
/// precision with `11^T / n` added to the structured block.
pub fn apply_prior_covariance(spec: &ModelSpec, x: &[f64]) -> Vec<f64> {
    let n = spec.n();
    let u = &x[..n];
    let mut out = spec.prec.matrix().apply_pseudo_inverse(u);
    let mean = u.iter().sum::<f64>() / n as f64;
    out.iter_mut().for_each(|o| *o += mean);
    out.extend_from_slice(&x[n..2 * n]);
    out.extend(x[2 * n..].iter().map(|b| b / spec.beta_prec));
    out
}

/// `ln |Q'|`.
pub fn prior_log_det(spec: &ModelSpec) -> f64 {
    spec.prec.matrix().log_generalized_determinant() + spec.n_fixed() as f64 * spec.beta_prec.ln()
}

/// Conditioning-by-kriging under the prior: the closest point of the
/// constraint set in the `Q'` metric.
pub fn condition_on_constraints(spec: &ModelSpec, hyper: &Hyperparameters, state: &LatentState) -> Result<LatentState> {
    spec.check_state(state)?;
    let rows = constraint_rows(spec, hyper);
    let x = state.to_vec();
    let k = rows.len();
    let qc: Vec<Vec<f64>> = rows.iter().map(|r| apply_prior_covariance(spec, r)).collect();
    let m = DMatrix::from_fn(k, k, |i, j| dot(&rows[i], &qc[j]));
    let cx = DVector::from_fn(k, |i, _| dot(&rows[i], &x));
    let coef = m
        .cholesky()
        .ok_or_else(|| LgcpError::numerical("constraint system is singular"))?
        .solve(&cx);
    let mut out = x;
    for (j, q) in qc.iter().enumerate() {
        for (o, qi) in out.iter_mut().zip(q) {
            *o -= coef[j] * qi;
        }
    }
    Ok(LatentState::from_vec(&out, spec.n(), spec.p()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward simulation of counts and latent fields.
///
/// `u*` is drawn from the constrained scaled IGMRF through its eigenbasis,
/// `v` is standard normal. Restricted-regression mode does not alter the
/// generative model.
pub fn simulate(
    spec: &ModelSpec,
    hyper: &Hyperparameters,
    beta_true: &[f64],
    seed: u64,
) -> Result<(CountGrid, LatentState)> {
    hyper.validate()?;
    if beta_true.len() != spec.n_fixed() {
        return Err(LgcpError::invalid(format!(
            "beta_true needs {} entries (intercept first), got {}",
            spec.n_fixed(),
            beta_true.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n();
    let r = spec.prec.matrix();
    let eig = r.eigenvalues();
    let lmax = eig.iter().cloned().fold(0.0, f64::max);
    let coef: Vec<f64> = eig
        .iter()
        .map(|&l| {
            let z: f64 = StandardNormal.sample(&mut rng);
            if l > NULL_SPACE_TOL * lmax {
                z / l.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut u = r.spectrum().inverse(&coef);
    r.condition_extra_constraints(&mut u);
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let state = LatentState {
        beta0: beta_true[0],
        beta: beta_true[1..].to_vec(),
        u_star: u,
        v,
    };
    let eta = linear_predictor(&state, hyper, spec)?;
    let expo = spec.exposure_values();
    let mut counts = Vec::with_capacity(n);
    for i in 0..n {
        if eta[i] > ETA_MAX {
            return Err(LgcpError::numerical(format!(
                "simulated predictor {:.3} at cell {i} exceeds {ETA_MAX}",
                eta[i]
            )));
        }
        let mu = expo[i] * eta[i].exp();
        let y = if mu > 0.0 {
            Poisson::new(mu)
                .map_err(|e| LgcpError::numerical(format!("Poisson mean {mu}: {e}")))?
                .sample(&mut rng) as u64
        } else {
            0
        };
        counts.push(y);
    }
    let mut grid = CountGrid::from_counts(spec.counts.window, counts)?;
    grid.areas = spec.counts.areas.clone();
    Ok((grid, state))
}
