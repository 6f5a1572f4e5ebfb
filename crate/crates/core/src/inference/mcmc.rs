//! Metropolis-within-Gibbs sampler used to cross-check the Laplace fit on
//! small lattices.
//!
//! The latent block moves by preconditioned MALA with a fixed metric taken
//! at a reference hyperparameter value; the noise is projected onto the
//! constraint subspace so every state stays feasible. The hyperparameters
//! `(ln tau, logit phi)` move by a Gaussian random walk. Under the
//! non-centred parameterization the latent prior does not depend on the
//! hyperparameters, so a run without data samples them from their prior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LgcpError, Result};
use crate::inference::fit::{coefficient_names, hyper_mode, FitOptions};
use crate::inference::laplace::LaplaceEngine;
use crate::model::{constraint_rows, dot, log_hyper_prior, log_posterior, Hyperparameters, LatentState, ModelSpec};

/// Largest lattice the dense sampler accepts.
pub const MAX_CELLS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcOptions {
    /// Iterations kept after burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Drop the likelihood and sample the prior.
    pub prior_only: bool,
    pub target_latent_acceptance: f64,
    pub target_hyper_acceptance: f64,
    pub fit: FitOptions,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions {
            iterations: 100_000,
            burn_in: 10_000,
            thin: 1,
            prior_only: false,
            target_latent_acceptance: 0.574,
            target_hyper_acceptance: 0.3,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveSize {
    pub name: String,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcResult {
    /// Coefficient names, intercept first.
    pub names: Vec<String>,
    /// One row per kept draw.
    pub beta: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub phi: Vec<f64>,
    pub acceptance_latent: f64,
    pub acceptance_hyper: f64,
    pub latent_step: f64,
    pub hyper_step: f64,
    pub ess: Vec<EffectiveSize>,
    pub warnings: Vec<String>,
}

impl McmcResult {
    pub fn beta_mean(&self) -> Vec<f64> {
        let d = self.names.len();
        let m = self.beta.len() as f64;
        (0..d).map(|j| self.beta.iter().map(|b| b[j]).sum::<f64>() / m).collect()
    }

    /// Pools chains in order.
    pub fn concat(chains: &[McmcResult]) -> Option<McmcResult> {
        let first = chains.first()?;
        let k = chains.len() as f64;
        let mut out = first.clone();
        for c in &chains[1..] {
            out.beta.extend(c.beta.iter().cloned());
            out.sigma.extend(&c.sigma);
            out.phi.extend(&c.phi);
            out.warnings.extend(c.warnings.iter().cloned());
            for (e, f) in out.ess.iter_mut().zip(&c.ess) {
                e.ess += f.ess;
            }
        }
        out.acceptance_latent = chains.iter().map(|c| c.acceptance_latent).sum::<f64>() / k;
        out.acceptance_hyper = chains.iter().map(|c| c.acceptance_hyper).sum::<f64>() / k;
        Some(out)
    }
}

/// Fixed MALA metric: `H` and a square root `K` of the constrained
/// covariance `M = K K^T`.
struct Metric {
    h: DMatrix<f64>,
    m: DMatrix<f64>,
    k: DMatrix<f64>,
}

fn metric(spec: &ModelSpec, hyper: &Hyperparameters, curvature: Option<&[f64]>) -> Result<Metric> {
    let n = spec.n();
    let d = spec.n_fixed();
    let dim = 2 * n + d;
    let a = hyper.weight_structured();
    let b = hyper.weight_unstructured();
    let x = spec.design_matrix();
    let mut h = DMatrix::zeros(dim, dim);
    if let Some(w) = curvature {
        let mut amat = DMatrix::zeros(n, dim);
        for i in 0..n {
            amat[(i, i)] = a;
            amat[(i, n + i)] = b;
            for r in 0..d {
                amat[(i, 2 * n + r)] = x[(i, r)];
            }
        }
        let wd = DMatrix::from_diagonal(&DVector::from_column_slice(w));
        h += amat.transpose() * wd * &amat;
    }
    let r = spec.prec.matrix().to_dense();
    let mut block = h.view_mut((0, 0), (n, n));
    block += &r;
    for i in 0..n {
        h[(n + i, n + i)] += 1.0;
    }
    for k in 0..d {
        h[(2 * n + k, 2 * n + k)] += spec.beta_prec;
    }
    // penalizing constrained directions leaves the conditional law unchanged
    let rows = constraint_rows(spec, hyper);
    let c = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
    let hp = &h + c.transpose() * &c;
    let chol = hp
        .clone()
        .cholesky()
        .ok_or_else(|| LgcpError::numerical("reference precision is not positive definite"))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(dim, dim))
        .ok_or_else(|| LgcpError::numerical("reference Cholesky factor is singular"))?;
    let l_inv_t = l_inv.transpose();
    let hinv = &l_inv_t * &l_inv;
    let hc = &hinv * c.transpose();
    let s = (&c * &hc)
        .cholesky()
        .ok_or_else(|| LgcpError::numerical("constraint covariance is singular"))?;
    let proj = DMatrix::identity(dim, dim) - &hc * s.solve(&c);
    let m = &proj * &hinv;
    let k = &proj * &l_inv_t;
    Ok(Metric { h: hp, m, k })
}

/// Single chain.
pub fn mcmc_oracle(spec: &ModelSpec, seed: u64, options: &McmcOptions) -> Result<McmcResult> {
    let reference = Reference::new(spec, options)?;
    run_chain(spec, &reference, ChaCha8Rng::seed_from_u64(seed), options)
}

/// Independent chains on separate random streams, run in parallel and pooled.
pub fn mcmc_chains(spec: &ModelSpec, chains: usize, seed: u64, options: &McmcOptions) -> Result<McmcResult> {
    if chains == 0 {
        return Err(LgcpError::invalid("at least one chain is required"));
    }
    let reference = Reference::new(spec, options)?;
    let runs: Vec<McmcResult> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            run_chain(spec, &reference, rng, options)
        })
        .collect::<Result<_>>()?;
    Ok(McmcResult::concat(&runs).expect("at least one chain"))
}

struct Reference {
    metric: Metric,
    start: LatentState,
    theta: [f64; 2],
    /// Posterior sd scale of the hyperparameters for the first random-walk step.
    hyper_scale: f64,
}

impl Reference {
    fn new(spec: &ModelSpec, options: &McmcOptions) -> Result<Self> {
        if spec.n() > MAX_CELLS {
            return Err(LgcpError::invalid(format!(
                "the sampler is limited to {MAX_CELLS} cells, got {}",
                spec.n()
            )));
        }
        if spec.rsr {
            return Err(LgcpError::invalid(
                "the sampler does not support restricted spatial regression (its constraints move with the hyperparameters)",
            ));
        }
        if options.prior_only {
            let hyper = Hyperparameters::from_internal([0.0, 0.0]);
            return Ok(Reference {
                metric: metric(spec, &hyper, None)?,
                start: LatentState::zeros(spec.n(), spec.p()),
                theta: [0.0, 0.0],
                hyper_scale: 1.0,
            });
        }
        let engine = LaplaceEngine::new(spec, options.fit.laplace);
        let mode = hyper_mode(&engine, &options.fit)?;
        Ok(Reference {
            metric: metric(spec, &mode.fit.hyper, Some(&mode.fit.curvature))?,
            start: mode.fit.mode.clone(),
            theta: mode.theta,
            hyper_scale: 0.5,
        })
    }
}

/// Log target and gradient over the latent vector; `None` where undefined.
fn target(spec: &ModelSpec, x: &[f64], theta: [f64; 2], prior_only: bool) -> Option<(f64, Vec<f64>)> {
    let (n, p) = (spec.n(), spec.p());
    let hyper = Hyperparameters::from_internal(theta);
    let state = LatentState::from_vec(x, n, p);
    if prior_only {
        let ru = spec.prec.matrix().mul_vec(&state.u_star);
        let mut g: Vec<f64> = ru.iter().map(|v| -v).collect();
        g.extend(state.v.iter().map(|v| -v));
        g.extend(x[2 * n..].iter().map(|b| -spec.beta_prec * b));
        let value = 0.5 * dot(&g, x) + log_hyper_prior(&hyper, spec);
        return value.is_finite().then_some((value, g));
    }
    let eval = log_posterior(&state, &hyper, spec).ok()?;
    eval.value.is_finite().then_some((eval.value, eval.gradient))
}

fn run_chain(spec: &ModelSpec, reference: &Reference, mut rng: ChaCha8Rng, options: &McmcOptions) -> Result<McmcResult> {
    let metric = &reference.metric;
    let dim = metric.h.nrows();
    let mut x = reference.start.to_vec();
    let mut theta = reference.theta;
    let (mut logp, grad) = target(spec, &x, theta, options.prior_only)
        .ok_or_else(|| LgcpError::numerical("the sampler's starting point has zero density"))?;
    let drift_of = |g: &[f64]| -> DVector<f64> { &metric.m * DVector::from_column_slice(g) };
    let mut drift = drift_of(&grad);

    let mut eps = 1.65 * (dim as f64).powf(-1.0 / 6.0);
    let mut hyper_step = 2.38 / 2f64.sqrt() * reference.hyper_scale;
    let total = options.burn_in + options.iterations;
    let thin = options.thin.max(1);
    let names = coefficient_names(spec);
    let (mut acc_l, mut acc_h) = (0usize, 0usize);
    let mut beta_draws = Vec::with_capacity(options.iterations / thin);
    let mut sigma_draws = Vec::with_capacity(options.iterations / thin);
    let mut phi_draws = Vec::with_capacity(options.iterations / thin);

    for it in 0..total {
        let adapting = it < options.burn_in;
        let rate = 1.0 / ((it + 1) as f64).powf(0.6);

        // latent block
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = &metric.k * z;
        let half = 0.5 * eps * eps;
        let prop: Vec<f64> = (0..dim).map(|i| x[i] + half * drift[i] + eps * noise[i]).collect();
        let mut accepted = false;
        if let Some((lp, g)) = target(spec, &prop, theta, options.prior_only) {
            let d_new = drift_of(&g);
            let fwd = DVector::from_fn(dim, |i, _| prop[i] - x[i] - half * drift[i]);
            let bwd = DVector::from_fn(dim, |i, _| x[i] - prop[i] - half * d_new[i]);
            let q = |r: &DVector<f64>| r.dot(&(&metric.h * r)) / (2.0 * eps * eps);
            let log_ratio = lp - logp - q(&bwd) + q(&fwd);
            if rng.random::<f64>().ln() < log_ratio {
                x = prop;
                logp = lp;
                drift = d_new;
                accepted = true;
            }
        }
        if adapting {
            let a = if accepted { 1.0 } else { 0.0 };
            eps *= (rate * (a - options.target_latent_acceptance)).exp();
        } else if accepted {
            acc_l += 1;
        }

        // hyperparameter block
        let t_new = [
            theta[0] + hyper_step * rng.sample::<f64, _>(StandardNormal),
            theta[1] + hyper_step * rng.sample::<f64, _>(StandardNormal),
        ];
        let mut accepted = false;
        if t_new.iter().all(|t| t.abs() < 50.0) {
            if let Some((lp, g)) = target(spec, &x, t_new, options.prior_only) {
                if rng.random::<f64>().ln() < lp - logp {
                    theta = t_new;
                    logp = lp;
                    drift = drift_of(&g);
                    accepted = true;
                }
            }
        }
        if adapting {
            let a = if accepted { 1.0 } else { 0.0 };
            hyper_step *= (rate * (a - options.target_hyper_acceptance)).exp();
        } else if accepted {
            acc_h += 1;
        }

        if !adapting && (it - options.burn_in).is_multiple_of(thin) {
            let mut b = vec![x[2 * spec.n()]];
            b.extend_from_slice(&x[2 * spec.n() + 1..]);
            beta_draws.push(b);
            let h = Hyperparameters::from_internal(theta);
            sigma_draws.push(h.sigma());
            phi_draws.push(h.phi);
        }
    }

    let kept = options.iterations.max(1) as f64;
    let acceptance_latent = acc_l as f64 / kept;
    let acceptance_hyper = acc_h as f64 / kept;
    let mut warnings = Vec::new();
    for (label, rate) in [("latent", acceptance_latent), ("hyperparameter", acceptance_hyper)] {
        if !(0.1..=0.9).contains(&rate) {
            let msg = format!("{label} acceptance rate {rate:.3} is outside [0.1, 0.9] after adaptation");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let mut ess: Vec<EffectiveSize> = names
        .iter()
        .enumerate()
        .map(|(j, name)| EffectiveSize {
            name: name.clone(),
            ess: effective_sample_size(&beta_draws.iter().map(|b| b[j]).collect::<Vec<_>>()),
        })
        .collect();
    ess.push(EffectiveSize {
        name: "sigma".into(),
        ess: effective_sample_size(&sigma_draws),
    });
    ess.push(EffectiveSize {
        name: "phi".into(),
        ess: effective_sample_size(&phi_draws),
    });
    Ok(McmcResult {
        names,
        beta: beta_draws,
        sigma: sigma_draws,
        phi: phi_draws,
        acceptance_latent,
        acceptance_hyper,
        latent_step: eps,
        hyper_step,
        ess,
        warnings,
    })
}

/// Effective sample size by Geyer's initial positive sequence.
pub fn effective_sample_size(draws: &[f64]) -> f64 {
    let m = draws.len();
    if m < 4 {
        return m as f64;
    }
    let mean = draws.iter().sum::<f64>() / m as f64;
    let c: Vec<f64> = draws.iter().map(|x| x - mean).collect();
    let var = c.iter().map(|x| x * x).sum::<f64>() / m as f64;
    if var <= 0.0 {
        return m as f64;
    }
    let acf = |lag: usize| -> f64 { c[..m - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / (m as f64 * var) };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while 2 * k + 1 < m {
        let mut pair = acf(2 * k) + acf(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        pair = pair.min(prev);
        sum += pair;
        prev = pair;
        k += 1;
    }
    (m as f64 / (2.0 * sum - 1.0)).min(m as f64 * (m as f64).log10())
}
