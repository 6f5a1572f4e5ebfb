//! Non-spatial Poisson regression by iteratively reweighted least squares.

use nalgebra::{DMatrix, DVector};

use crate::error::{LgcpError, Result};
use crate::inference::fit::{
    coefficient_names, expected_deviance, summarize_mixture, DicSummary, FieldSurfaces, FitDiagnostics, FitResult,
};
use crate::model::{Family, ModelSpec, ETA_MAX};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Relative change in deviance that ends the iteration.
    pub tol: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { max_iter: 100, tol: 1e-12 }
    }
}

/// Maximum-likelihood fit of `y ~ Poisson(E exp(X beta))`, summarized with
/// Wald intervals. The random components and hyperparameters are absent.
pub fn glm_fit(spec: &ModelSpec) -> Result<FitResult> {
    glm_fit_with(spec, GlmOptions::default())
}

pub fn glm_fit_with(spec: &ModelSpec, options: GlmOptions) -> Result<FitResult> {
    if !matches!(spec.family, Family::Poisson) {
        return Err(LgcpError::invalid("the GLM baseline supports the Poisson family only"));
    }
    let n = spec.n();
    let x = spec.design_matrix();
    let d = x.ncols();
    let offset: Vec<f64> = spec.exposure_values().iter().map(|e| e.ln()).collect();
    let y: Vec<f64> = spec.counts.counts.iter().map(|&c| c as f64).collect();
    let total: f64 = y.iter().sum();
    if total == 0.0 {
        return Err(LgcpError::Infeasible(
            "no events: the Poisson maximum-likelihood intercept is minus infinity".into(),
        ));
    }
    let exposure_total: f64 = offset.iter().map(|o| o.exp()).sum();
    let mut beta = DVector::zeros(d);
    beta[0] = (total / exposure_total).ln();

    let deviance = |eta: &[f64]| -> f64 {
        2.0 * (0..n)
            .map(|i| {
                let mu = eta[i].exp();
                let t = if y[i] > 0.0 { y[i] * (y[i] / mu).ln() } else { 0.0 };
                t - (y[i] - mu)
            })
            .sum::<f64>()
    };
    let predictor = |b: &DVector<f64>| -> Vec<f64> { (0..n).map(|i| offset[i] + x.row(i).dot(&b.transpose())).collect() };

    let mut eta = predictor(&beta);
    let mut dev = deviance(&eta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        iterations += 1;
        let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
        let xtwx = DMatrix::from_fn(d, d, |r, s| (0..n).map(|i| mu[i] * x[(i, r)] * x[(i, s)]).sum::<f64>());
        let score = DVector::from_fn(d, |r, _| (0..n).map(|i| (y[i] - mu[i]) * x[(i, r)]).sum());
        let chol = xtwx.cholesky().ok_or_else(|| {
            LgcpError::Infeasible("the weighted design matrix is singular (collinear covariates)".into())
        })?;
        let step = chol.solve(&score);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &beta + &step * scale;
            let e = predictor(&trial);
            let dv = deviance(&e);
            if dv.is_finite() && dv <= dev + 1e-12 * (1.0 + dev) {
                let change = (dev - dv).abs() / (1.0 + dv.abs());
                beta = trial;
                eta = e;
                dev = dv;
                accepted = true;
                converged = change < options.tol;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if eta.iter().any(|e| *e > ETA_MAX) || beta.iter().any(|b| b.abs() > 1e3 / (1.0 + beta[0].abs())) {
        return Err(LgcpError::Infeasible(
            "coefficients diverge: the covariates separate zero from positive counts".into(),
        ));
    }
    if !converged {
        return Err(LgcpError::NonConvergence {
            iterations,
            last: dev,
            context: "IRLS for the Poisson GLM".into(),
        });
    }
    let mu: Vec<f64> = eta.iter().map(|e| e.exp()).collect();
    let info = DMatrix::from_fn(d, d, |r, s| (0..n).map(|i| mu[i] * x[(i, r)] * x[(i, s)]).sum::<f64>());
    let cov = info
        .try_inverse()
        .ok_or_else(|| LgcpError::Infeasible("Fisher information is singular".into()))?;
    if (1..d).any(|r| cov[(r, r)].sqrt() > 1e3) {
        return Err(LgcpError::Infeasible(
            "coefficient variance is unbounded: the covariates separate zero from positive counts".into(),
        ));
    }

    let names = coefficient_names(spec);
    let beta_marginals = (0..d)
        .map(|r| summarize_mixture(&names[r], &[(1.0, beta[r], cov[(r, r)].sqrt())]))
        .collect();

    // linear predictor without the exposure offset, as in the spatial fit
    let lin: Vec<f64> = (0..n).map(|i| eta[i] - offset[i]).collect();
    let fixed: Vec<f64> = (0..n).map(|i| lin[i] - beta[0]).collect();
    let var: Vec<f64> = (0..n)
        .map(|i| {
            let xi = x.row(i).transpose();
            (xi.transpose() * &cov * &xi)[(0, 0)]
        })
        .collect();
    let mean_dev = expected_deviance(spec, &lin, &var);
    let dev_mean = expected_deviance(spec, &lin, &vec![0.0; n]);
    let dic = DicSummary {
        dic: 2.0 * mean_dev - dev_mean,
        mean_deviance: mean_dev,
        deviance_at_mean: dev_mean,
        effective_parameters: mean_dev - dev_mean,
    };
    Ok(FitResult {
        beta_marginals,
        sigma_marginal: None,
        phi_marginal: None,
        fields: FieldSurfaces {
            nrow: spec.prec.nrow(),
            ncol: spec.prec.ncol(),
            intercept: beta[0],
            fixed,
            structured: vec![0.0; n],
            unstructured: vec![0.0; n],
            eta: lin,
        },
        dic,
        grid: None,
        hyper_prior: None,
        diagnostics: FitDiagnostics {
            model: "glm".into(),
            n,
            p: spec.p(),
            mode_internal: None,
            hessian: None,
            optimizer_iterations: iterations,
            optimizer_converged: converged,
            max_newton_iterations: iterations,
            grid_bounds: None,
            failed_nodes: 0,
            gv_method: spec.prec.method,
            phi_method: spec.mix_prior.method,
            exposure: spec.exposure,
            rsr: false,
            trend_constraints: spec.prec.base.has_trend_constraints(),
            beta_prec: 0.0,
        },
    })
}
