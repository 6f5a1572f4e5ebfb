//! Integration over `(ln tau, logit phi)` on a rotated grid of Laplace fits.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::cell::RefCell;

use crate::error::{LgcpError, Result};
use crate::igmrf::SpectrumMethod;
use crate::inference::laplace::{is_recoverable, LaplaceEngine, LaplaceFit, LaplaceOptions};
use crate::inference::optim::{nelder_mead, NelderMeadOptions};
use crate::model::{log_hyper_prior, Exposure, Family, HyperPriorSpec, Hyperparameters, LatentState, ModelSpec};
use crate::quadrature::{cumulative_trapezoid, interpolate};

/// Bounds of the internal hyperparameters searched by the optimizer.
const LOG_TAU_RANGE: (f64, f64) = (-20.0, 30.0);
const LOGIT_PHI_RANGE: (f64, f64) = (-15.0, 15.0);
/// Curvature floor (in internal units) for flat directions of the log joint.
const MIN_CURVATURE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Nodes per axis of the hyperparameter grid.
    pub grid_points: usize,
    /// Half-width of the grid in posterior standard deviations.
    pub span_sd: f64,
    pub max_expansions: usize,
    pub expansion_factor: f64,
    /// Largest normalized weight a boundary node may carry.
    pub boundary_mass: f64,
    pub laplace: LaplaceOptions,
    pub optimizer_max_iter: usize,
    /// Finite-difference step for the Hessian of the log joint.
    pub hessian_step: f64,
    /// Points in the smoothed sigma and phi density tables.
    pub density_points: usize,
    /// Starting `(ln tau, logit phi)` for the mode search.
    pub start: [f64; 2],
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            grid_points: 9,
            span_sd: 3.0,
            max_expansions: 3,
            expansion_factor: 1.5,
            boundary_mass: 0.01,
            laplace: LaplaceOptions::default(),
            optimizer_max_iter: 400,
            hessian_step: 0.05,
            density_points: 256,
            start: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CoefficientSummary {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn covers(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Posterior summary of a hyperparameter with a smoothed density table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// `(value, density)` on the natural scale.
    pub density: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSurfaces {
    pub nrow: usize,
    pub ncol: usize,
    pub intercept: f64,
    /// `Z beta` without the intercept.
    pub fixed: Vec<f64>,
    /// `sqrt(phi / tau) u*`.
    pub structured: Vec<f64>,
    /// `sqrt((1 - phi) / tau) v`.
    pub unstructured: Vec<f64>,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DicSummary {
    pub dic: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
    pub effective_parameters: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    /// `(ln tau, logit phi)` per node.
    pub nodes: Vec<[f64; 2]>,
    pub quad_weights: Vec<f64>,
    pub log_joint: Vec<f64>,
    pub normalized_weights: Vec<f64>,
    /// Grid reach in standard deviations along each eigen-axis of the
    /// Hessian, as `[[low, high]; 2]`.
    pub extents_sd: [[f64; 2]; 2],
    pub expansions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub model: String,
    pub n: usize,
    pub p: usize,
    pub mode_internal: Option<[f64; 2]>,
    pub hessian: Option<[[f64; 2]; 2]>,
    pub optimizer_iterations: usize,
    pub optimizer_converged: bool,
    pub max_newton_iterations: usize,
    /// `[[min ln tau, max ln tau], [min logit phi, max logit phi]]`.
    pub grid_bounds: Option<[[f64; 2]; 2]>,
    pub failed_nodes: usize,
    pub gv_method: SpectrumMethod,
    pub phi_method: SpectrumMethod,
    pub exposure: Exposure,
    pub rsr: bool,
    pub trend_constraints: bool,
    pub beta_prec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Intercept first.
    pub beta_marginals: Vec<CoefficientSummary>,
    pub sigma_marginal: Option<MarginalSummary>,
    pub phi_marginal: Option<MarginalSummary>,
    pub fields: FieldSurfaces,
    pub dic: DicSummary,
    pub grid: Option<HyperGrid>,
    pub hyper_prior: Option<HyperPriorSpec>,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<&CoefficientSummary> {
        self.beta_marginals.iter().find(|c| c.name == name)
    }
}

pub const INTERCEPT_NAME: &str = "(intercept)";

pub(crate) fn coefficient_names(spec: &ModelSpec) -> Vec<String> {
    std::iter::once(INTERCEPT_NAME.to_string())
        .chain(spec.covariates.names.iter().cloned())
        .collect()
}

fn in_bounds(theta: &[f64]) -> bool {
    (LOG_TAU_RANGE.0..=LOG_TAU_RANGE.1).contains(&theta[0])
        && (LOGIT_PHI_RANGE.0..=LOGIT_PHI_RANGE.1).contains(&theta[1])
}

/// `ln p(y | theta) + ln pi(theta)` from one Laplace fit.
pub fn log_joint(engine: &LaplaceEngine<'_>, theta: [f64; 2], init: Option<&LatentState>) -> Result<(f64, LaplaceFit)> {
    let hyper = Hyperparameters::from_internal(theta);
    let fit = engine.fit(&hyper, init)?;
    Ok((fit.log_marginal + log_hyper_prior(&hyper, engine.spec), fit))
}

struct NodeFit {
    theta: [f64; 2],
    quad: f64,
    log_joint: f64,
    fit: Option<LaplaceFit>,
}

/// Full posterior fit with default options.
pub fn fit(spec: &ModelSpec) -> Result<FitResult> {
    fit_with(spec, &FitOptions::default())
}

pub fn fit_with(spec: &ModelSpec, options: &FitOptions) -> Result<FitResult> {
    if options.grid_points < 3 || options.grid_points.is_multiple_of(2) {
        return Err(LgcpError::invalid("grid_points must be odd and at least 3"));
    }
    let engine = LaplaceEngine::new(spec, options.laplace);

    let HyperMode {
        theta: mode,
        log_joint: centre_lj,
        fit: centre,
        iterations: nm_iterations,
        converged: nm_converged,
    } = hyper_mode(&engine, options)?;

    let hess = hessian(&engine, mode, centre_lj, &centre.mode, options.hessian_step);
    let neg = -hess;
    let eig = SymmetricEigen::new(neg);
    let curv = eig.eigenvalues.map(|v| v.max(MIN_CURVATURE));
    let axes = eig.eigenvectors;

    let sd = Vector2::new(1.0 / curv[0].sqrt(), 1.0 / curv[1].sqrt());
    let target_drop = 0.5 * options.span_sd * options.span_sd;
    let mut extents = [[0.0; 2]; 2];
    for (k, ext) in extents.iter_mut().enumerate() {
        for (side, sign) in [-1.0, 1.0].into_iter().enumerate() {
            let dir = axes.column(k) * (sign * sd[k]);
            ext[side] = half_axis_extent(&engine, mode, [dir[0], dir[1]], centre_lj, target_drop, &centre.mode);
        }
    }
    let m = options.grid_points;
    let mut expansions = 0;
    let nodes = loop {
        let nodes = evaluate_grid(&engine, mode, &axes, &sd, &extents, m, &centre.mode);
        let weights = normalize(&nodes);
        // heaviest node on each side: [axis 0 low, axis 0 high, axis 1 low, axis 1 high]
        let mut side_mass = [0.0f64; 4];
        for (idx, w) in weights.iter().enumerate() {
            let (i, j) = (idx / m, idx % m);
            if i == 0 {
                side_mass[0] = side_mass[0].max(*w);
            }
            if i == m - 1 {
                side_mass[1] = side_mass[1].max(*w);
            }
            if j == 0 {
                side_mass[2] = side_mass[2].max(*w);
            }
            if j == m - 1 {
                side_mass[3] = side_mass[3].max(*w);
            }
        }
        let boundary = side_mass.iter().cloned().fold(0.0, f64::max);
        if boundary < options.boundary_mass {
            break nodes;
        }
        if expansions >= options.max_expansions {
            return Err(LgcpError::NonConvergence {
                iterations: expansions,
                last: boundary,
                context: "hyperparameter grid still carries boundary mass after the allowed expansions".into(),
            });
        }
        expansions += 1;
        for (side, mass) in side_mass.iter().enumerate() {
            if *mass >= options.boundary_mass {
                extents[side / 2][side % 2] *= options.expansion_factor;
            }
        }
        log::info!("expanding hyperparameter grid to {extents:?} sd (boundary weight {boundary:.3})");
    };
    let weights = normalize(&nodes);
    let failed = nodes.iter().filter(|n| n.fit.is_none()).count();

    let grid = HyperGrid {
        nodes: nodes.iter().map(|n| n.theta).collect(),
        quad_weights: nodes.iter().map(|n| n.quad).collect(),
        log_joint: nodes.iter().map(|n| n.log_joint).collect(),
        normalized_weights: weights.clone(),
        extents_sd: extents,
        expansions,
    };
    let active: Vec<(f64, &LaplaceFit)> = nodes
        .iter()
        .zip(&weights)
        .filter_map(|(n, &w)| n.fit.as_ref().filter(|_| w > 0.0).map(|f| (w, f)))
        .collect();

    let names = coefficient_names(spec);
    let beta_marginals = (0..spec.n_fixed())
        .map(|r| {
            let comps: Vec<(f64, f64, f64)> = active
                .iter()
                .map(|(w, f)| {
                    let m = if r == 0 { f.mean.beta0 } else { f.mean.beta[r - 1] };
                    (*w, m, f.fixed_cov[(r, r)].max(0.0).sqrt())
                })
                .collect();
            summarize_mixture(&names[r], &comps)
        })
        .collect();

    let thetas: Vec<(f64, [f64; 2])> = active.iter().map(|(w, f)| (*w, f.hyper.to_internal())).collect();
    let sigma_marginal = smoothed_marginal(
        &thetas.iter().map(|(w, t)| (*w, -0.5 * t[0])).collect::<Vec<_>>(),
        f64::exp,
        options.density_points,
    );
    let phi_marginal = smoothed_marginal(
        &thetas.iter().map(|(w, t)| (*w, t[1])).collect::<Vec<_>>(),
        |x| 1.0 / (1.0 + (-x).exp()),
        options.density_points,
    );

    let fields = mixture_fields(spec, &active);
    let dic = dic(spec, &active)?;
    let all = &grid.nodes;
    let bounds = [
        [
            all.iter().map(|t| t[0]).fold(f64::INFINITY, f64::min),
            all.iter().map(|t| t[0]).fold(f64::NEG_INFINITY, f64::max),
        ],
        [
            all.iter().map(|t| t[1]).fold(f64::INFINITY, f64::min),
            all.iter().map(|t| t[1]).fold(f64::NEG_INFINITY, f64::max),
        ],
    ];
    let diagnostics = FitDiagnostics {
        model: if spec.rsr { "rsr" } else { "lgcp" }.into(),
        n: spec.n(),
        p: spec.p(),
        mode_internal: Some(mode),
        hessian: Some([[hess[(0, 0)], hess[(0, 1)]], [hess[(1, 0)], hess[(1, 1)]]]),
        optimizer_iterations: nm_iterations,
        optimizer_converged: nm_converged,
        max_newton_iterations: active.iter().map(|(_, f)| f.iterations).max().unwrap_or(0),
        grid_bounds: Some(bounds),
        failed_nodes: failed,
        gv_method: spec.prec.method,
        phi_method: spec.mix_prior.method,
        exposure: spec.exposure,
        rsr: spec.rsr,
        trend_constraints: spec.prec.base.has_trend_constraints(),
        beta_prec: spec.beta_prec,
    };
    Ok(FitResult {
        beta_marginals,
        sigma_marginal: Some(sigma_marginal),
        phi_marginal: Some(phi_marginal),
        fields,
        dic,
        grid: Some(grid),
        hyper_prior: Some(spec.hyper_prior_spec()),
        diagnostics,
    })
}

/// Joint mode of the hyperparameters with the Laplace fit there.
#[derive(Debug, Clone)]
pub struct HyperMode {
    /// `(ln tau, logit phi)`.
    pub theta: [f64; 2],
    pub log_joint: f64,
    pub fit: LaplaceFit,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead search for the maximum of the log joint, each Laplace fit
/// warm-started from the previous one.
pub fn hyper_mode(engine: &LaplaceEngine<'_>, options: &FitOptions) -> Result<HyperMode> {
    let warm: RefCell<Option<LatentState>> = RefCell::new(None);
    let objective = |theta: &[f64]| -> f64 {
        if !in_bounds(theta) {
            return f64::INFINITY;
        }
        let init = warm.borrow().clone();
        match log_joint(engine, [theta[0], theta[1]], init.as_ref()) {
            Ok((lj, fit)) => {
                *warm.borrow_mut() = Some(fit.mode);
                -lj
            }
            Err(_) => f64::INFINITY,
        }
    };
    let nm = nelder_mead(
        objective,
        &options.start,
        NelderMeadOptions {
            max_iter: options.optimizer_max_iter,
            ..NelderMeadOptions::default()
        },
    );
    if !nm.f.is_finite() {
        return Err(LgcpError::numerical(
            "the log joint of the hyperparameters is not finite anywhere the optimizer looked",
        ));
    }
    let theta = [nm.x[0], nm.x[1]];
    let (log_joint, fit) = log_joint(engine, theta, None)?;
    Ok(HyperMode {
        theta,
        log_joint,
        fit,
        iterations: nm.iterations,
        converged: nm.converged,
    })
}

// Central-difference Hessian of the log joint, every evaluation warm-started
// from the centre mode.
fn hessian(engine: &LaplaceEngine<'_>, at: [f64; 2], f0: f64, init: &LatentState, h: f64) -> Matrix2<f64> {
    let f = |d0: f64, d1: f64| -> f64 {
        log_joint(engine, [at[0] + d0, at[1] + d1], Some(init))
            .map(|(v, _)| v)
            .unwrap_or(f64::NAN)
    };
    let fpp = [f(h, 0.0), f(-h, 0.0), f(0.0, h), f(0.0, -h)];
    let h00 = (fpp[0] - 2.0 * f0 + fpp[1]) / (h * h);
    let h11 = (fpp[2] - 2.0 * f0 + fpp[3]) / (h * h);
    let h01 = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
    let m = Matrix2::new(h00, h01, h01, h11);
    if m.iter().all(|v| v.is_finite()) {
        m
    } else {
        log::warn!("non-finite Hessian of the log joint; falling back to unit curvature");
        -Matrix2::identity()
    }
}

/// Distance (in standard deviations along `dir`) at which the log joint
/// has fallen `target` below its value `top` at the mode. Equals
/// `sqrt(2 target)` for a Gaussian posterior.
fn half_axis_extent(
    engine: &LaplaceEngine<'_>,
    mode: [f64; 2],
    dir: [f64; 2],
    top: f64,
    target: f64,
    init: &LatentState,
) -> f64 {
    const MAX_SD: f64 = 12.0;
    let gaussian = (2.0 * target).sqrt();
    let drop_at = |z: f64| -> f64 {
        let theta = [mode[0] + z * dir[0], mode[1] + z * dir[1]];
        if !in_bounds(&theta) {
            return f64::INFINITY;
        }
        log_joint(engine, theta, Some(init)).map_or(f64::INFINITY, |(lj, _)| top - lj)
    };
    let step = gaussian / 3.0;
    let (mut z_prev, mut d_prev) = (0.0f64, 0.0f64);
    let mut z = step;
    while z <= MAX_SD + 1e-12 {
        let d = drop_at(z);
        if !d.is_finite() {
            return z_prev.max(step);
        }
        if d >= target {
            // interpolate on sqrt(2 drop), which is linear in z for a Gaussian
            let (r0, r1, rt) = ((2.0 * d_prev.max(0.0)).sqrt(), (2.0 * d).sqrt(), gaussian);
            return z_prev + (z - z_prev) * (rt - r0) / (r1 - r0).max(1e-12);
        }
        z_prev = z;
        d_prev = d;
        z += step;
    }
    MAX_SD
}

fn evaluate_grid(
    engine: &LaplaceEngine<'_>,
    mode: [f64; 2],
    axes: &Matrix2<f64>,
    sd: &Vector2<f64>,
    extents: &[[f64; 2]; 2],
    m: usize,
    init: &LatentState,
) -> Vec<NodeFit> {
    let c = m / 2;
    // node positions (in sd) and trapezoid weights along each axis
    let axis = |k: usize| -> (Vec<f64>, Vec<f64>) {
        let pos: Vec<f64> = (0..m)
            .map(|i| {
                if i < c {
                    -extents[k][0] * (c - i) as f64 / c as f64
                } else {
                    extents[k][1] * (i - c) as f64 / c as f64
                }
            })
            .collect();
        let w = (0..m)
            .map(|i| {
                let left = if i > 0 { pos[i] - pos[i - 1] } else { 0.0 };
                let right = if i + 1 < m { pos[i + 1] - pos[i] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect();
        (pos, w)
    };
    let (p0, w0) = axis(0);
    let (p1, w1) = axis(1);
    let coords: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    coords
        .par_iter()
        .map(|&(i, j)| {
            let off = axes * Vector2::new(p0[i] * sd[0], p1[j] * sd[1]);
            let theta = [mode[0] + off[0], mode[1] + off[1]];
            let quad = w0[i] * w1[j];
            let failed = |theta| NodeFit {
                theta,
                quad,
                log_joint: f64::NEG_INFINITY,
                fit: None,
            };
            if !in_bounds(&theta) {
                return failed(theta);
            }
            match log_joint(engine, theta, Some(init)) {
                Ok((lj, fit)) => NodeFit {
                    theta,
                    quad,
                    log_joint: lj,
                    fit: Some(fit),
                },
                Err(e) => {
                    if !is_recoverable(&e) {
                        log::warn!("hyperparameter node failed: {e}");
                    }
                    failed(theta)
                }
            }
        })
        .collect()
}

fn normalize(nodes: &[NodeFit]) -> Vec<f64> {
    let top = nodes
        .iter()
        .map(|n| n.log_joint)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = nodes
        .iter()
        .map(|n| if n.log_joint.is_finite() { n.quad * (n.log_joint - top).exp() } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

pub(crate) fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn mixture_cdf(comps: &[(f64, f64, f64)], x: f64) -> f64 {
    comps
        .iter()
        .map(|&(w, m, s)| {
            if s > 0.0 {
                w * normal_cdf((x - m) / s)
            } else if x >= m {
                w
            } else {
                0.0
            }
        })
        .sum()
}

/// Quantile of a Gaussian mixture `(weight, mean, sd)` by bisection.
pub fn mixture_quantile(comps: &[(f64, f64, f64)], p: f64) -> f64 {
    let lo0 = comps.iter().map(|c| c.1 - 12.0 * c.2).fold(f64::INFINITY, f64::min);
    let hi0 = comps.iter().map(|c| c.1 + 12.0 * c.2).fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mixture_cdf(comps, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub(crate) fn summarize_mixture(name: &str, comps: &[(f64, f64, f64)]) -> CoefficientSummary {
    let mean: f64 = comps.iter().map(|c| c.0 * c.1).sum();
    let second: f64 = comps.iter().map(|c| c.0 * (c.2 * c.2 + c.1 * c.1)).sum();
    CoefficientSummary {
        name: name.to_string(),
        mean,
        sd: (second - mean * mean).max(0.0).sqrt(),
        lower: mixture_quantile(comps, 0.025),
        upper: mixture_quantile(comps, 0.975),
    }
}

/// Weighted kernel smoothing of node values on an internal scale, with the
/// kernel width absorbed so the smoothed variance equals the weighted one.
fn smoothed_marginal(points: &[(f64, f64)], to_natural: impl Fn(f64) -> f64, n_table: usize) -> MarginalSummary {
    let mean_int: f64 = points.iter().map(|(w, x)| w * x).sum();
    let var_int: f64 = points.iter().map(|(w, x)| w * (x - mean_int).powi(2)).sum();
    let n_eff = 1.0 / points.iter().map(|(w, _)| w * w).sum::<f64>();
    let sd = var_int.sqrt().max(1e-6);
    let h = (1.06 * sd * n_eff.powf(-0.2)).min(0.9 * sd);
    let shrink = (1.0 - h * h / (sd * sd)).max(0.0).sqrt();
    let comps: Vec<(f64, f64, f64)> = points
        .iter()
        .map(|&(w, x)| (w, mean_int + (x - mean_int) * shrink, h))
        .collect();
    let lo = mean_int - 6.0 * sd;
    let hi = mean_int + 6.0 * sd;
    let xs: Vec<f64> = (0..n_table)
        .map(|k| lo + (hi - lo) * k as f64 / (n_table - 1) as f64)
        .collect();
    let dens_int: Vec<f64> = xs
        .iter()
        .map(|&x| {
            comps
                .iter()
                .map(|&(w, m, s)| w * (-0.5 * ((x - m) / s).powi(2)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt()))
                .sum()
        })
        .collect();
    // natural-scale density by the numerical Jacobian of the monotone map
    let nat: Vec<f64> = xs.iter().map(|&x| to_natural(x)).collect();
    let mut density = Vec::with_capacity(n_table);
    for k in 0..n_table {
        let (a, b) = if k == 0 {
            (0, 1)
        } else if k == n_table - 1 {
            (k - 1, k)
        } else {
            (k - 1, k + 1)
        };
        let jac = ((nat[b] - nat[a]) / (xs[b] - xs[a])).abs();
        density.push([nat[k], if jac > 0.0 { dens_int[k] / jac } else { 0.0 }]);
    }
    let mean = points.iter().map(|(w, x)| w * to_natural(*x)).sum();
    MarginalSummary {
        mean,
        lower: to_natural(mixture_quantile(&comps, 0.025)),
        upper: to_natural(mixture_quantile(&comps, 0.975)),
        density,
    }
}

fn mixture_fields(spec: &ModelSpec, active: &[(f64, &LaplaceFit)]) -> FieldSurfaces {
    let n = spec.n();
    let mut out = FieldSurfaces {
        nrow: spec.prec.nrow(),
        ncol: spec.prec.ncol(),
        intercept: 0.0,
        fixed: vec![0.0; n],
        structured: vec![0.0; n],
        unstructured: vec![0.0; n],
        eta: vec![0.0; n],
    };
    for &(w, f) in active {
        let a = f.hyper.weight_structured();
        let b = f.hyper.weight_unstructured();
        let fixed = spec.fixed_effect(0.0, &f.mean.beta);
        out.intercept += w * f.mean.beta0;
        for i in 0..n {
            out.fixed[i] += w * fixed[i];
            out.structured[i] += w * a * f.mean.u_star[i];
            out.unstructured[i] += w * b * f.mean.v[i];
        }
    }
    for i in 0..n {
        out.eta[i] = out.intercept + out.fixed[i] + out.structured[i] + out.unstructured[i];
    }
    out
}

/// Deviance information criterion from Gaussian moments of `eta` mixed
/// over the hyperparameter nodes `(weight, fit)`.
pub fn dic(spec: &ModelSpec, nodes: &[(f64, &LaplaceFit)]) -> Result<DicSummary> {
    let n = spec.n();
    let mut mean_eta = vec![0.0; n];
    let mut mean_dev = 0.0;
    for &(w, f) in nodes {
        mean_dev += w * expected_deviance(spec, &f.eta, &f.eta_var);
        for i in 0..n {
            mean_eta[i] += w * f.eta[i];
        }
    }
    let dev_mean = expected_deviance(spec, &mean_eta, &vec![0.0; n]);
    if !(mean_dev.is_finite() && dev_mean.is_finite()) {
        return Err(LgcpError::numerical("deviance is not finite"));
    }
    Ok(DicSummary {
        dic: 2.0 * mean_dev - dev_mean,
        mean_deviance: mean_dev,
        deviance_at_mean: dev_mean,
        effective_parameters: mean_dev - dev_mean,
    })
}

/// `E[-2 loglik]` for `eta_i ~ N(mean_i, var_i)` independently per cell.
pub(crate) fn expected_deviance(spec: &ModelSpec, mean: &[f64], var: &[f64]) -> f64 {
    match &spec.family {
        Family::Poisson => {
            let expo = spec.exposure_values();
            -2.0 * (0..spec.n())
                .map(|i| {
                    let y = spec.counts.counts[i];
                    let yf = y as f64;
                    yf * (expo[i].ln() + mean[i])
                        - expo[i] * (mean[i] + 0.5 * var[i]).exp()
                        - statrs::function::factorial::ln_factorial(y)
                })
                .sum::<f64>()
        }
        Family::Gaussian { y, noise_var } => (0..spec.n())
            .map(|i| {
                ((y[i] - mean[i]).powi(2) + var[i]) / noise_var
                    + (2.0 * std::f64::consts::PI * noise_var).ln()
            })
            .sum(),
    }
}

/// The four surfaces of the posterior-mean predictor. The intercept is
/// reported separately; `intercept + fixed + structured + unstructured = eta`.
pub fn decompose(fit: &FitResult) -> Result<FieldSurfaces> {
    let f = &fit.fields;
    let worst = (0..f.eta.len())
        .map(|i| (f.intercept + f.fixed[i] + f.structured[i] + f.unstructured[i] - f.eta[i]).abs())
        .fold(0.0, f64::max);
    if worst > 1e-8 {
        return Err(LgcpError::numerical(format!(
            "field decomposition does not sum to the predictor (max error {worst:.3e})"
        )));
    }
    Ok(f.clone())
}

/// Density table of a marginal integrates to one (trapezoid).
pub fn marginal_mass(m: &MarginalSummary) -> f64 {
    let x: Vec<f64> = m.density.iter().map(|p| p[0]).collect();
    let y: Vec<f64> = m.density.iter().map(|p| p[1]).collect();
    let cum = cumulative_trapezoid(&x, &y);
    interpolate(&x, &cum, f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_spec;

    fn toy_fit() -> (ModelSpec, FitResult) {
        let spec = toy_spec(8, 8, 1, 3);
        let res = fit(&spec).expect("fit");
        (spec, res)
    }

    #[test]
    fn weights_are_normalized_and_fields_decompose() {
        let (_, res) = toy_fit();
        let g = res.grid.as_ref().unwrap();
        let total: f64 = g.normalized_weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(g.nodes.len(), 81);
        decompose(&res).unwrap();
    }

    #[test]
    fn dropping_lightest_node_barely_moves_beta() {
        let (spec, res) = toy_fit();
        let g = res.grid.as_ref().unwrap();
        let engine = LaplaceEngine::new(&spec, LaplaceOptions::default());
        let lightest = (0..g.nodes.len())
            .filter(|&k| g.normalized_weights[k] > 0.0)
            .min_by(|&a, &b| g.normalized_weights[a].total_cmp(&g.normalized_weights[b]))
            .unwrap();
        let mut num = vec![0.0; spec.n_fixed()];
        let mut den = 0.0;
        for (k, theta) in g.nodes.iter().enumerate() {
            let w = g.normalized_weights[k];
            if k == lightest || w == 0.0 {
                continue;
            }
            let f = engine.fit(&Hyperparameters::from_internal(*theta), None).unwrap();
            num[0] += w * f.mean.beta0;
            for j in 0..spec.p() {
                num[j + 1] += w * f.mean.beta[j];
            }
            den += w;
        }
        for (r, c) in res.beta_marginals.iter().enumerate() {
            assert!((num[r] / den - c.mean).abs() < 1e-3, "{} moved", c.name);
        }
    }

    #[test]
    fn marginal_tables_integrate_to_one() {
        let (_, res) = toy_fit();
        let s = res.sigma_marginal.as_ref().unwrap();
        let p = res.phi_marginal.as_ref().unwrap();
        assert!((marginal_mass(s) - 1.0).abs() < 1e-3);
        assert!((marginal_mass(p) - 1.0).abs() < 1e-3);
        assert!(s.lower < s.mean && s.mean < s.upper);
        assert!(p.lower > 0.0 && p.upper < 1.0);
    }

    #[test]
    fn mixture_quantile_matches_single_gaussian() {
        let q = mixture_quantile(&[(1.0, 2.0, 0.5)], 0.975);
        assert!((q - (2.0 + 0.5 * 1.959963984540054)).abs() < 1e-9);
    }

    #[test]
    fn rsr_random_component_is_orthogonal_to_design() {
        let spec = toy_spec(8, 8, 2, 5).with_rsr(true).unwrap();
        let res = fit(&spec).unwrap();
        let x = spec.design_matrix();
        for j in 0..x.ncols() {
            let dot: f64 = (0..spec.n()).map(|i| x[(i, j)] * (res.fields.structured[i] + res.fields.unstructured[i])).sum();
            assert!(dot.abs() < 1e-6, "column {j}: {dot}");
        }
    }
}
