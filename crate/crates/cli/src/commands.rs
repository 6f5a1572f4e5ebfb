//! Subcommand implementations. Each writes its artifacts under `out`.

use std::path::{Path, PathBuf};

use lgcp::igmrf::{build_rw2d, generalized_variance, scale_to_unit_gv, SpectrumMethod};
use lgcp::inference::{fit_with, glm_fit, FitResult};
use lgcp::io::{write_json, write_points, write_raster, write_table, Raster};
use lgcp::lattice::{CountGrid, CovariateStack, PointPattern};
use lgcp::model::{predictor_parts, simulate, Hyperparameters, PredictorParts};
use lgcp::pc_priors::pc_prec_prior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Echo, RunConfig};
use crate::data::{build_base, load_covariates, prepare, with_u_sigma};
use crate::error::{CliError, CliResult};
use crate::render::{self, ColourScale, BLACK};

/// Largest absolute deviation of a scaled generalized variance from 1.
pub const UNIT_GV_TOL: f64 = 1e-8;

/// Stream offset separating point placement from the field simulation.
const PLACEMENT_STREAM: u64 = 1;

/// One fitted model with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBundle {
    pub echo: Echo,
    /// Prior scale of the fit; absent for the GLM.
    pub u_sigma: Option<f64>,
    pub nrow: usize,
    pub ncol: usize,
    pub result: FitResult,
}

/// Truth behind a simulated pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub echo: Echo,
    pub tau: f64,
    pub phi: f64,
    pub sigma: f64,
    /// Intercept first, on the standardized covariate scale.
    pub beta: Vec<f64>,
    pub covariates: Vec<String>,
    pub total_count: u64,
    pub fields: PredictorParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPriorSummary {
    pub u_sigma: f64,
    pub alpha_sigma: f64,
    pub lambda: f64,
    pub mean_sigma: f64,
    pub median_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingPriorSummary {
    pub u_phi: f64,
    pub alpha_phi: f64,
    pub theta: f64,
    pub d_u_phi: f64,
    pub d_one: f64,
    pub method: SpectrumMethod,
    /// Trapezoid integral of the tabulated density over `phi`.
    pub phi_mass: f64,
    pub prob_below_u_phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    pub echo: Echo,
    pub precision: Vec<PrecisionPriorSummary>,
    pub mixing: MixingPriorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub nrow: usize,
    pub ncol: usize,
    pub method: SpectrumMethod,
    pub gv_before: f64,
    pub gv_after: f64,
    pub unit_gv: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub echo: Echo,
    pub base: ScaleEntry,
    pub refined: ScaleEntry,
    /// `gv_before(2x) / gv_before(1x)`; close to 4 for a second-order field.
    pub refinement_ratio: f64,
    /// Exact and torus generalized variance at the configured grid when the
    /// exact spectrum is within `grid.exact_limit`.
    pub exact_gv: Option<f64>,
    pub torus_gv: f64,
    pub exact_torus_rel_diff: Option<f64>,
}

fn sweep_dir(u: f64) -> String {
    format!("u_sigma_{u}")
}

/// `fit` and `rsr`: the prior sensitivity sweep, with a GLM reference.
pub fn cmd_fit(cfg: &RunConfig, out: &Path, rsr: bool) -> CliResult<()> {
    cfg.validate(true)?;
    let command = if rsr { "rsr" } else { "fit" };
    let echo = Echo::new(command, cfg);
    let prepared = prepare(cfg)?;
    write_json(out.join("config.json"), &echo).map_err(CliError::at("output"))?;
    write_json(out.join("preprocessing.json"), &prepared.report).map_err(CliError::at("output"))?;

    let fine = run_sweep(cfg, &echo, &prepared.counts, &prepared.covariates, rsr, out)?;
    if let Some(k) = cfg.grid.compare_factor {
        let w = prepared.counts.window;
        let counts = prepared.counts.aggregate(k).map_err(CliError::at("coarsen"))?;
        let covs = prepared
            .covariates
            .aggregate(w.nrow, w.ncol, k)
            .map_err(CliError::at("coarsen"))?;
        let coarse = run_sweep(cfg, &echo, &counts, &covs, rsr, &out.join(format!("coarse_x{k}")))?;
        write_resolution_comparison(&fine, &coarse, &out.join("resolution_comparison.csv"))?;
    }
    Ok(())
}

/// Fits the GLM and every sweep value on one grid and writes their outputs.
fn run_sweep(
    cfg: &RunConfig,
    echo: &Echo,
    counts: &CountGrid,
    covariates: &CovariateStack,
    rsr: bool,
    out: &Path,
) -> CliResult<Vec<FitBundle>> {
    let base = build_base(cfg, counts, covariates, rsr)?;
    let (nrow, ncol) = (counts.window.nrow, counts.window.ncol);
    let glm = glm_fit(&base).map_err(CliError::at("glm"))?;
    let glm = FitBundle {
        echo: echo.clone(),
        u_sigma: None,
        nrow,
        ncol,
        result: glm,
    };

    let fits: Vec<CliResult<FitBundle>> = cfg
        .priors
        .u_sigma
        .par_iter()
        .map(|&u| {
            let spec = with_u_sigma(cfg, &base, u)?;
            log::info!("fitting {nrow}x{ncol} with U_sigma = {u}");
            let result = fit_with(&spec, &cfg.inference)
                .map_err(|e| CliError::from_lib(&format!("fit U_sigma={u}"), e))?;
            Ok(FitBundle {
                echo: echo.clone(),
                u_sigma: Some(u),
                nrow,
                ncol,
                result,
            })
        })
        .collect();
    let fits = fits.into_iter().collect::<CliResult<Vec<_>>>()?;

    write_bundle(&glm, counts, &out.join("glm"))?;
    for b in &fits {
        write_bundle(b, counts, &out.join(sweep_dir(b.u_sigma.unwrap_or_default())))?;
    }
    write_interval_table(&glm, &fits, out)?;
    write_hyper_table(&fits, &out.join("hyperparameters.csv"))?;
    Ok(fits)
}

/// `fit.json`, surface rasters, heatmaps and their colour scales.
fn write_bundle(bundle: &FitBundle, counts: &CountGrid, dir: &Path) -> CliResult<()> {
    write_json(dir.join("fit.json"), bundle).map_err(CliError::at("output"))?;
    let f = &bundle.result.fields;
    let mut surfaces: Vec<(&str, Vec<f64>)> = vec![("fixed", f.fixed.clone()), ("eta", f.eta.clone())];
    if bundle.u_sigma.is_some() {
        surfaces.push(("structured", f.structured.clone()));
        surfaces.push(("unstructured", f.unstructured.clone()));
    }
    surfaces.push(("counts", counts.counts.iter().map(|&c| c as f64).collect()));
    let mut scales: Vec<(String, ColourScale)> = Vec::new();
    for (name, values) in surfaces {
        let raster = Raster::new(counts.window, values).map_err(CliError::at("output"))?;
        write_raster(dir.join(format!("{name}.csv")), &raster).map_err(CliError::at("output"))?;
        let scale = render::heatmap(&raster.values, f.nrow, f.ncol, &dir.join(format!("{name}.png")))?;
        scales.push((name.to_string(), scale));
    }
    write_json(dir.join("scales.json"), &scales).map_err(CliError::at("output"))
}

/// Wide numeric table: one row per fit (the GLM has `u_sigma = 0`) with
/// mean, lower and upper for every coefficient; plus its figure.
fn write_interval_table(glm: &FitBundle, fits: &[FitBundle], out: &Path) -> CliResult<()> {
    let names: Vec<&str> = glm.result.beta_marginals.iter().map(|c| c.name.as_str()).collect();
    let mut header = vec!["u_sigma".to_string()];
    for n in &names {
        header.extend(["mean", "lower", "upper"].map(|s| format!("{n}_{s}")));
    }
    let row = |b: &FitBundle| -> Vec<f64> {
        let mut r = vec![b.u_sigma.unwrap_or(0.0)];
        for c in &b.result.beta_marginals {
            r.extend([c.mean, c.lower, c.upper]);
        }
        r
    };
    let mut rows: Vec<Vec<f64>> = fits.iter().map(row).collect();
    rows.push(row(glm));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_table(out.join("credible_intervals.csv"), &header_refs, &rows).map_err(CliError::at("output"))?;

    let mut colours: Vec<[u8; 3]> = (0..fits.len()).map(render::series_colour).collect();
    colours.push(BLACK);
    let groups: Vec<Vec<(f64, f64, f64)>> = (0..names.len())
        .map(|k| {
            fits.iter()
                .chain(std::iter::once(glm))
                .map(|b| {
                    let c = &b.result.beta_marginals[k];
                    (c.lower, c.mean, c.upper)
                })
                .collect()
        })
        .collect();
    render::interval_plot(&groups, &colours, &out.join("credible_intervals.png"))
}

pub const HYPER_HEADER: [&str; 10] = [
    "u_sigma",
    "sigma_mean",
    "sigma_lower",
    "sigma_upper",
    "phi_mean",
    "phi_lower",
    "phi_upper",
    "dic",
    "mean_deviance",
    "effective_parameters",
];

fn hyper_row(b: &FitBundle) -> Vec<f64> {
    let r = &b.result;
    let nan = f64::NAN;
    let (s, p) = (r.sigma_marginal.as_ref(), r.phi_marginal.as_ref());
    vec![
        b.u_sigma.unwrap_or(0.0),
        s.map_or(nan, |m| m.mean),
        s.map_or(nan, |m| m.lower),
        s.map_or(nan, |m| m.upper),
        p.map_or(nan, |m| m.mean),
        p.map_or(nan, |m| m.lower),
        p.map_or(nan, |m| m.upper),
        r.dic.dic,
        r.dic.mean_deviance,
        r.dic.effective_parameters,
    ]
}

fn write_hyper_table(fits: &[FitBundle], path: &Path) -> CliResult<()> {
    let rows: Vec<Vec<f64>> = fits.iter().map(hyper_row).collect();
    write_table(path, &HYPER_HEADER, &rows).map_err(CliError::at("output"))
}

fn write_resolution_comparison(fine: &[FitBundle], coarse: &[FitBundle], path: &Path) -> CliResult<()> {
    let header = [
        "u_sigma",
        "fine_sigma_mean",
        "coarse_sigma_mean",
        "fine_phi_mean",
        "coarse_phi_mean",
        "sigma_rel_diff",
    ];
    let rows: Vec<Vec<f64>> = fine
        .iter()
        .zip(coarse)
        .map(|(f, c)| {
            let (hf, hc) = (hyper_row(f), hyper_row(c));
            vec![hf[0], hf[1], hc[1], hf[4], hc[4], (hc[1] - hf[1]).abs() / hf[1]]
        })
        .collect();
    write_table(path, &header, &rows).map_err(CliError::at("output"))
}

/// `glm`: the non-spatial Poisson regression alone.
pub fn cmd_glm(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.validate(true)?;
    let echo = Echo::new("glm", cfg);
    let prepared = prepare(cfg)?;
    write_json(out.join("config.json"), &echo).map_err(CliError::at("output"))?;
    write_json(out.join("preprocessing.json"), &prepared.report).map_err(CliError::at("output"))?;
    let base = build_base(cfg, &prepared.counts, &prepared.covariates, false)?;
    let result = glm_fit(&base).map_err(CliError::at("glm"))?;
    let w = prepared.counts.window;
    let bundle = FitBundle {
        echo,
        u_sigma: None,
        nrow: w.nrow,
        ncol: w.ncol,
        result,
    };
    write_bundle(&bundle, &prepared.counts, &out.join("glm"))?;
    write_interval_table(&bundle, &[], out)
}

/// `simulate`: draws counts from the model at the configured truth and
/// scatters points uniformly within their cells.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.validate(false)?;
    let truth = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::input("config", "the [simulate] table is required", None))?;
    let echo = Echo::new("simulate", cfg);
    let window = cfg.window()?;
    let covariates = load_covariates(cfg)?;
    let empty = CountGrid::from_counts(window, vec![0; window.n_cells()]).map_err(CliError::at("simulate"))?;
    let base = build_base(cfg, &empty, &covariates, false)?;
    let hyper = Hyperparameters::new(truth.tau, truth.phi).map_err(CliError::at("config"))?;
    let (counts, latent) = simulate(&base, &hyper, &truth.beta, cfg.seed).map_err(CliError::at("simulate"))?;
    let spec = build_base(cfg, &counts, &covariates, false)?;
    let fields = predictor_parts(&latent, &hyper, &spec).map_err(CliError::at("simulate"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PLACEMENT_STREAM);
    let (dx, dy) = (window.width() / window.ncol as f64, window.height() / window.nrow as f64);
    let mut points = Vec::with_capacity(counts.total() as usize);
    for (i, &k) in counts.counts.iter().enumerate() {
        let (r, c) = (i / window.ncol, i % window.ncol);
        for _ in 0..k {
            let x = window.xmin + (c as f64 + rng.random::<f64>()) * dx;
            let y = window.ymin + (r as f64 + rng.random::<f64>()) * dy;
            points.push((x, y));
        }
    }
    write_json(out.join("config.json"), &echo).map_err(CliError::at("output"))?;
    write_points(out.join("pattern.csv"), &PointPattern::new(points, "simulated")).map_err(CliError::at("output"))?;
    let count_raster = Raster::new(window, counts.counts.iter().map(|&c| c as f64).collect())
        .map_err(CliError::at("output"))?;
    write_raster(out.join("counts.csv"), &count_raster).map_err(CliError::at("output"))?;
    let report = SimulationTruth {
        echo,
        tau: truth.tau,
        phi: truth.phi,
        sigma: hyper.sigma(),
        beta: truth.beta.clone(),
        covariates: covariates.names.clone(),
        total_count: counts.total(),
        fields,
    };
    write_json(out.join("truth.json"), &report).map_err(CliError::at("output"))
}

/// Points per prior density table.
const DENSITY_POINTS: usize = 801;

/// `prior`: density tables and curves for every `U_sigma` and for `phi`.
pub fn cmd_prior(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.validate(false)?;
    let echo = Echo::new("prior", cfg);
    let p = &cfg.priors;
    let priors = p
        .u_sigma
        .iter()
        .map(|&u| pc_prec_prior(u, p.alpha_sigma))
        .collect::<lgcp::Result<Vec<_>>>()
        .map_err(CliError::at("priors"))?;
    let labels: Vec<String> = p.u_sigma.iter().map(|u| format!("u_sigma_{u}")).collect();
    let colours: Vec<[u8; 3]> = (0..priors.len()).map(render::series_colour).collect();

    // sigma axis: zero, then geometric from the narrowest prior's 1e-4
    // quantile to the widest prior's 99.9% quantile
    let sigma_min = priors.iter().map(|pr| pr.sigma_quantile(1e-4)).fold(f64::INFINITY, f64::min);
    let sigma_max = priors.iter().map(|pr| pr.sigma_quantile(0.999)).fold(0.0, f64::max);
    let ratio = (sigma_max / sigma_min).ln();
    let sigmas: Vec<f64> = std::iter::once(0.0)
        .chain((0..DENSITY_POINTS).map(|k| sigma_min * (ratio * k as f64 / (DENSITY_POINTS - 1) as f64).exp()))
        .collect();
    let table = |xs: &[f64], f: &dyn Fn(&lgcp::pc_priors::PcPrecPrior, f64) -> f64| -> Vec<Vec<f64>> {
        xs.iter()
            .map(|&x| std::iter::once(x).chain(priors.iter().map(|pr| f(pr, x))).collect())
            .collect()
    };
    let sigma_rows = table(&sigmas, &|pr, s| pr.density_sigma(s));
    let mut header: Vec<&str> = vec!["sigma"];
    header.extend(labels.iter().map(String::as_str));
    write_table(out.join("sigma_density.csv"), &header, &sigma_rows).map_err(CliError::at("output"))?;

    // tau axis on the same (nonzero) sigma values
    let taus: Vec<f64> = sigmas[1..].iter().rev().map(|s| 1.0 / (s * s)).collect();
    let tau_rows = table(&taus, &|pr, t| pr.density_tau(t));
    header[0] = "tau";
    write_table(out.join("tau_density.csv"), &header, &tau_rows).map_err(CliError::at("output"))?;

    let curves: Vec<Vec<(f64, f64)>> = (0..priors.len())
        .map(|j| sigma_rows.iter().map(|r| (r[0], r[j + 1])).collect())
        .collect();
    render::line_plot(&curves, &colours, &out.join("sigma_density.png"))?;

    let window = cfg.window()?;
    let empty = CountGrid::from_counts(window, vec![0; window.n_cells()]).map_err(CliError::at("priors"))?;
    let base = build_base(cfg, &empty, &CovariateStack::empty(), false)?;
    let mix = &base.mix_prior;
    let phi_table = phi_density(mix);
    let phi_rows: Vec<Vec<f64>> = phi_table.iter().map(|&(x, d)| vec![x, d]).collect();
    write_table(out.join("phi_density.csv"), &["phi", "density"], &phi_rows).map_err(CliError::at("output"))?;
    render::line_plot(std::slice::from_ref(&phi_table), &[render::series_colour(2)], &out.join("phi_density.png"))?;

    let report = PriorReport {
        echo,
        precision: priors
            .iter()
            .map(|pr| PrecisionPriorSummary {
                u_sigma: pr.u_sigma,
                alpha_sigma: pr.alpha_sigma,
                lambda: pr.lambda,
                mean_sigma: pr.mean_sigma(),
                median_sigma: pr.sigma_quantile(0.5),
            })
            .collect(),
        mixing: MixingPriorSummary {
            u_phi: mix.u_phi,
            alpha_phi: mix.alpha_phi,
            theta: mix.theta,
            d_u_phi: mix.d_u,
            d_one: mix.d_one,
            method: mix.method,
            phi_mass: trapezoid(&phi_table),
            prob_below_u_phi: mix.prob_below(mix.u_phi),
        },
    };
    write_json(out.join("prior.json"), &report).map_err(CliError::at("output"))
}

/// Subdivisions of each mixing-prior table interval in the written `phi` table.
const PHI_REFINE: usize = 8;

/// Closed-form density of `phi` on the table's logit range, refined so that
/// trapezoid integration in `phi` is accurate.
pub fn phi_density(mix: &lgcp::pc_priors::PcMixPrior) -> Vec<(f64, f64)> {
    let knots: Vec<f64> = mix.logit_density_table.iter().map(|&(x, _)| x).collect();
    let mut out = Vec::with_capacity(PHI_REFINE * knots.len());
    for w in knots.windows(2) {
        for k in 0..PHI_REFINE {
            let x = w[0] + (w[1] - w[0]) * k as f64 / PHI_REFINE as f64;
            let phi = 1.0 / (1.0 + (-x).exp());
            out.push((phi, mix.log_density_phi(phi).exp()));
        }
    }
    if let Some(&x) = knots.last() {
        let phi = 1.0 / (1.0 + (-x).exp());
        out.push((phi, mix.log_density_phi(phi).exp()));
    }
    out
}

pub fn trapezoid(table: &[(f64, f64)]) -> f64 {
    table.windows(2).map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1)).sum()
}

/// `scale-check`: generalized variance before and after scaling at the
/// configured grid and its 2x refinement.
pub fn cmd_scale_check(cfg: &RunConfig, out: &Path) -> CliResult<ScaleReport> {
    cfg.validate(false)?;
    let echo = Echo::new("scale-check", cfg);
    let g = &cfg.grid;
    let entry = |nrow: usize, ncol: usize| -> CliResult<ScaleEntry> {
        let mut r = build_rw2d(nrow, ncol).map_err(CliError::at("structure"))?;
        if g.trend_constraints {
            r = r.with_trend_constraints();
        }
        let method = SpectrumMethod::auto(nrow * ncol, g.exact_limit);
        let scaled = scale_to_unit_gv(&r, method).map_err(CliError::at("structure"))?;
        let gv_after = scaled.gv_after().map_err(CliError::at("structure"))?;
        Ok(ScaleEntry {
            nrow,
            ncol,
            method,
            gv_before: scaled.gv_before,
            gv_after,
            unit_gv: (gv_after - 1.0).abs() <= UNIT_GV_TOL,
        })
    };
    let base = entry(g.nrow, g.ncol)?;
    let refined = entry(2 * g.nrow, 2 * g.ncol)?;

    let mut r = build_rw2d(g.nrow, g.ncol).map_err(CliError::at("structure"))?;
    if g.trend_constraints {
        r = r.with_trend_constraints();
    }
    let torus_gv = generalized_variance(&r, SpectrumMethod::Torus)
        .map_err(CliError::at("structure"))?
        .gv;
    let exact_gv = if g.nrow * g.ncol <= g.exact_limit {
        Some(
            generalized_variance(&r, SpectrumMethod::Exact)
                .map_err(CliError::at("structure"))?
                .gv,
        )
    } else {
        None
    };
    let report = ScaleReport {
        echo,
        refinement_ratio: refined.gv_before / base.gv_before,
        base,
        refined,
        exact_gv,
        torus_gv,
        exact_torus_rel_diff: exact_gv.map(|e| (torus_gv - e).abs() / e),
    };
    write_json(out.join("scale_check.json"), &report).map_err(CliError::at("output"))?;
    Ok(report)
}

/// Output directory: the flag wins over the config, then `./lgcp-out`.
pub fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.paths.output.clone())
        .unwrap_or_else(|| PathBuf::from("lgcp-out"))
}
