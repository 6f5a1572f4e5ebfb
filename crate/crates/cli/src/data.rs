//! Data preparation: counts, covariates, screening and model assembly.

use lgcp::igmrf::{build_rw2d, scale_to_unit_gv, SpectrumMethod};
use lgcp::inference::glm_fit;
use lgcp::io::{read_covariate_rasters, read_points};
use lgcp::lattice::{grid_counts, preprocess_covariates, vif_filter, CountGrid, CovariateStack, VifOutcome};
use lgcp::model::ModelSpec;
use lgcp::pc_priors::{pc_mix_prior, pc_prec_prior};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Covariate removed by the GLM prescreen, with its 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenedOut {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

/// Record of what preprocessing did to the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub n_points: usize,
    pub dropped_points: usize,
    pub total_count: u64,
    /// Standardized covariates before screening, with their transforms.
    pub standardized: CovariateStack,
    pub vif: Option<VifOutcome>,
    pub glm_removed: Vec<ScreenedOut>,
    /// Covariates entering the model, in model order.
    pub kept: Vec<String>,
}

/// Model inputs at the analysis resolution.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub counts: CountGrid,
    pub covariates: CovariateStack,
    pub report: PreprocessReport,
}

/// Reads the configured covariates, standardizing them on the analysis grid.
pub fn load_covariates(cfg: &RunConfig) -> CliResult<CovariateStack> {
    let window = cfg.window()?;
    let files: Vec<(String, std::path::PathBuf)> =
        cfg.paths.covariates.iter().map(|c| (c.name.clone(), c.file.clone())).collect();
    if files.is_empty() {
        return Ok(CovariateStack::empty());
    }
    let raw = read_covariate_rasters(&files, &window).map_err(CliError::at("covariates"))?;
    let flags: Vec<bool> = cfg.paths.covariates.iter().map(|c| c.log).collect();
    preprocess_covariates(&raw, &flags).map_err(CliError::at("covariates"))
}

/// Counts the pattern, loads covariates and applies the configured screens.
pub fn prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let window = cfg.window()?;
    let pattern_path = cfg
        .paths
        .pattern
        .as_ref()
        .ok_or_else(|| CliError::input("config", "paths.pattern is required", None))?;
    let pattern = read_points(pattern_path).map_err(CliError::at("pattern"))?;
    let counts = grid_counts(&pattern, &window).map_err(CliError::at("pattern"))?;
    let standardized = load_covariates(cfg)?;

    let mut covariates = standardized.clone();
    let vif = match cfg.preprocessing.vif_threshold {
        Some(t) if covariates.p() >= 2 => {
            let out = vif_filter(&covariates, t).map_err(CliError::at("vif"))?;
            for (name, v) in &out.removed {
                log::info!("VIF screen removed '{name}' (VIF {v:.2})");
            }
            covariates = covariates.select(&out.kept).map_err(CliError::at("vif"))?;
            Some(out)
        }
        _ => None,
    };

    let mut glm_removed = Vec::new();
    if cfg.preprocessing.glm_prescreen && covariates.p() > 0 {
        let spec = build_spec(cfg, &counts, &covariates, cfg.priors.u_sigma[0], false)?;
        let g = glm_fit(&spec).map_err(CliError::at("glm-prescreen"))?;
        let mut keep = Vec::new();
        for s in &g.beta_marginals[1..] {
            if s.lower <= 0.0 && s.upper >= 0.0 {
                log::info!("GLM prescreen removed '{}' (95% interval [{:.3}, {:.3}])", s.name, s.lower, s.upper);
                glm_removed.push(ScreenedOut {
                    name: s.name.clone(),
                    lower: s.lower,
                    upper: s.upper,
                });
            } else {
                keep.push(s.name.clone());
            }
        }
        covariates = covariates.select(&keep).map_err(CliError::at("glm-prescreen"))?;
    }

    let report = PreprocessReport {
        n_points: pattern.len(),
        dropped_points: counts.dropped,
        total_count: counts.total(),
        standardized,
        vif,
        glm_removed,
        kept: covariates.names.clone(),
    };
    Ok(Prepared {
        counts,
        covariates,
        report,
    })
}

/// Assembles the model for one prior scale `u_sigma`.
pub fn build_spec(
    cfg: &RunConfig,
    counts: &CountGrid,
    covariates: &CovariateStack,
    u_sigma: f64,
    rsr: bool,
) -> CliResult<ModelSpec> {
    let base = build_base(cfg, counts, covariates, rsr)?;
    with_u_sigma(cfg, &base, u_sigma)
}

/// Model with everything except the precision prior, which is set to the
/// first sweep value. The structure scaling and mixing prior do not depend
/// on `u_sigma`, so a sweep shares one base.
pub fn build_base(cfg: &RunConfig, counts: &CountGrid, covariates: &CovariateStack, rsr: bool) -> CliResult<ModelSpec> {
    let w = counts.window;
    let mut r = build_rw2d(w.nrow, w.ncol).map_err(CliError::at("structure"))?;
    if cfg.grid.trend_constraints {
        r = r.with_trend_constraints();
    }
    let method = SpectrumMethod::auto(w.n_cells(), cfg.grid.exact_limit);
    let prec = scale_to_unit_gv(&r, method).map_err(CliError::at("structure"))?;
    let p = &cfg.priors;
    let mix = pc_mix_prior(p.u_phi, p.alpha_phi, &prec, cfg.grid.phi_table_size, method)
        .map_err(CliError::at("priors"))?;
    let pp = pc_prec_prior(p.u_sigma[0], p.alpha_sigma).map_err(CliError::at("priors"))?;
    ModelSpec::new(counts.clone(), covariates.clone(), prec, pp, mix)
        .and_then(|s| s.with_beta_prec(p.beta_prec))
        .and_then(|s| s.with_rsr(rsr))
        .map(|s| s.with_exposure(cfg.grid.exposure))
        .map_err(CliError::at("model"))
}

pub fn with_u_sigma(cfg: &RunConfig, base: &ModelSpec, u_sigma: f64) -> CliResult<ModelSpec> {
    let mut spec = base.clone();
    spec.prec_prior = pc_prec_prior(u_sigma, cfg.priors.alpha_sigma).map_err(CliError::at("priors"))?;
    Ok(spec)
}
