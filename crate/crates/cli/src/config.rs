//! Run configuration: a single TOML file, resolved against its own directory.

use std::path::{Path, PathBuf};

use lgcp::inference::FitOptions;
use lgcp::model::Exposure;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DEFAULT_U_SIGMA: [f64; 6] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for the sweep; 0 uses every core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub paths: PathConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub preprocessing: PreprocessConfig,
    #[serde(default)]
    pub inference: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    /// Point pattern CSV with columns `x,y`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<PathBuf>,
    /// Covariate rasters in model order.
    #[serde(default, rename = "covariate")]
    pub covariates: Vec<CovariateFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateFile {
    pub name: String,
    pub file: PathBuf,
    /// Log-transform before standardizing.
    #[serde(default)]
    pub log: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
    pub nrow: usize,
    pub ncol: usize,
    #[serde(default)]
    pub exposure: Exposure,
    /// Also constrain the structured field to be orthogonal to both coordinates.
    #[serde(default)]
    pub trend_constraints: bool,
    /// Largest cell count handled with the exact spectrum; larger grids use the torus approximation.
    #[serde(default = "default_exact_limit")]
    pub exact_limit: usize,
    /// Knots of the mixing-prior table.
    #[serde(default = "default_phi_table")]
    pub phi_table_size: usize,
    /// Also run the sweep on the grid coarsened by this block factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_factor: Option<usize>,
}

fn default_exact_limit() -> usize {
    lgcp::igmrf::DEFAULT_EXACT_LIMIT
}

fn default_phi_table() -> usize {
    lgcp::pc_priors::DEFAULT_GRID_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub u_sigma: Vec<f64>,
    pub alpha_sigma: f64,
    pub u_phi: f64,
    pub alpha_phi: f64,
    /// Gaussian prior precision of every regression coefficient.
    pub beta_prec: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            u_sigma: DEFAULT_U_SIGMA.to_vec(),
            alpha_sigma: 0.01,
            u_phi: 0.5,
            alpha_phi: 2.0 / 3.0,
            beta_prec: lgcp::model::DEFAULT_BETA_PREC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Covariates are removed greedily until every VIF is below this; absent disables.
    pub vif_threshold: Option<f64>,
    /// Drop covariates whose 95% GLM interval contains zero.
    pub glm_prescreen: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            vif_threshold: Some(5.0),
            glm_prescreen: false,
        }
    }
}

/// Truth for the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub tau: f64,
    pub phi: f64,
    /// Intercept first, then one coefficient per covariate.
    pub beta: Vec<f64>,
}

impl RunConfig {
    /// Parses `path` and makes every relative path absolute against its directory.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input("config", format!("cannot read config: {e}"), Some(path)))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::input("config", e.to_string(), Some(path)))?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.paths.pattern.as_mut() {
            resolve(p);
        }
        for c in &mut cfg.paths.covariates {
            resolve(&mut c.file);
        }
        if let Some(p) = cfg.paths.output.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// Checks value ranges and that every referenced input file exists.
    pub fn validate(&self, needs_pattern: bool) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::input("config", msg, None));
        let p = &self.priors;
        if p.u_sigma.is_empty() {
            return bad("priors.u_sigma must list at least one value".into());
        }
        if let Some(u) = p.u_sigma.iter().find(|u| !(**u > 0.0 && u.is_finite())) {
            return bad(format!("priors.u_sigma values must be positive, got {u}"));
        }
        if !(p.beta_prec > 0.0 && p.beta_prec.is_finite()) {
            return bad(format!("priors.beta_prec must be positive, got {}", p.beta_prec));
        }
        if let Some(t) = self.preprocessing.vif_threshold {
            if t.is_nan() || t <= 1.0 {
                return bad(format!("preprocessing.vif_threshold must exceed 1, got {t}"));
            }
        }
        if self.grid.nrow < 3 || self.grid.ncol < 3 {
            return bad(format!(
                "grid must be at least 3x3 for the RW2D stencil, got {}x{}",
                self.grid.nrow, self.grid.ncol
            ));
        }
        if let Some(k) = self.grid.compare_factor {
            let (nr, nc) = (self.grid.nrow, self.grid.ncol);
            if k < 2 || !nr.is_multiple_of(k) || !nc.is_multiple_of(k) || nr / k < 3 || nc / k < 3 {
                return bad(format!(
                    "grid.compare_factor {k} must be at least 2, divide {}x{} and leave at least 3x3 cells",
                    self.grid.nrow, self.grid.ncol
                ));
            }
        }
        let mut names: Vec<&str> = self.paths.covariates.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("covariate name '{}' is used twice", w[0]));
        }
        if needs_pattern {
            match &self.paths.pattern {
                None => return bad("paths.pattern is required for this command".into()),
                Some(path) if !path.is_file() => {
                    return Err(CliError::input("config", "point pattern file not found", Some(path)))
                }
                _ => {}
            }
        }
        for c in &self.paths.covariates {
            if !c.file.is_file() {
                return Err(CliError::input(
                    "config",
                    format!("covariate file for '{}' not found", c.name),
                    Some(&c.file),
                ));
            }
        }
        Ok(())
    }

    pub fn window(&self) -> Result<lgcp::lattice::Window, CliError> {
        let g = &self.grid;
        lgcp::lattice::Window::new(g.xmin, g.xmax, g.ymin, g.ymax, g.nrow, g.ncol).map_err(CliError::at("config"))
    }
}

/// Resolved configuration embedded in every output bundle. The output
/// directory and worker count are left out: they do not affect results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Echo {
    pub version: String,
    pub command: String,
    pub config: RunConfig,
}

impl Echo {
    pub fn new(command: &str, cfg: &RunConfig) -> Echo {
        let mut config = cfg.clone();
        config.paths.output = None;
        config.workers = None;
        Echo {
            version: lgcp::VERSION.to_string(),
            command: command.to_string(),
            config,
        }
    }
}
