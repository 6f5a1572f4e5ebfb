//! Fixtures: small covariate rasters, configs and a binary runner.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

pub const NROW: usize = 12;
pub const NCOL: usize = 16;
pub const BETA_TRUE: [f64; 3] = [0.8, 0.5, -0.4];

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lgcp")
}

pub fn run(args: &[&str], cwd: &Path) -> Output {
    std::process::Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .env_remove("LGCP_WORKERS")
        .output()
        .expect("binary runs")
}

fn write_raster(path: &Path, f: impl Fn(usize, usize) -> f64) {
    let mut s = format!("nrow,{NROW}\nncol,{NCOL}\nxmin,0\nxmax,16\nymin,0\nymax,12\n");
    for r in 0..NROW {
        let row: Vec<String> = (0..NCOL).map(|c| format!("{:.6}", f(r, c))).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

/// Writes `z.csv` (positive, log-transformed) and `w.csv` into `dir`.
pub fn write_covariates(dir: &Path) {
    write_raster(&dir.join("z.csv"), |r, c| {
        (0.4 * c as f64).sin() + 0.3 * (0.5 * r as f64).cos() + 1.5
    });
    write_raster(&dir.join("w.csv"), |r, c| {
        0.1 * r as f64 + 0.05 * c as f64 + 0.2 * ((r * c) as f64).sin()
    });
}

pub const GRID: &str = "[grid]\nxmin = 0\nxmax = 16\nymin = 0\nymax = 12\nnrow = 12\nncol = 16\n";

pub const COVARIATES: &str = "[[paths.covariate]]\nname = \"z\"\nfile = \"z.csv\"\nlog = true\n\n\
[[paths.covariate]]\nname = \"w\"\nfile = \"w.csv\"\n";

pub fn sim_config() -> String {
    format!("seed = 7\n{GRID}\n{COVARIATES}\n[simulate]\ntau = 4.0\nphi = 0.7\nbeta = [0.8, 0.5, -0.4]\n")
}

/// Fit config reading `sim/pattern.csv`; `extra` is appended to `[priors]`.
pub fn fit_config(priors: &str, grid_extra: &str) -> String {
    format!("paths.pattern = \"sim/pattern.csv\"\n{GRID}{grid_extra}\n{COVARIATES}\n[priors]\n{priors}\n")
}

/// Directory with covariates, a simulated pattern under `sim/` and the
/// given fit config as `fit.toml`.
pub fn workspace(fit_toml: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_covariates(dir.path());
    std::fs::write(dir.path().join("sim.toml"), sim_config()).unwrap();
    let out = run(&["simulate", "--config", "sim.toml", "--out", "sim"], dir.path());
    assert!(out.status.success(), "simulate failed: {}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(dir.path().join("fit.toml"), fit_toml).unwrap();
    dir
}

/// Every file below `root`, relative and sorted.
pub fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, acc: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, root, acc);
            } else {
                acc.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut acc = Vec::new();
    walk(root, root, &mut acc);
    acc.sort();
    acc
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (xw[1] - xw[0]) * (yw[0] + yw[1]))
        .sum()
}
