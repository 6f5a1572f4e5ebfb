//! `prior`, `scale-check`, `glm`, `rsr`, the resolution comparison and the
//! error contract.

mod common;

use std::path::Path;

use common::*;
use lgcp::io::{read_json, read_table};
use lgcp_cli::commands::{FitBundle, PriorReport, ScaleReport, UNIT_GV_TOL};
use lgcp_cli::error::{CliError, ErrorKind};

fn grid_only(nrow: usize, ncol: usize) -> String {
    format!("[grid]\nxmin = 0\nxmax = 1\nymin = 0\nymax = 1\nnrow = {nrow}\nncol = {ncol}\n")
}

fn in_dir(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn ok(args: &[&str], cwd: &Path) {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs a failing command and returns its exit code and parsed error JSON.
fn failure(args: &[&str], cwd: &Path) -> (i32, CliError) {
    let out = run(args, cwd);
    let code = out.status.code().expect("exit code");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let err: CliError = serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    (code, err)
}

#[test]
fn phi_density_table_integrates_to_one() {
    let dir = in_dir(&grid_only(12, 12));
    ok(&["prior", "--config", "run.toml", "--out", "out"], dir.path());
    let (header, rows) = read_table(dir.path().join("out/phi_density.csv")).unwrap();
    assert_eq!(header, ["phi", "density"]);
    let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let y: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let mass = trapezoid(&x, &y);
    assert!((mass - 1.0).abs() < 1e-4, "mass {mass}");
    let report: PriorReport = read_json(dir.path().join("out/prior.json")).unwrap();
    assert_eq!(report.mixing.phi_mass, mass);
    assert!((report.mixing.prob_below_u_phi - 2.0 / 3.0).abs() < 1e-3);
    assert!(dir.path().join("out/phi_density.png").is_file());
}

#[test]
fn sigma_density_for_unit_scale_peaks_at_zero() {
    let dir = in_dir(&format!("{}\n[priors]\nu_sigma = [1.0]\nalpha_sigma = 0.01\n", grid_only(6, 6)));
    ok(&["prior", "--config", "run.toml", "--out", "out"], dir.path());
    let (header, rows) = read_table(dir.path().join("out/sigma_density.csv")).unwrap();
    assert_eq!(header, ["sigma", "u_sigma_1"]);
    assert_eq!(rows[0][0], 0.0);
    let lambda = -(0.01f64).ln();
    assert!((rows[0][1] - lambda).abs() < 1e-12, "density at 0: {}", rows[0][1]);
    for w in rows.windows(2) {
        assert!(w[1][1] < w[0][1], "not decreasing at sigma = {}", w[1][0]);
    }
    let (_, tau_rows) = read_table(dir.path().join("out/tau_density.csv")).unwrap();
    assert!(tau_rows.iter().all(|r| r[0] > 0.0 && r[1] >= 0.0));
    let report: PriorReport = read_json(dir.path().join("out/prior.json")).unwrap();
    assert!((report.precision[0].lambda - lambda).abs() < 1e-12);
    assert!(dir.path().join("out/sigma_density.png").is_file());
}

#[test]
fn default_prior_run_tabulates_the_whole_sweep() {
    let dir = in_dir(&grid_only(8, 8));
    ok(&["prior", "--config", "run.toml", "--out", "out"], dir.path());
    let (header, rows) = read_table(dir.path().join("out/sigma_density.csv")).unwrap();
    assert_eq!(header.len(), 7);
    let x: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    for j in 1..7 {
        let y: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        // the axis covers the 99.9% quantile of the widest prior only
        let mass = trapezoid(&x, &y);
        assert!(mass > 0.99 && mass < 1.0 + 1e-3, "{}: mass {mass}", header[j]);
    }
}

#[test]
fn scale_check_reports_unit_gv_and_the_refinement_ratio() {
    let dir = in_dir(&grid_only(16, 16));
    ok(&["scale-check", "--config", "run.toml", "--out", "out"], dir.path());
    let r: ScaleReport = read_json(dir.path().join("out/scale_check.json")).unwrap();
    assert_eq!((r.base.nrow, r.refined.nrow), (16, 32));
    for e in [&r.base, &r.refined] {
        assert!((e.gv_after - 1.0).abs() <= UNIT_GV_TOL, "{}x{}: {}", e.nrow, e.ncol, e.gv_after);
        assert!(e.unit_gv);
    }
    assert!((3.4..=4.6).contains(&r.refinement_ratio), "ratio {}", r.refinement_ratio);
}

#[test]
#[ignore = "free-boundary corner and edge variances put exact GV about 32% above the torus value at 20x20"]
fn scale_check_exact_and_torus_agree_at_20x20() {
    let dir = in_dir(&grid_only(20, 20));
    ok(&["scale-check", "--config", "run.toml", "--out", "out"], dir.path());
    let r: ScaleReport = read_json(dir.path().join("out/scale_check.json")).unwrap();
    let diff = r.exact_torus_rel_diff.expect("20x20 is within the exact limit");
    assert!(diff < 0.10, "exact {:?} vs torus {}: {diff}", r.exact_gv, r.torus_gv);
}

#[test]
fn missing_covariate_file_exits_2_naming_the_path() {
    let dir = workspace(&fit_config("u_sigma = [1.0]", ""));
    let cfg = std::fs::read_to_string(dir.path().join("fit.toml")).unwrap().replace("w.csv", "absent.csv");
    std::fs::write(dir.path().join("fit.toml"), cfg).unwrap();
    let (code, err) = failure(&["fit", "--config", "fit.toml", "--out", "out"], dir.path());
    assert_eq!(code, 2);
    assert_eq!(err.kind, ErrorKind::Input);
    assert!(err.path.as_deref().is_some_and(|p| p.ends_with("absent.csv")), "{err:?}");
    let written: CliError = read_json(dir.path().join("out/error.json")).unwrap();
    assert_eq!(written, err);
}

#[test]
fn invalid_configs_exit_2() {
    let cases = [
        format!("{}\n[priors]\nu_sigma = []\n", grid_only(6, 6)),
        format!("{}\n[priors]\nu_sigma = [1.0, -0.5]\n", grid_only(6, 6)),
        format!("{}\nunknown_key = 3\n", grid_only(6, 6)),
        grid_only(2, 6),
        "seed = 1\n".to_string(),
    ];
    for cfg in cases {
        let dir = in_dir(&cfg);
        let (code, err) = failure(&["prior", "--config", "run.toml", "--out", "out"], dir.path());
        assert_eq!((code, err.kind), (2, ErrorKind::Input), "{cfg}");
        assert_eq!(err.stage, "config");
    }
    let dir = in_dir(&grid_only(6, 6));
    let (code, err) = failure(&["fit", "--config", "run.toml", "--out", "out"], dir.path());
    assert_eq!(code, 2, "fit without a pattern: {err:?}");
    let (code, _) = failure(&["prior", "--config", "nope.toml"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn numerical_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    write_covariates(dir.path());
    let cfg = sim_config().replace("beta = [0.8", "beta = [45.0");
    std::fs::write(dir.path().join("sim.toml"), cfg).unwrap();
    let (code, err) = failure(&["simulate", "--config", "sim.toml", "--out", "out"], dir.path());
    assert_eq!((code, err.kind), (1, ErrorKind::Numerical), "{err:?}");
    assert_eq!(err.stage, "simulate");
}

#[test]
fn seed_flag_changes_the_simulation() {
    let dir = tempfile::tempdir().unwrap();
    write_covariates(dir.path());
    std::fs::write(dir.path().join("sim.toml"), sim_config()).unwrap();
    ok(&["simulate", "--config", "sim.toml", "--out", "a"], dir.path());
    ok(&["simulate", "--config", "sim.toml", "--out", "b", "--seed", "7"], dir.path());
    ok(&["simulate", "--config", "sim.toml", "--out", "c", "--seed", "8"], dir.path());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("pattern.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn glm_command_writes_a_single_interval_row() {
    let dir = workspace(&fit_config("", ""));
    ok(&["glm", "--config", "fit.toml", "--out", "out"], dir.path());
    let b: FitBundle = read_json(dir.path().join("out/glm/fit.json")).unwrap();
    assert_eq!(b.u_sigma, None);
    assert_eq!(b.echo.command, "glm");
    assert!(b.result.sigma_marginal.is_none());
    let (_, rows) = read_table(dir.path().join("out/credible_intervals.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], b.result.beta_marginals[0].mean);
}

#[test]
fn rsr_command_records_the_restriction() {
    let dir = workspace(&fit_config("u_sigma = [1.0]", ""));
    ok(&["rsr", "--config", "fit.toml", "--out", "out"], dir.path());
    let b: FitBundle = read_json(dir.path().join("out/u_sigma_1/fit.json")).unwrap();
    assert!(b.result.diagnostics.rsr);
    assert_eq!(b.echo.command, "rsr");
}

#[test]
fn compare_factor_adds_a_coarse_sweep() {
    let dir = workspace(&fit_config("u_sigma = [0.5, 1.0]", "compare_factor = 2\n"));
    ok(&["fit", "--config", "fit.toml", "--out", "out"], dir.path());
    let coarse: FitBundle = read_json(dir.path().join("out/coarse_x2/u_sigma_1/fit.json")).unwrap();
    assert_eq!((coarse.nrow, coarse.ncol), (NROW / 2, NCOL / 2));
    let (header, rows) = read_table(dir.path().join("out/resolution_comparison.csv")).unwrap();
    assert_eq!(header[0], "u_sigma");
    assert_eq!(rows.len(), 2);
    let fine: FitBundle = read_json(dir.path().join("out/u_sigma_1/fit.json")).unwrap();
    assert_eq!(rows[1][1], fine.result.sigma_marginal.unwrap().mean);
    assert_eq!(rows[1][2], coarse.result.sigma_marginal.unwrap().mean);
}

#[test]
fn glm_prescreen_drops_an_irrelevant_covariate() {
    let dir = workspace(&fit_config("u_sigma = [1.0]", ""));
    // pure noise covariate with no effect on the simulated counts
    let mut noise = format!("nrow,{NROW}\nncol,{NCOL}\nxmin,0\nxmax,16\nymin,0\nymax,12\n");
    for r in 0..NROW {
        let row: Vec<String> = (0..NCOL).map(|c| format!("{:.6}", (((r * 31 + c * 17) % 23) as f64 - 11.0) / 7.0)).collect();
        noise.push_str(&(row.join(",") + "\n"));
    }
    std::fs::write(dir.path().join("noise.csv"), noise).unwrap();
    let cfg = std::fs::read_to_string(dir.path().join("fit.toml")).unwrap()
        + "\n[[paths.covariate]]\nname = \"noise\"\nfile = \"noise.csv\"\n\n[preprocessing]\nglm_prescreen = true\n";
    std::fs::write(dir.path().join("fit.toml"), cfg).unwrap();
    ok(&["fit", "--config", "fit.toml", "--out", "out"], dir.path());
    let pre: lgcp_cli::data::PreprocessReport = read_json(dir.path().join("out/preprocessing.json")).unwrap();
    assert_eq!(pre.standardized.names, ["z", "w", "noise"]);
    let removed: Vec<&str> = pre.glm_removed.iter().map(|s| s.name.as_str()).collect();
    assert!(removed.contains(&"noise"), "{removed:?}");
    assert!(!pre.kept.contains(&"noise".to_string()));
    let b: FitBundle = read_json(dir.path().join("out/u_sigma_1/fit.json")).unwrap();
    assert_eq!(b.result.beta_marginals.len(), 1 + pre.kept.len());
}
