use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lgcp_cli::commands::{self, output_dir};
use lgcp_cli::{CliError, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "lgcp", version, about = "Fit discretized log-Gaussian Cox processes to point patterns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the sweep; 0 uses every core.
    #[arg(long, global = true, env = "LGCP_WORKERS")]
    workers: Option<usize>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Spatial fit for every U_sigma, plus the GLM reference.
    Fit,
    /// Non-spatial Poisson regression.
    Glm,
    /// Sweep with the field restricted orthogonal to the covariates.
    Rsr,
    /// Simulate a pattern from the configured truth.
    Simulate,
    /// Tabulate and plot the hyperpriors.
    Prior,
    /// Check unit generalized variance at the grid and its 2x refinement.
    ScaleCheck,
}

fn run(cli: &Cli, cfg: &RunConfig, out: &std::path::Path) -> CliResult<()> {
    let workers = cli.workers.or(cfg.workers).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::numerical("workers", e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Fit => commands::cmd_fit(cfg, out, false),
        Command::Rsr => commands::cmd_fit(cfg, out, true),
        Command::Glm => commands::cmd_glm(cfg, out),
        Command::Simulate => commands::cmd_simulate(cfg, out),
        Command::Prior => commands::cmd_prior(cfg, out),
        Command::ScaleCheck => commands::cmd_scale_check(cfg, out).map(|r| {
            println!(
                "gv {}x{}: {:.6} -> {:.3e} | {}x{}: {:.6} -> {:.3e} | ratio {:.4}",
                r.base.nrow,
                r.base.ncol,
                r.base.gv_before,
                r.base.gv_after,
                r.refined.nrow,
                r.refined.ncol,
                r.refined.gv_before,
                r.refined.gv_after,
                r.refinement_ratio
            );
        }),
    })
}

fn fail(err: &CliError, out: Option<&std::path::Path>) -> ExitCode {
    let json = err.to_json();
    eprintln!("{json}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{json}\n"));
        }
    }
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Some(config_path) = cli.config.as_deref() else {
        return fail(&CliError::input("config", "--config is required", None), cli.out.as_deref());
    };
    let mut cfg = match RunConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => return fail(&e, cli.out.as_deref()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = output_dir(cli.out.clone(), &cfg);
    let _ = std::fs::remove_file(out.join("error.json"));
    match run(&cli, &cfg, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, Some(&out)),
    }
}
