mod cli;
mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Parser;

use cli::{Cli, Command, Ensemble, Simulate, Verify};
use error::{CliError, EXIT_FAILED, EXIT_OK};
use output::RunManifest;

fn run(cli: &Cli, argv: Vec<String>) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads {n}: {e}")))?;
    }
    let cfg = config::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let clock = Instant::now();

    let product = match &cli.command {
        Command::Simulate(Simulate::Micro(a)) => commands::simulate_micro(&cfg, seed, a)?,
        Command::Simulate(Simulate::Macro(a)) => commands::simulate_macro(&cfg, seed, a)?,
        Command::Verify(Verify::Compression(a)) => commands::verify_compression(&cfg, a)?,
        Command::Verify(Verify::Ou(a)) => commands::verify_ou(&cfg, seed, a)?,
        Command::Verify(Verify::Structure(a)) => commands::verify_structure(&cfg, seed, a)?,
        Command::CompareMicroMacro(a) => commands::compare_micro_macro(&cfg, a)?,
        Command::Ensemble(Ensemble::Logz(a)) => commands::ensemble_logz(&cfg, a)?,
        Command::Ensemble(Ensemble::Equivalence(a)) => commands::ensemble_equivalence(seed, a)?,
        Command::Ensemble(Ensemble::Variance(a)) => commands::ensemble_variance(seed, a)?,
        Command::Ensemble(Ensemble::Invariance(a)) => commands::ensemble_invariance(&cfg, seed, a)?,
    };

    output::emit(cli.out.as_deref(), &product.bytes)?;
    if let Some(path) = &cli.out {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand: cli.command.name().to_string(),
            argv,
            config_path: cli.config.as_ref().map(|p| p.display().to_string()),
            config: &cfg,
            seed,
            threads: cli.threads,
            output: path.display().to_string(),
            started_unix_seconds: started,
            wall_clock_seconds: clock.elapsed().as_secs_f64(),
        };
        output::write_manifest(path, &manifest)?;
    }
    if let Some(line) = &product.summary {
        println!("{line}");
    }
    if product.passed {
        Ok(EXIT_OK)
    } else {
        log::error!("{}: verification failed", cli.command.name());
        Ok(EXIT_FAILED)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    // clap exits with status 2 on usage errors and 0 for --help / --version
    let cli = Cli::parse_from(&argv);
    let code = match run(&cli, argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("heatbath: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
