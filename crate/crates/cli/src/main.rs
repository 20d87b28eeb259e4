use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlens_cli::{commands, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "tlens", version, about = "Thermal-lens photon-pair simulator and fitter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a coincidence-counting trace.
    Simulate(Common),
    /// Fit lens parameters to a trace.
    Fit(Common),
    /// Windowed signal-idler correlation of a trace.
    Gsi(Common),
    /// Recover the true signal from coincidences.
    Denoise(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Input trace CSV (fit, gsi, denoise).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed (overrides source.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Write data files only, no plots.
    #[arg(long)]
    csv_only: bool,
}

fn required_trace(common: &Common) -> CliResult<&PathBuf> {
    common
        .trace
        .as_ref()
        .ok_or_else(|| CliError::Validation("this command needs --trace <path>".into()))
}

fn run(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let common = match &cli.command {
        Command::Simulate(c) | Command::Fit(c) | Command::Gsi(c) | Command::Denoise(c) => c,
    };
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.source.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let csv_only = common.csv_only || config.output.csv_only;
    let outputs = match &cli.command {
        Command::Simulate(_) => commands::simulate(&config, &out, csv_only)?,
        Command::Fit(c) => {
            let (outputs, report) = commands::fit(&config, required_trace(c)?, &out, csv_only)?;
            println!(
                "chi2/dof = {:.4} ({} dof), {} evaluations, {:?}",
                report.reduced_chi2, report.dof, report.n_evals, report.termination
            );
            outputs
        }
        Command::Gsi(c) => commands::gsi(&config, required_trace(c)?, &out, csv_only)?,
        Command::Denoise(c) => {
            let (outputs, report) = commands::denoise(&config, required_trace(c)?, &out, csv_only)?;
            println!("baseline g = {:.3}", report.g_baseline);
            if let Some(snr) = report.snr {
                println!(
                    "SNR singles = {:.4e}, coincidences = {:.4e}, ratio = {:.3}",
                    snr.singles, snr.coincidences, snr.ratio
                );
            }
            outputs
        }
    };
    Ok(outputs.files)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
