use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use codistill_cli::{apply_seed_offset, run, sweep, CliError, ExperimentConfig, RunMode};

#[derive(Parser)]
#[command(name = "codistill", version, about = "Online codistillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Common),
    /// Run one experiment per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Config key to vary, e.g. `codistill.reload_interval`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    /// Added to every seed.
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(mode) = &common.mode {
        cfg.mode = mode.parse::<RunMode>().map_err(|e| CliError::config("--mode", e))?;
    }
    apply_seed_offset(&mut cfg, common.seed_offset);
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(cfg.kind.as_str()));
    Ok((cfg, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(common) => load(common).and_then(|(cfg, out)| {
            let report = run(&cfg, &out)?;
            for (role, m) in &report.roles {
                println!("{role:>18}  final val loss {:.4}  accuracy {:.4}", m.final_val_loss, m.final_val_accuracy);
            }
            println!("wrote {}", out.display());
            Ok(())
        }),
        Command::Sweep { common, axis, values } => load(common).and_then(|(cfg, out)| {
            sweep(&cfg, axis, values, &out)?;
            println!("wrote {}", out.join("sweep.csv").display());
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
