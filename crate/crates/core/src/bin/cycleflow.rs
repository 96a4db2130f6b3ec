use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cycleflow::cli::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "cycleflow",
    version,
    about = "Train and analyse generative flows on graphs with cycles"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured loss and write histories, summary and charts.
    Run { config: PathBuf },
    /// Directional derivatives of each loss along the cycles of the initial flow.
    Probe { config: PathBuf },
    /// Split a flow into its cycles and an acyclic remainder.
    Decompose {
        edge_list: PathBuf,
        flow_file: PathBuf,
    },
    /// Run the Metropolis-Hastings baseline of a Cayley task.
    Mh { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = cli::init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &args.command {
        Command::Run { config } => match load(config) {
            Ok(c) => cli::run(&c).map(|outs| {
                outs.iter()
                    .map(|o| format!("wrote history_{}.csv\n", o.name))
                    .collect::<String>()
                    + &format!("outputs in {}\n", c.output_dir.display())
            }),
            Err(code) => return code,
        },
        Command::Probe { config } => match load(config) {
            Ok(c) => cli::probe(&c),
            Err(code) => return code,
        },
        Command::Mh { config } => match load(config) {
            Ok(c) => cli::mh(&c),
            Err(code) => return code,
        },
        Command::Decompose {
            edge_list,
            flow_file,
        } => cli::decompose(edge_list, flow_file),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
