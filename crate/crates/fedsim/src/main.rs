//! Command-line interface: run experiments and fetch config templates.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedsim::runner::{self, ExperimentType, RunOptions};
use fedsim::templates;

#[derive(Parser)]
#[command(
    name = "fedsim",
    about = "Deterministic single-process simulator for centralized federated learning",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpTypeArg {
    Federation,
    Centralized,
    #[value(name = "clients-only")]
    ClientsOnly,
}

impl From<ExpTypeArg> for ExperimentType {
    fn from(value: ExpTypeArg) -> Self {
        match value {
            ExpTypeArg::Federation => ExperimentType::Federation,
            ExpTypeArg::Centralized => ExperimentType::Centralized,
            ExpTypeArg::ClientsOnly => ExperimentType::ClientsOnly,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment: run --config=EXP.yaml EXP_TYPE ALG.yaml
    Run {
        /// Experiment configuration file
        #[arg(long = "config", value_name = "EXP_CFG")]
        config: PathBuf,
        /// federation | centralized | clients-only
        #[arg(value_name = "EXP_TYPE")]
        exp_type: ExpTypeArg,
        /// Algorithm configuration file
        #[arg(value_name = "ALG_CFG")]
        algorithm: PathBuf,
        /// Directory with plugin algorithm manifests (for dotted names)
        #[arg(long, value_name = "DIR")]
        plugins: Option<PathBuf>,
        /// Write the round log to this file (.json for JSON, else CSV)
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
        /// Override the seed in the experiment config
        #[arg(long, value_name = "N")]
        seed: Option<u64>,
    },
    /// Fetch bundled configuration templates
    Get {
        #[command(subcommand)]
        what: GetCommand,
    },
}

#[derive(Subcommand)]
enum GetCommand {
    /// Write ./config/NAME.yaml from the bundled template
    Config {
        name: String,
        /// Overwrite an existing file
        #[arg(long)]
        force: bool,
    },
    /// List available template names
    List,
}

fn run(cli: Cli) -> fedsim::Result<()> {
    match cli.command {
        Command::Run {
            config,
            exp_type,
            algorithm,
            plugins,
            log,
            seed,
        } => {
            let options = RunOptions {
                plugins_dir: plugins,
                log_path: log,
                seed_override: seed,
            };
            runner::execute_run(&config, exp_type.into(), &algorithm, &options)
        }
        Command::Get { what } => match what {
            GetCommand::Config { name, force } => {
                let path = templates::get_template(&name, force)?;
                println!("wrote {}", path.display());
                Ok(())
            }
            GetCommand::List => {
                for name in templates::list_templates() {
                    println!("{name}");
                }
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
