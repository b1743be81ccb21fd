use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use spin_diffusion_cli::commands::{self, SampleArgs};
use spin_diffusion_cli::error::exit;
use spin_diffusion_cli::CliResult;

/// Self-play fine-tuning of small conditional diffusion models.
#[derive(Parser)]
#[command(name = "spindiff", version)]
struct Cli {
    /// Directory under which run directories are created.
    #[arg(long, global = true, env = "SPIN_DIFFUSION_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration, or write it to a file.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        force: bool,
    },
    /// Generate (or check) the run's dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Supervised denoising training from a fresh initialisation.
    TrainSft {
        #[arg(long)]
        config: PathBuf,
    },
    /// Self-play fine-tuning from the supervised checkpoint.
    TrainSpin {
        #[arg(long)]
        config: PathBuf,
        /// Continue after the last completed iteration.
        #[arg(long)]
        resume: bool,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        condition: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the full reverse trajectories.
        #[arg(long)]
        trajectories: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate checkpoints against the target.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        /// Also report win rates against this checkpoint.
        #[arg(long)]
        versus: Option<PathBuf>,
    },
    /// Evaluate a finished run and write charts and a summary.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<String> {
    let root = &cli.out_root;
    match cli.command {
        Command::InitConfig { out, name, force } => commands::init_config(out.as_deref(), name.as_deref(), force),
        Command::GenData { config } => commands::gen_data(&config, root),
        Command::TrainSft { config } => commands::train_sft_cmd(&config, root),
        Command::TrainSpin { config, resume } => commands::train_spin_cmd(&config, root, resume),
        Command::Sample { config, checkpoint, n, condition, seed, trajectories, out } => commands::sample(
            &config,
            root,
            &SampleArgs { checkpoint: &checkpoint, n, condition, seed, trajectories, out: out.as_deref() },
        ),
        Command::Eval { config, checkpoint, versus } => commands::eval_cmd(&config, root, &checkpoint, versus.as_deref()),
        Command::Report { run_dir } => commands::report_cmd(&run_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(exit::OK),
                _ => ExitCode::from(exit::CONFIG),
            };
        }
    };
    match run(cli) {
        Ok(msg) => {
            print!("{msg}");
            if !msg.ends_with('\n') {
                println!();
            }
            ExitCode::from(exit::OK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
