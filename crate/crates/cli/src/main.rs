use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use samora_cli::ablate::cmd_ablate;
use samora_cli::analyze::cmd_analyze;
use samora_cli::config::{load_config, Overrides};
use samora_cli::gradcheck::cmd_gradcheck;
use samora_cli::sensitivity::cmd_sensitivity;
use samora_cli::train::cmd_train;
use samora_cli::CliError;

/// Train and inspect task-routed low-rank adapters on desk-scale models.
#[derive(Parser)]
#[command(name = "samora", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the model variant (samora, wo_router, wo_scaling, wo_orth, wo_match, lora).
    #[arg(long)]
    variant: Option<String>,
    /// Override the training precision.
    #[arg(long, value_parser = ["f64", "f32"])]
    precision: Option<String>,
    /// Override any config key, e.g. --set train.lr=1e-3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(self) -> (Option<PathBuf>, Overrides) {
        let over = Overrides {
            seed: self.seed,
            out: self.out,
            variant: self.variant,
            precision: self.precision,
            set: self.set,
        };
        (self.config, over)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one variant with one seed and write its run artifacts.
    Train(RunArgs),
    /// Run the full variant-by-seed ablation grid and summarize it.
    Ablate(RunArgs),
    /// Rebuild a finished run from its checkpoint and write analysis reports.
    Analyze {
        /// Checkpoint written by train or ablate.
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory for the reports.
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Verify analytic gradients against finite differences on toy models.
    Gradcheck,
    /// Sweep routing and scaling hyperparameters over a value grid.
    Sensitivity {
        #[command(flatten)]
        run: RunArgs,
        /// Grid axis, e.g. --grid tau=0.4,0.8. Repeatable.
        #[arg(long, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
    },
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train(args) => {
            let (path, over) = args.overrides();
            let cfg = load_config(path.as_deref(), &over)?;
            cmd_train(&cfg).map(|_| ())
        }
        Cmd::Ablate(args) => {
            let (path, over) = args.overrides();
            let cfg = load_config(path.as_deref(), &over)?;
            cmd_ablate(&cfg).map(|_| ())
        }
        Cmd::Analyze { ckpt, out } => cmd_analyze(&ckpt, &out),
        Cmd::Gradcheck => cmd_gradcheck(),
        Cmd::Sensitivity { run, grid } => {
            let (path, over) = run.overrides();
            let cfg = load_config(path.as_deref(), &over)?;
            cmd_sensitivity(&cfg, &grid).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
