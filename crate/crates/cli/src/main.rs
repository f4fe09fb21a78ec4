use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

use ifl_cli::{cmd_attack, cmd_report, cmd_train, error_kind, AttackOptions, ExperimentConfig};
use ifl_core::attack::{DlgConfig, Optimizer};
use ifl_core::protocol::RoundSchedule;

#[derive(Parser)]
#[command(name = "ifl", version, about = "Federated learning with interleaved synthetic rounds and selective HE")]
struct Cli {
    /// Directory that holds experiment directories.
    #[arg(long, global = true, env = "IFL_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rho_syn: Option<u32>,
    #[arg(long)]
    rho_tot: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Rounds whose messages are kept for attacks.
    #[arg(long, value_delimiter = ',')]
    capture_rounds: Option<Vec<usize>>,
    /// Rounds whose aggregated model is saved.
    #[arg(long, value_delimiter = ',')]
    snapshot_rounds: Option<Vec<usize>>,
    #[arg(long)]
    parallel: bool,
}

impl Overrides {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.name {
            cfg.name = v;
        }
        if let Some(v) = self.label {
            cfg.label = Some(v);
        }
        cfg.baseline |= self.baseline;
        cfg.parallel |= self.parallel;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.repetitions {
            cfg.repetitions = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.clients {
            cfg.clients = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = Some(v);
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if self.rho_syn.is_some() || self.rho_tot.is_some() {
            cfg.schedule = RoundSchedule::new(
                self.rho_syn.unwrap_or(cfg.schedule.rho_syn),
                self.rho_tot.unwrap_or(cfg.schedule.rho_tot),
            )?;
        }
        if let Some(v) = self.lr {
            cfg.local.lr = v;
        }
        if let Some(v) = self.epochs {
            cfg.local.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.local.batch_size = v;
        }
        if let Some(v) = self.capture_rounds {
            cfg.capture_rounds = v;
        }
        if let Some(v) = self.snapshot_rounds {
            cfg.snapshot_rounds = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Lbfgs,
    Adam,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved experiment config as TOML.
    Config(Overrides),
    /// Run every repetition of an experiment.
    Train(Overrides),
    /// Run DLG against captured rounds of a run directory.
    Attack {
        run_dir: PathBuf,
        #[arg(long, value_delimiter = ',')]
        rounds: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        images_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DlgConfig::default().iterations)]
        iterations: usize,
        #[arg(long, value_enum, default_value = "lbfgs")]
        optimizer: OptimizerArg,
        #[arg(long, default_value_t = DlgConfig::default().step)]
        step: f64,
    },
    /// Summarise runs into a table with deltas against the baseline.
    Report {
        /// Run directories or experiment directories holding them.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// New directory for the report; defaults to `<output root>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config(o) => print!("{}", o.resolve()?.to_toml()?),
        Command::Train(o) => {
            for dir in cmd_train(&o.resolve()?, &cli.output_root)? {
                println!("{}", dir.display());
            }
        }
        Command::Attack { run_dir, rounds, images_per_class, seed, iterations, optimizer, step } => {
            let dlg = DlgConfig {
                iterations,
                step,
                optimizer: match optimizer {
                    OptimizerArg::Lbfgs => Optimizer::Lbfgs,
                    OptimizerArg::Adam => Optimizer::Adam,
                },
                ..DlgConfig::default()
            };
            let dir = cmd_attack(&run_dir, &AttackOptions { rounds, images_per_class, seed, dlg })?;
            println!("{}", dir.display());
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| cli.output_root.join("report"));
            print!("{}", cmd_report(&runs, &out)?.to_text_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "kind": error_kind(&e),
                "message": format!("{e:#}"),
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
