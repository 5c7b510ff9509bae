use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use decision_engine::service::{self, RunOptions, ShowFilters, ShowWhat};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "decision-engine",
    version,
    about = "Run and inspect rule-driven provisioning channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check every channel file in the config directory
    Validate {
        #[arg(long, env = "DE_CONFIG_DIR")]
        config: PathBuf,
        /// Also instantiate modules against this scenario
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run all channels for N cycles against a scenario
    Run {
        #[arg(long, env = "DE_CONFIG_DIR")]
        config: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 20)]
        cycles: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Decision log to create (must not already hold records)
        #[arg(long)]
        log: PathBuf,
    },
    /// Inspect a decision log
    Show {
        #[arg(value_enum)]
        what: What,
        #[command(flatten)]
        filters: Filters,
    },
    /// Same as `show status`
    Status {
        #[command(flatten)]
        filters: Filters,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Products,
    Decisions,
    Status,
}

#[derive(Args)]
struct Filters {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    cycle: Option<u64>,
    #[arg(long)]
    channel: Option<String>,
    /// Only this product (for `products`)
    #[arg(long)]
    product: Option<String>,
    /// Raw log lines instead of the readable trace (for `decisions`)
    #[arg(long)]
    json: bool,
}

fn show(what: ShowWhat, f: Filters) -> i32 {
    let filters = ShowFilters {
        cycle: f.cycle,
        channel: f.channel,
        product: f.product,
        json: f.json,
    };
    service::cmd_show(&f.log, what, &filters, &mut io::stdout(), &mut io::stderr())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::from_env("DE_LOG"))
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { config, scenario } => service::cmd_validate(
            &config,
            scenario.as_deref(),
            &mut io::stdout(),
            &mut io::stderr(),
        ),
        Command::Run {
            config,
            scenario,
            cycles,
            seed,
            log,
        } => {
            let opts = RunOptions {
                config_dir: config,
                scenario,
                cycles,
                seed,
                log: Some(log),
            };
            service::cmd_run(&opts, &mut io::stdout(), &mut io::stderr())
        }
        Command::Show { what, filters } => {
            let what = match what {
                What::Products => ShowWhat::Products,
                What::Decisions => ShowWhat::Decisions,
                What::Status => ShowWhat::Status,
            };
            show(what, filters)
        }
        Command::Status { filters } => show(ShowWhat::Status, filters),
    };
    ExitCode::from(code as u8)
}
