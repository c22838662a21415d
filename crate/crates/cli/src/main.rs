//! `folio`: ingest market data, train PGAC or ES agents, backtest and
//! compare.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use folio_core::backtest::{Baseline, TestWindow};

#[derive(Parser, Debug)]
#[command(name = "folio", version, about = "Portfolio management with reinforcement learning")]
struct Cli {
    /// Where artifacts go when neither --out nor the config names a directory.
    #[arg(long, global = true, env = "FOLIO_OUTPUT_DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a CSV or generate a synthetic market and print a summary.
    Ingest {
        #[arg(long)]
        config: Option<PathBuf>,
        /// OHLCV file to validate (overrides the config's data source).
        #[arg(long, conflicts_with = "synthetic")]
        csv: Option<PathBuf>,
        /// Generate the synthetic market described by the config (or the
        /// built-in default) and write it out as CSV.
        #[arg(long)]
        synthetic: bool,
        /// Destination for the generated CSV [default: <out>/synthetic.csv].
        #[arg(long, requires = "synthetic")]
        write: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an agent and write checkpoint.json, history.csv and
    /// config.resolved.toml.
    Train {
        #[arg(long, value_enum)]
        agent: AgentArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for rollouts [default: available cores].
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Replay a checkpoint or a baseline over a test window and write
    /// report.json and equity.csv.
    Backtest {
        #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Run config; defaults to the one embedded in the checkpoint.
        #[arg(long, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        /// START:LEN in day indices [default: the test_days right after
        /// training].
        #[arg(long)]
        window: Option<TestWindow>,
        /// Row label for the report.
        #[arg(long)]
        trial: Option<String>,
    },
    /// Tabulate reports with a mean row.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the table as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum AgentArg {
    Pgac,
    Es,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BaselineArg {
    Riskless,
    Equal,
    Best,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Riskless => Baseline::HoldRiskless,
            BaselineArg::Equal => Baseline::EqualWeight,
            BaselineArg::Best => Baseline::BestSingleAsset,
        }
    }
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let out = cli.out;
    match cli.command {
        Command::Ingest {
            config,
            csv,
            synthetic,
            write,
            seed,
        } => commands::ingest(commands::IngestArgs {
            config,
            csv,
            synthetic,
            write,
            seed,
            out,
        }),
        Command::Train {
            agent,
            config,
            seed,
            workers,
        } => commands::train(commands::TrainArgs {
            agent,
            config,
            seed,
            workers,
            out,
        }),
        Command::Backtest {
            checkpoint,
            baseline,
            config,
            window,
            trial,
        } => commands::backtest(commands::BacktestArgs {
            checkpoint,
            baseline: baseline.map(Baseline::from),
            config,
            window,
            trial,
            out,
        }),
        Command::Compare { reports, csv, json } => commands::compare(&reports, csv.as_deref(), json.as_deref()),
    }
}
