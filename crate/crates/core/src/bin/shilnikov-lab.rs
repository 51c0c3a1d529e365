use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use shilnikov_lab::cli_report::{cmd_fixed_points, cmd_hetero_search, cmd_spectrum, CommonArgs, GridArgs};
use shilnikov_lab::config::default_config_text;

#[derive(Parser)]
#[command(name = "shilnikov-lab", version, about = "Return-map and flow experiments near symmetric saddle-focus loops")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// INI configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Recorded in the manifest; the solvers are deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

impl From<Common> for CommonArgs {
    fn from(c: Common) -> Self {
        CommonArgs { config: c.config, out: c.out, jobs: c.jobs, seed: c.seed }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fixed points of T1 along the ladder.
    FixedPoints {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k_min: Option<i64>,
        #[arg(long)]
        k_max: Option<i64>,
    },
    /// Loop, heteroclinic, index-2 and expansion pipeline over a (j0, k) grid.
    HeteroSearch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        j0_min: Option<i64>,
        #[arg(long)]
        j0_max: Option<i64>,
        #[arg(long)]
        k_min: Option<i64>,
        #[arg(long)]
        k_max: Option<i64>,
    },
    /// Spectrum of the example flow at the origin.
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::FixedPoints { common, k_min, k_max } => cmd_fixed_points(&common.into(), k_min, k_max),
        Command::HeteroSearch { common, j0_min, j0_max, k_min, k_max } => {
            cmd_hetero_search(&common.into(), GridArgs { j0_min, j0_max, k_min, k_max })
        }
        Command::Spectrum { common } => cmd_spectrum(&common.into()),
        Command::DefaultConfig => {
            print!("{}", default_config_text());
            return;
        }
    };
    let code = outcome.exit.code();
    if code == 0 {
        println!("{}", outcome.summary);
    } else {
        eprintln!("{}", outcome.summary);
    }
    std::process::exit(code);
}
