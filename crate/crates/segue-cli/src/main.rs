use std::path::PathBuf;

use clap::{Parser, Subcommand};
use segue::Result;

mod commands;
mod config;
mod manifest;

#[derive(Parser)]
#[command(
    name = "segue",
    version,
    about = "Side-information-guided unlearnable example generation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the grating benchmark dataset.
    MakeFixture(commands::make_fixture::MakeFixtureArgs),
    /// Train the perturbation generator by two-stage alternating
    /// optimization against a surrogate.
    TrainGen(commands::train_gen::TrainGenArgs),
    /// Run a trained generator over a dataset and export the protected
    /// copy.
    Protect(commands::protect::ProtectArgs),
    /// Train an attacker model on a (protected) dataset and report its
    /// clean-test accuracy.
    Attack(commands::attack::AttackArgs),
    /// Protect one dataset with several methods, attack each export, and
    /// tabulate accuracy and generation time.
    Bench(commands::bench::BenchArgs),
    /// Print the annotated default training configuration as TOML.
    Defaults(DefaultsArgs),
}

#[derive(Debug, clap::Args)]
struct DefaultsArgs {
    /// Write the template here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeFixture(args) => commands::make_fixture::run(args),
        Command::TrainGen(args) => commands::train_gen::run(args),
        Command::Protect(args) => commands::protect::run(args),
        Command::Attack(args) => commands::attack::run(args),
        Command::Bench(args) => commands::bench::run(args),
        Command::Defaults(args) => {
            let text = config::paper_defaults_toml();
            match &args.out {
                Some(path) => {
                    segue::util::io::write_atomic(path, text.as_bytes())?;
                    println!("wrote {}", path.display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(&cli) {
        // Exit codes are part of the interface: 0 success, 2 configuration
        // error, 3 runtime abort, 4 I/O or format failure.
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
