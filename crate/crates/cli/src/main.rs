mod checkpoint;
mod commands;
mod config;

use clap::Parser;

/// Insertion-based document translation on deterministic synthetic corpora.
#[derive(Parser, Debug)]
#[command(name = "docins", version)]
struct Cli {
    /// Worker threads for batch-parallel gradients (1 = fully sequential;
    /// results are bit-identical either way).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand, Debug)]
enum Command {
    GenData(commands::gen_data::Args),
    Train(commands::train::Args),
    Decode(commands::decode::Args),
    Eval(commands::eval::Args),
    Gradcheck(commands::gradcheck::Args),
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()?;
    match &cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Decode(args) => commands::decode::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(&cli) {
        eprintln!("error: {error:#}");
        std::process::exit(1);
    }
}
