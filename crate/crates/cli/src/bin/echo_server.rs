use clap::Parser;
use shmguard_cli::echo::{serve, ServerArgs};

/// Echo every frame back on each accepted channel.
#[derive(Parser)]
#[command(name = "echo-server", version)]
struct Cli {
    #[command(flatten)]
    args: ServerArgs,
}

fn main() -> anyhow::Result<()> {
    shmguard_cli::init_logging();
    serve(&Cli::parse().args)
}
