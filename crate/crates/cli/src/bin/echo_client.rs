use clap::Parser;
use shmguard_cli::echo::{client, ClientArgs};

/// Connect to an echo server and check the echo.
#[derive(Parser)]
#[command(name = "echo-client", version)]
struct Cli {
    #[command(flatten)]
    args: ClientArgs,
}

fn main() -> anyhow::Result<()> {
    shmguard_cli::init_logging();
    client(&Cli::parse().args)
}
