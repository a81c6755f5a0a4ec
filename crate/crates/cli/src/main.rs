use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shmguard_cli::bench::{BenchArgs, Outcome};
use shmguard_cli::broker::BrokerArgs;
use shmguard_cli::echo::{ClientArgs, ServerArgs};
use shmguard_cli::{bench, broker, echo, init_logging};

/// Authenticated shared-memory channels between services.
#[derive(Parser)]
#[command(name = "shmguard", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the broker: owns the region, issues credentials, brokers handshakes.
    Broker(BrokerArgs),
    /// Measure latency and throughput, or run the attack suite.
    Bench(BenchArgs),
    /// Echo every frame back on each accepted channel.
    EchoServer(ServerArgs),
    /// Connect to an echo server and check the echo.
    EchoClient(ClientArgs),
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Broker(a) => broker::run(a).map(|()| ExitCode::SUCCESS),
        Command::Bench(a) => std::env::current_exe()
            .map_err(Into::into)
            .and_then(|exe| bench::run(a, &exe))
            .map(|o| match o {
                Outcome::Clean => ExitCode::SUCCESS,
                Outcome::AttackNotBlocked => {
                    eprintln!("error: at least one attack was not blocked");
                    ExitCode::FAILURE
                }
            }),
        Command::EchoServer(a) => echo::serve(a).map(|()| ExitCode::SUCCESS),
        Command::EchoClient(a) => echo::client(a).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
