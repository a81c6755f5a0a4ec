//! `shmguard broker`: boots (or recovers) the broker and serves until
//! SIGINT or SIGTERM.

use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Args;
use shmguard_core::bench::CHANNEL_SIZE;
use shmguard_core::broker::{parse_registry, Broker, BrokerConfig};
use shmguard_core::pki::KeySizes;
use shmguard_core::region::REGION_ENV;

use crate::default_credentials;

/// Printed on stdout once the broker accepts connections.
pub const READY: &str = "ready";

#[derive(Args, Debug, Clone)]
pub struct BrokerArgs {
    /// Region file to create (or take over with --recover).
    #[arg(long, env = REGION_ENV)]
    pub region: PathBuf,
    /// Service registry: one `service_id,vm_id,name` per line.
    #[arg(long)]
    pub registry: PathBuf,
    /// Where to publish the CA certificate, allowed list and service keys
    /// [default: <region>.creds]
    #[arg(long)]
    pub credentials: Option<PathBuf>,
    /// Concurrent channels. Each session also holds two temp channels while
    /// its handshake runs, so the table gets 3N + 1 slots.
    #[arg(long, default_value_t = 8)]
    pub max_channels: u32,
    /// Data channel size in bytes, split between the two rings.
    #[arg(long, default_value_t = CHANNEL_SIZE)]
    pub channel_size: usize,
    /// Take over a region left by a dead broker instead of creating one.
    #[arg(long)]
    pub recover: bool,
    /// 1024-bit keys. For tests only.
    #[arg(long)]
    pub fast_keys: bool,
    /// Append every session's phase transitions to this file.
    #[arg(long)]
    pub session_log: Option<PathBuf>,
}

pub fn run(args: &BrokerArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&args.registry)
        .with_context(|| format!("reading registry {}", args.registry.display()))?;
    let registry = parse_registry(&text)?;
    let creds = args.credentials.clone().unwrap_or_else(|| default_credentials(&args.region));
    let mut cfg = BrokerConfig::new(&args.region, creds, registry)
        .with_max_sessions(args.max_channels)
        .with_channel_size(args.channel_size);
    if args.fast_keys {
        cfg.key_sizes = KeySizes::FAST;
    }
    cfg.session_log = args.session_log.clone();
    let broker = if args.recover { Broker::recover(cfg) } else { Broker::boot(cfg) }
        .with_context(|| format!("starting broker on {}", args.region.display()))?;

    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    let running = broker.spawn();
    let mut out = std::io::stdout().lock();
    writeln!(out, "{READY} {}", args.region.display())?;
    out.flush()?;
    drop(out);
    while !stop.load(Ordering::Relaxed) && !running.is_shutting_down() {
        std::thread::sleep(Duration::from_millis(50));
    }
    log::info!("shutting down");
    running.shutdown();
    Ok(())
}
