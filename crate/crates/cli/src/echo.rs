//! Demo endpoints: an echo server and a client that checks the echo.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{bail, Context};
use clap::Args;
use shmguard_core::api::{connect, listen, ApiError, EstablishedChannel};

use crate::EndpointArgs;

/// Printed on stdout once the server is registered with the broker.
pub const LISTENING: &str = "listening";

const IDLE: Duration = Duration::from_secs(3600);

#[derive(Args, Debug, Clone)]
pub struct ServerArgs {
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Exit after serving this many channels; 0 serves until SIGINT or
    /// SIGTERM.
    #[arg(long, default_value_t = 0)]
    pub count: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ClientArgs {
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Service id of the echo server.
    #[arg(long)]
    pub target: u32,
    #[arg(long, default_value = "ping")]
    pub message: String,
    /// Round trips to make on the channel.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Handshake timeout in milliseconds.
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
}

fn echo(mut ch: EstablishedChannel) {
    let mut buf = Vec::new();
    loop {
        match ch.receive_into(&mut buf, Instant::now() + IDLE) {
            Ok(_) => {
                if let Err(e) = ch.send(&buf, Instant::now() + IDLE) {
                    log::warn!("channel {}: {e}", ch.channel_id());
                    return;
                }
            }
            Err(ApiError::ChannelClosed) => return,
            Err(e) => {
                log::warn!("channel {}: {e}", ch.channel_id());
                return;
            }
        }
    }
}

pub fn serve(args: &ServerArgs) -> anyhow::Result<()> {
    let cfg = args.endpoint.config();
    let mut listener = listen(&cfg).with_context(|| format!("listening as service {}", cfg.service_id))?;
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    let mut out = std::io::stdout().lock();
    writeln!(out, "{LISTENING} {}", listener.endpoint().identity())?;
    out.flush()?;
    drop(out);
    let mut workers = Vec::new();
    while !stop.load(Ordering::Relaxed) && (args.count == 0 || workers.len() < args.count) {
        match listener.accept(Duration::from_millis(200)) {
            Ok(ch) => {
                log::info!("channel {} from {}", ch.channel_id(), ch.peer());
                workers.push(thread::spawn(move || echo(ch)));
            }
            Err(ApiError::Timeout) => {}
            Err(e) => return Err(e).context("accept"),
        }
    }
    if !stop.load(Ordering::Relaxed) {
        for w in workers {
            let _ = w.join();
        }
    }
    Ok(())
}

pub fn client(args: &ClientArgs) -> anyhow::Result<()> {
    let cfg = args.endpoint.config();
    let t0 = Instant::now();
    let mut ch = connect(&cfg, args.target, Duration::from_millis(args.timeout_ms))
        .with_context(|| format!("connecting to service {}", args.target))?;
    let handshake = t0.elapsed();
    let payload = args.message.as_bytes();
    let mut reply = Vec::new();
    let mut best = Duration::MAX;
    for i in 0..args.count {
        let t = Instant::now();
        ch.send(payload, Instant::now() + Duration::from_secs(10))?;
        ch.receive_into(&mut reply, Instant::now() + Duration::from_secs(10))?;
        best = best.min(t.elapsed());
        if reply != payload {
            bail!("echo {i} differs: sent {} bytes, got {}", payload.len(), reply.len());
        }
    }
    println!("{}", String::from_utf8_lossy(&reply));
    eprintln!(
        "channel {} with {}: handshake {:.2} ms, best round trip {:.1} us over {}",
        ch.channel_id(),
        ch.peer(),
        handshake.as_secs_f64() * 1e3,
        best.as_secs_f64() * 1e6,
        args.count
    );
    Ok(())
}
