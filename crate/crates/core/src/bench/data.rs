//! Round-trip, throughput, ablation and multi-channel measurements.

use std::fmt;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use super::{gib_per_s, open_pair, BenchError, End, Mode, Payloads, Scratch, SecureTarget, CHANNEL_SIZE};
use crate::transport::ring::DEFAULT_WINDOW;
use crate::transport::RingOptions;

const DEADLINE: Duration = Duration::from_secs(60);

fn deadline() -> Instant {
    Instant::now() + DEADLINE
}

fn join<T>(h: thread::JoinHandle<Result<T, BenchError>>) -> Result<T, BenchError> {
    h.join().map_err(|_| BenchError::Invalid("worker thread panicked".into()))?
}

/// Ping-pong round trips of `size`-byte payloads. Returns one sample per
/// iteration, in order; callers drop the warmup.
pub fn rtt(
    mode: Mode,
    target: Option<&SecureTarget>,
    size: usize,
    iterations: usize,
    seed: u64,
) -> Result<Vec<Duration>, BenchError> {
    let pair = open_pair(mode, target, 0, RingOptions::default())?;
    let End { tx: mut server_tx, rx: mut server_rx } = pair.server;
    let echo = thread::spawn(move || -> Result<(), BenchError> {
        let mut buf = Vec::with_capacity(size);
        for _ in 0..iterations {
            server_rx.receive_into(&mut buf, deadline())?;
            server_tx.send(&buf, deadline())?;
        }
        Ok(())
    });
    let End { tx: mut client_tx, rx: mut client_rx } = pair.client;
    let payloads = Payloads::new(seed, size);
    let mut samples = Vec::with_capacity(iterations);
    let mut reply = Vec::with_capacity(size);
    for i in 0..iterations as u64 {
        let p = payloads.get(i);
        let t0 = Instant::now();
        client_tx.send(p, deadline())?;
        client_rx.receive_into(&mut reply, deadline())?;
        samples.push(t0.elapsed());
        if reply != p {
            return Err(BenchError::Invalid(format!("echo {i} differs")));
        }
    }
    join(echo)?;
    Ok(samples)
}

/// Streams `total_bytes` of `size`-byte frames one way over `pair` and
/// returns GiB/s, measured from the first send to the last receive.
fn stream(client: End, server: End, size: usize, total_bytes: u64, seed: u64) -> Result<f64, BenchError> {
    let frames = total_bytes.div_ceil(size as u64).max(1);
    let payloads = Payloads::new(seed, size);
    let check = payloads.clone();
    let mut rx = server.rx;
    let start = Arc::new(Barrier::new(2));
    let go = start.clone();
    let consumer = thread::spawn(move || -> Result<Instant, BenchError> {
        let mut buf = Vec::with_capacity(size);
        go.wait();
        for i in 0..frames {
            let n = rx.receive_into(&mut buf, deadline())?;
            let want = check.get(i);
            if n != size || buf[..n.min(8)] != want[..n.min(8)] {
                return Err(BenchError::Invalid(format!("frame {i} corrupted")));
            }
        }
        Ok(Instant::now())
    });
    let mut tx = client.tx;
    start.wait();
    let t0 = Instant::now();
    for i in 0..frames {
        tx.send(payloads.get(i), deadline())?;
    }
    let end = join(consumer)?;
    drop(server.tx);
    Ok(gib_per_s(frames * size as u64, end - t0))
}

/// One-way throughput per message size: `(size, GiB/s)`.
pub fn throughput(
    mode: Mode,
    target: Option<&SecureTarget>,
    sizes: &[usize],
    total_bytes: u64,
    seed: u64,
) -> Result<Vec<(usize, f64)>, BenchError> {
    sizes
        .iter()
        .map(|&size| {
            let pair = open_pair(mode, target, 0, RingOptions::default())?;
            Ok((size, stream(pair.client, pair.server, size, total_bytes, seed)?))
        })
        .collect()
}

/// Transport designs compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    /// One frame in flight, a doorbell per frame, blocking wait each time.
    Naive,
    /// Ring buffer with notification suppression, no polling window.
    Ring,
    /// Ring buffer plus the anticipation window.
    RingWindow,
}

impl Design {
    pub const ALL: [Design; 3] = [Design::Naive, Design::Ring, Design::RingWindow];

    pub fn options(self) -> RingOptions {
        match self {
            Design::Naive => RingOptions::naive(),
            Design::Ring => RingOptions::with_window(Duration::ZERO),
            Design::RingWindow => RingOptions::with_window(DEFAULT_WINDOW),
        }
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Design::Naive => "naive",
            Design::Ring => "ring",
            Design::RingWindow => "ring+window",
        })
    }
}

impl std::str::FromStr for Design {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        Design::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| BenchError::Invalid(format!("unknown design {s:?}")))
    }
}

/// Throughput of each design at each size over a pre-wired channel:
/// `(design, size, GiB/s)`.
pub fn ablation(designs: &[Design], sizes: &[usize], total_bytes: u64, seed: u64) -> Result<Vec<(Design, usize, f64)>, BenchError> {
    let mut rows = Vec::new();
    for &size in sizes {
        for &design in designs {
            let pair = Scratch::new(CHANNEL_SIZE)?.pair(design.options())?;
            rows.push((design, size, stream(pair.client, pair.server, size, total_bytes, seed)?));
        }
    }
    Ok(rows)
}

/// Aggregate and per-channel throughput with `n` concurrent pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingRow {
    pub pairs: usize,
    pub per_channel: f64,
    pub aggregate: f64,
}

/// Runs 1..=`max_pairs` concurrent producer/consumer pairs, each on its own
/// channel, streaming `bytes_per_pair` of `size`-byte frames.
pub fn multichannel(
    mode: Mode,
    target: Option<&SecureTarget>,
    max_pairs: usize,
    size: usize,
    bytes_per_pair: u64,
    seed: u64,
) -> Result<Vec<ScalingRow>, BenchError> {
    let mut rows = Vec::new();
    for n in 1..=max_pairs {
        let pairs = (0..n)
            .map(|i| open_pair(mode, target, i, RingOptions::default()))
            .collect::<Result<Vec<_>, _>>()?;
        let start = Arc::new(Barrier::new(2 * n + 1));
        let mut workers = Vec::new();
        for (i, pair) in pairs.into_iter().enumerate() {
            let frames = bytes_per_pair.div_ceil(size as u64).max(1);
            let payloads = Payloads::new(seed.wrapping_add(i as u64), size);
            let mut tx = pair.client.tx;
            let mut rx = pair.server.rx;
            let (go_tx, go_rx) = (start.clone(), start.clone());
            let producer = thread::spawn(move || -> Result<(), BenchError> {
                go_tx.wait();
                for f in 0..frames {
                    tx.send(payloads.get(f), deadline())?;
                }
                Ok(())
            });
            let consumer = thread::spawn(move || -> Result<(u64, Instant), BenchError> {
                let mut buf = Vec::with_capacity(size);
                go_rx.wait();
                for _ in 0..frames {
                    rx.receive_into(&mut buf, deadline())?;
                }
                Ok((frames * size as u64, Instant::now()))
            });
            workers.push((producer, consumer, pair.client.rx, pair.server.tx));
        }
        start.wait();
        let t0 = Instant::now();
        let mut total = 0u64;
        let mut last = t0;
        let mut per = Vec::new();
        for (producer, consumer, _crx, _stx) in workers {
            join(producer)?;
            let (bytes, end) = join(consumer)?;
            total += bytes;
            last = last.max(end);
            per.push(gib_per_s(bytes, end - t0));
        }
        rows.push(ScalingRow {
            pairs: n,
            per_channel: per.iter().sum::<f64>() / n as f64,
            aggregate: gib_per_s(total, last - t0),
        });
    }
    Ok(rows)
}

/// Doorbell activity for one burst.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BurstReport {
    pub frames: u64,
    pub doorbell_signals: u64,
}

/// Sends `frames` back-to-back frames while a consumer is actively
/// receiving, and counts how many of them rang the doorbell.
pub fn doorbell_burst(opts: RingOptions, frames: u64, size: usize) -> Result<BurstReport, BenchError> {
    let pair = Scratch::new(CHANNEL_SIZE)?.pair(opts)?;
    let mut rx = pair.server.rx;
    let ready = Arc::new(Barrier::new(2));
    let go = ready.clone();
    let consumer = thread::spawn(move || -> Result<(), BenchError> {
        let mut buf = Vec::new();
        go.wait();
        for _ in 0..frames {
            rx.receive_into(&mut buf, deadline())?;
        }
        Ok(())
    });
    let mut tx = pair.client.tx;
    let payload = vec![0xa5u8; size];
    ready.wait();
    let before = tx.counters().doorbell_signals;
    for _ in 0..frames {
        tx.send(&payload, deadline())?;
    }
    join(consumer)?;
    Ok(BurstReport { frames, doorbell_signals: tx.counters().doorbell_signals - before })
}
