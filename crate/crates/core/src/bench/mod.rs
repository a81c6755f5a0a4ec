//! Measurement harness: handshake cost, round trips, throughput sweeps,
//! ring-design ablation, multi-channel scaling and the attack matrix.
//!
//! Secure runs go through a live broker and the endpoint API. Vanilla runs
//! use the same ring code over a scratch region with enforcement off and no
//! handshake, so the difference between the two is the cost of the gate.

pub mod attacks;
pub mod data;
pub mod handshake;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::api::{connect, listen, ApiError, ChannelReceiver, ChannelSender, EndpointConfig};
use crate::gate::{Gate, GateError};
use crate::identity::Identity;
use crate::region::{ChannelRequest, Region, RegionConfig, RegionError, RequestedState};
use crate::transport::ring::init_ring;
use crate::transport::{channel_rings, Consumer, Producer, RingCounters, RingOptions, TransportError};

pub use attacks::{attack_suite, AttackReport, AttackRow};
pub use data::{ablation, doorbell_burst, multichannel, rtt, throughput, BurstReport, Design, ScalingRow};
pub use handshake::{bench_handshake, HandshakeStats};

pub const DEFAULT_SEED: u64 = 0x5eed;
pub const DEFAULT_SIZES: [usize; 10] = [64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384, 32768];
pub const DEFAULT_TOTAL: u64 = 256 << 20;
pub const CHANNEL_SIZE: usize = 512 << 10;
const TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Vanilla,
    Secure,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::Secure => "secure",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "secure" => Ok(Mode::Secure),
            other => Err(BenchError::Invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// Latency summary in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub p50: f64,
    pub p95: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn from_samples(samples: &[Duration]) -> Stats {
        let mut us: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e6).collect();
        us.sort_by(f64::total_cmp);
        let n = us.len();
        if n == 0 {
            return Stats { n, p50: 0.0, p95: 0.0, mean: 0.0, min: 0.0, max: 0.0 };
        }
        Stats {
            n,
            p50: percentile(&us, 50.0),
            p95: percentile(&us, 95.0),
            mean: us.iter().sum::<f64>() / n as f64,
            min: us[0],
            max: us[n - 1],
        }
    }

    /// Summary after dropping the first 10% of samples as warmup.
    pub fn after_warmup(samples: &[Duration]) -> Stats {
        Stats::from_samples(&samples[warmup(samples.len())..])
    }
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={} p50={:.1}us p95={:.1}us mean={:.1}us", self.n, self.p50, self.p95, self.mean)
    }
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn warmup(n: usize) -> usize {
    n / 10
}

pub fn gib_per_s(bytes: u64, elapsed: Duration) -> f64 {
    bytes as f64 / elapsed.as_secs_f64() / (1u64 << 30) as f64
}

/// A fixed pool of seeded random payloads; the stream is `pool[i % len]`.
#[derive(Debug, Clone)]
pub struct Payloads {
    pool: Vec<Vec<u8>>,
}

impl Payloads {
    pub const POOL: usize = 64;

    pub fn new(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size as u64);
        let pool = (0..Self::POOL)
            .map(|_| {
                let mut p = vec![0u8; size];
                rng.fill_bytes(&mut p);
                p
            })
            .collect();
        Self { pool }
    }

    pub fn get(&self, i: u64) -> &[u8] {
        &self.pool[(i % self.pool.len() as u64) as usize]
    }
}

/// Sending half of a duplex link.
pub trait FrameTx: Send {
    fn send(&mut self, payload: &[u8], deadline: Instant) -> Result<(), BenchError>;
    fn max_frame(&self) -> usize;
    fn counters(&self) -> RingCounters;
}

/// Receiving half of a duplex link.
pub trait FrameRx: Send {
    fn receive_into(&mut self, out: &mut Vec<u8>, deadline: Instant) -> Result<usize, BenchError>;
}

impl FrameTx for Producer {
    fn send(&mut self, payload: &[u8], deadline: Instant) -> Result<(), BenchError> {
        Ok(Producer::send(self, payload, deadline)?)
    }
    fn max_frame(&self) -> usize {
        Producer::max_frame(self)
    }
    fn counters(&self) -> RingCounters {
        Producer::counters(self)
    }
}

impl FrameRx for Consumer {
    fn receive_into(&mut self, out: &mut Vec<u8>, deadline: Instant) -> Result<usize, BenchError> {
        out.clear();
        Ok(Consumer::receive_into(self, out, deadline)?)
    }
}

impl FrameTx for ChannelSender {
    fn send(&mut self, payload: &[u8], deadline: Instant) -> Result<(), BenchError> {
        Ok(ChannelSender::send(self, payload, deadline)?)
    }
    fn max_frame(&self) -> usize {
        ChannelSender::max_frame(self)
    }
    fn counters(&self) -> RingCounters {
        ChannelSender::counters(self)
    }
}

impl FrameRx for ChannelReceiver {
    fn receive_into(&mut self, out: &mut Vec<u8>, deadline: Instant) -> Result<usize, BenchError> {
        out.clear();
        Ok(ChannelReceiver::receive_into(self, out, deadline)?)
    }
}

/// One end of a duplex link.
pub struct End {
    pub tx: Box<dyn FrameTx>,
    pub rx: Box<dyn FrameRx>,
}

/// A connected pair plus whatever keeps it alive.
pub struct Pair {
    pub client: End,
    pub server: End,
    _keep: Option<Scratch>,
}

/// Where secure runs find the broker and credentials.
#[derive(Debug, Clone)]
pub struct SecureTarget {
    pub region_path: PathBuf,
    pub credentials_dir: PathBuf,
    pub vm_id: u32,
    /// Registered service ids; pair `i` uses `services[2i]` as client and
    /// `services[2i + 1]` as server.
    pub services: Vec<u32>,
}

impl SecureTarget {
    pub fn endpoint(&self, service_id: u32) -> EndpointConfig {
        EndpointConfig::new(&self.region_path, &self.credentials_dir, self.vm_id, service_id)
    }

    pub fn pair_services(&self, i: usize) -> Result<(u32, u32), BenchError> {
        match (self.services.get(2 * i), self.services.get(2 * i + 1)) {
            (Some(&c), Some(&s)) => Ok((c, s)),
            _ => Err(BenchError::Invalid(format!("pair {i} needs {} registered services", 2 * i + 2))),
        }
    }

    /// Runs a handshake for pair `i` and returns both ends.
    pub fn open_pair(&self, i: usize, window: Duration) -> Result<Pair, BenchError> {
        let (c, s) = self.pair_services(i)?;
        let mut listener = listen(&self.endpoint(s).with_window(window))?;
        let server = std::thread::spawn(move || listener.accept(TIMEOUT));
        let client = connect(&self.endpoint(c).with_window(window), s, TIMEOUT);
        let server = server.join().map_err(|_| BenchError::Invalid("accept thread panicked".into()))?;
        let (ctx, crx) = client?.split();
        let (stx, srx) = server?.split();
        Ok(Pair {
            client: End { tx: Box::new(ctx), rx: Box::new(crx) },
            server: End { tx: Box::new(stx), rx: Box::new(srx) },
            _keep: None,
        })
    }
}

/// A private region with one pre-wired channel: no broker, no policy, no
/// handshake. Views are unenforced.
pub struct Scratch {
    _dir: tempfile::TempDir,
    region: Region,
    channel_id: u32,
}

impl Scratch {
    pub fn new(channel_size: usize) -> Result<Scratch, BenchError> {
        let dir = tempfile::tempdir()?;
        let config = RegionConfig {
            total_size: (8192 + 256 * 1024 + channel_size.next_multiple_of(4096)).next_power_of_two(),
            control_size: 8192,
            max_channels: 4,
            host_channel_size: 256 * 1024,
            default_channel_size: channel_size,
        };
        let region = Region::create(&config, dir.path().join("scratch"))?;
        let endpoint = Identity::current(1, 1);
        let request = ChannelRequest { state: RequestedState::Temp, server: endpoint, client: endpoint, session_id: 1 };
        let channel_id = region.allocate_channel(request, channel_size)?;
        let scratch = Scratch { _dir: dir, region, channel_id };
        let view = scratch.view()?;
        let (fwd, rev) = scratch.rings(&view)?;
        init_ring(&view, fwd);
        init_ring(&view, rev);
        Ok(scratch)
    }

    fn view(&self) -> Result<Arc<crate::gate::MappedBuffer>, BenchError> {
        let gate = Gate::new(self.region.clone(), []);
        Ok(Arc::new(gate.map_unenforced(self.channel_id)?))
    }

    fn rings(
        &self,
        view: &crate::gate::MappedBuffer,
    ) -> Result<(crate::transport::RingLayout, crate::transport::RingLayout), BenchError> {
        channel_rings(view.len()).ok_or_else(|| BenchError::Invalid("scratch channel too small".into()))
    }

    /// Both ends of the pre-wired channel.
    pub fn pair(self, opts: RingOptions) -> Result<Pair, BenchError> {
        let view = self.view()?;
        let (fwd, rev) = self.rings(&view)?;
        let client = End {
            tx: Box::new(Producer::attach(view.clone(), fwd, opts)?),
            rx: Box::new(Consumer::attach(view.clone(), rev, opts)?),
        };
        let server = End {
            tx: Box::new(Producer::attach(view.clone(), rev, opts)?),
            rx: Box::new(Consumer::attach(view, fwd, opts)?),
        };
        Ok(Pair { client, server, _keep: Some(self) })
    }
}

/// Opens pair `i` in the given mode.
pub fn open_pair(mode: Mode, target: Option<&SecureTarget>, i: usize, opts: RingOptions) -> Result<Pair, BenchError> {
    match mode {
        Mode::Vanilla => Scratch::new(CHANNEL_SIZE)?.pair(opts),
        Mode::Secure => target
            .ok_or_else(|| BenchError::Invalid("secure mode needs a broker".into()))?
            .open_pair(i, opts.window),
    }
}

/// Writes `rows` under `header` to `path`, or to stdout when `path` is
/// `None`.
pub fn write_csv(path: Option<&Path>, header: &[&str], rows: &[Vec<String>]) -> Result<(), BenchError> {
    let sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}
