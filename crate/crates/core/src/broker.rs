//! The trusted host: owns the region, acts as CA, runs the host side of
//! every handshake, and is the only writer of the control section.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use crate::gate::{Gate, GateError};
use crate::handshake::transcript::Hash;
use crate::handshake::wire::{Attest, Body, Message, Role};
use crate::handshake::{AbortReason, AuthorizationWitness, HostAuthority, HostEnv, HostSession, HostStep};
use crate::identity::{Identity, ServiceKey};
use crate::pki::{
    write_service, write_trust, CertificateAuthority, KeySizes, PkiError, ReplayCache, TrustStore, DEFAULT_FRESHNESS,
    REPLAY_CAPACITY,
};
use crate::region::{
    align_up, ChannelRequest, ChannelState, Region, RegionConfig, RegionError, RequestedState, CHANNEL_ALIGN, ENTRY_SIZE,
    HEADER_SIZE,
};
use crate::transport::notice::{now_ms, NoticeBoard};
use crate::transport::ring::init_ring;
use crate::transport::{channel_rings, host_channel_layout, Consumer, Producer, RingOptions, TransportError};

pub const TEMP_CHANNEL_SIZE: usize = 32 << 10;
pub const PHASE_TIMEOUT: Duration = Duration::from_secs(2);
const CERT_VALIDITY: Duration = Duration::from_secs(365 * 86_400);
const POLL_SLICE: Duration = Duration::from_millis(50);
const HEARTBEAT_EVERY: Duration = Duration::from_millis(100);
const REAP_EVERY: Duration = Duration::from_millis(250);
/// Control traffic is latency tolerant; the broker blocks on the doorbell
/// instead of polling so it never competes with data channels for a CPU.
fn control_ring() -> RingOptions {
    RingOptions::with_window(Duration::ZERO)
}

/// How long a channel lingers after the first Close before it is released.
const CLOSE_LINGER: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub service_id: u32,
    pub vm_id: u32,
    pub name: String,
}

impl RegistryEntry {
    pub fn new(service_id: u32, vm_id: u32, name: impl Into<String>) -> Self {
        Self { service_id, vm_id, name: name.into() }
    }

    pub fn key(&self) -> ServiceKey {
        ServiceKey::new(self.service_id, self.vm_id)
    }
}

/// Parses a registry file: one `service_id,vm_id,name` per line; blank
/// lines and `#` comments are ignored.
pub fn parse_registry(text: &str) -> Result<Vec<RegistryEntry>, BrokerError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| BrokerError::Config(format!("registry line {}: {what}: {line:?}", n + 1));
        let mut parts = line.splitn(3, ',').map(str::trim);
        let service_id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("service id"))?;
        let vm_id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("vm id"))?;
        let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("name"))?;
        out.push(RegistryEntry::new(service_id, vm_id, name));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub region: RegionConfig,
    pub region_path: PathBuf,
    pub credentials_dir: PathBuf,
    pub registry: Vec<RegistryEntry>,
    /// Concurrent sessions (handshakes plus open data channels) allowed.
    pub max_sessions: u32,
    pub temp_channel_size: usize,
    pub key_sizes: KeySizes,
    pub phase_timeout: Duration,
    pub freshness: Duration,
    pub session_log: Option<PathBuf>,
}

impl BrokerConfig {
    pub fn new(region_path: impl Into<PathBuf>, credentials_dir: impl Into<PathBuf>, registry: Vec<RegistryEntry>) -> Self {
        let region = RegionConfig::default();
        let max_sessions = (region.max_channels - 1) / 3;
        Self {
            region,
            region_path: region_path.into(),
            credentials_dir: credentials_dir.into(),
            registry,
            max_sessions,
            temp_channel_size: TEMP_CHANNEL_SIZE,
            key_sizes: KeySizes::default(),
            phase_timeout: PHASE_TIMEOUT,
            freshness: DEFAULT_FRESHNESS,
            session_log: None,
        }
    }

    /// Sizes the channel table for `n` concurrent sessions: each may hold a
    /// data channel and two temp channels at once.
    pub fn with_max_sessions(mut self, n: u32) -> Self {
        let slots = 3 * n + 1;
        self.max_sessions = n;
        self.region.max_channels = slots;
        let table = HEADER_SIZE + ENTRY_SIZE * slots as usize;
        self.region.control_size = align_up(table, CHANNEL_ALIGN).max(8192);
        self
    }

    /// Sets the data channel size and grows the region file so every
    /// session can hold its data channel and both temp channels at once.
    pub fn with_channel_size(mut self, bytes: usize) -> Self {
        self.region.default_channel_size = bytes;
        let per_session = align_up(bytes, CHANNEL_ALIGN) + 2 * align_up(self.temp_channel_size, CHANNEL_ALIGN);
        let need = self.region.control_size + self.region.host_channel_size + self.max_sessions as usize * per_session;
        self.region.total_size = self.region.total_size.max(need.next_power_of_two());
        self
    }
}

/// Bookkeeping for a data channel the broker granted.
#[derive(Debug, Clone)]
struct DataChannel {
    session_id: u64,
    client: Identity,
    server: Identity,
    transcript: Hash,
    attested: [bool; 2],
    established: bool,
    attest_deadline: Instant,
    closed_by: [bool; 2],
    close_deadline: Option<Instant>,
}

#[derive(Default)]
struct Live {
    sessions: HashSet<u64>,
    /// Sessions counted against the quota, with their data channel once
    /// allocated.
    in_progress: HashMap<u64, Option<u32>>,
    channels: HashMap<u32, DataChannel>,
    listeners: HashMap<u32, Identity>,
}

impl Live {
    fn load(&self) -> usize {
        let owned: HashSet<u32> = self.in_progress.values().flatten().copied().collect();
        self.in_progress.len() + self.channels.keys().filter(|c| !owned.contains(c)).count()
    }
}

struct Shared {
    config: BrokerConfig,
    region: Region,
    gate: Gate,
    authority: HostAuthority,
    notice: NoticeBoard,
    live: Mutex<Live>,
    shutdown: AtomicBool,
    abandon: AtomicBool,
    sessions: Mutex<Vec<JoinHandle<()>>>,
    log: Mutex<Vec<String>>,
}

/// A booted broker. Call [`Broker::serve`] on some thread, or use
/// [`Broker::spawn`].
#[derive(Clone)]
pub struct Broker {
    shared: Arc<Shared>,
}

impl Broker {
    /// Creates the region, the CA and every registered service's
    /// credentials, and publishes the trust files.
    pub fn boot(config: BrokerConfig) -> Result<Broker, BrokerError> {
        let region = Region::create(&config.region, &config.region_path)?;
        Self::start(config, region)
    }

    /// Takes over a region left behind by a dead broker. Live channels are
    /// closed and fresh credentials are issued.
    pub fn recover(config: BrokerConfig) -> Result<Broker, BrokerError> {
        let region = Region::recover(&config.region_path)?;
        Self::start(config, region)
    }

    fn start(config: BrokerConfig, region: Region) -> Result<Broker, BrokerError> {
        let mut seen = HashSet::new();
        for e in &config.registry {
            if e.service_id == 0 || e.service_id == u32::MAX {
                return Err(BrokerError::Config(format!("service id {} is reserved", e.service_id)));
            }
            if !seen.insert(e.key()) {
                return Err(PkiError::DuplicateIdentity(e.key()).into());
            }
        }
        if config.max_sessions == 0 || 3 * config.max_sessions + 1 > region.max_channels() {
            return Err(BrokerError::Config(format!(
                "{} sessions need {} channel slots, region has {}",
                config.max_sessions,
                3 * config.max_sessions + 1,
                region.max_channels()
            )));
        }
        let dir = &config.credentials_dir;
        let mut ca = CertificateAuthority::init(config.key_sizes, CERT_VALIDITY)?;
        let host = ca.issue(ServiceKey::HOST, CERT_VALIDITY)?;
        for e in &config.registry {
            write_service(dir, &ca.issue(e.key(), CERT_VALIDITY)?)?;
        }
        write_trust(dir, ca.certificate(), ca.allowed())?;
        let trust = TrustStore { ca: ca.certificate().clone(), allowed: ca.allowed().clone() };

        let host_meta = region.channel(0)?;
        let (ring, board_at) = host_channel_layout(host_meta.buffer_size as usize)
            .ok_or_else(|| BrokerError::Config("host channel too small".into()))?;
        let gate = Gate::new(region.clone(), config.registry.iter().map(|e| e.service_id));
        let host_view = Arc::new(gate.map_host(0)?);
        init_ring(&host_view, ring);
        let notice = NoticeBoard::new(host_view.clone(), board_at);
        notice.beat();
        let authority = HostAuthority::new(host, trust, ReplayCache::new(config.freshness, REPLAY_CAPACITY));
        info!(
            "broker up: region {} ({} bytes), {} services, {} sessions max",
            config.region_path.display(),
            region.total_size(),
            config.registry.len(),
            config.max_sessions
        );
        Ok(Broker {
            shared: Arc::new(Shared {
                config,
                region,
                gate,
                authority,
                notice,
                live: Mutex::new(Live::default()),
                shutdown: AtomicBool::new(false),
                abandon: AtomicBool::new(false),
                sessions: Mutex::new(Vec::new()),
                log: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn region(&self) -> &Region {
        &self.shared.region
    }

    pub fn gate(&self) -> &Gate {
        &self.shared.gate
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.shared.config
    }

    pub fn trust(&self) -> &TrustStore {
        self.shared.authority.trust()
    }

    /// Every host-side phase transition so far, one line each.
    pub fn session_log(&self) -> Vec<String> {
        self.shared.log.lock().unwrap().clone()
    }

    /// Sessions in progress plus open data channels.
    pub fn load(&self) -> usize {
        self.shared.live.lock().unwrap().load()
    }

    pub fn request_shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::Release);
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shared.shutdown.load(Ordering::Acquire)
    }

    /// Runs the broker on a background thread.
    pub fn spawn(self) -> RunningBroker {
        let b = self.clone();
        let thread = std::thread::Builder::new()
            .name("broker".into())
            .spawn(move || b.serve())
            .expect("spawn broker thread");
        RunningBroker { broker: self, thread: Some(thread) }
    }

    /// Serves the host channel until shutdown is requested, then shuts down.
    pub fn serve(&self) {
        let s = &self.shared;
        let (layout, _) = host_channel_layout(s.region.channel(0).map(|m| m.buffer_size as usize).unwrap_or(0))
            .expect("validated at boot");
        let view = Arc::new(s.gate.map_host(0).expect("host channel"));
        let mut inbox = Consumer::attach(view, layout, control_ring()).expect("host ring initialized at boot");
        let mut last_beat = Instant::now();
        let mut last_reap = Instant::now();
        while !self.is_shutting_down() {
            if last_beat.elapsed() >= HEARTBEAT_EVERY {
                s.notice.beat();
                last_beat = Instant::now();
            }
            match inbox.receive(Instant::now() + POLL_SLICE) {
                Ok(frame) => self.on_control(frame),
                Err(TransportError::Timeout) => {}
                Err(e) => {
                    warn!("host channel: {e}");
                    std::thread::sleep(POLL_SLICE);
                }
            }
            if last_reap.elapsed() >= REAP_EVERY {
                self.reap();
                last_reap = Instant::now();
            }
        }
        if !s.abandon.load(Ordering::Acquire) {
            self.shutdown();
        }
    }

    fn on_control(&self, frame: Vec<u8>) {
        let msg = match Message::decode(&frame) {
            Ok(m) => m,
            Err(e) => {
                debug!("dropping malformed host-channel frame: {e}");
                return;
            }
        };
        match msg.body {
            Body::ClientHello(_) => {
                let b = self.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("session-{:016x}", msg.session_id))
                    .spawn(move || b.run_session(frame))
                    .expect("spawn session thread");
                let mut sessions = self.shared.sessions.lock().unwrap();
                sessions.retain(|h| !h.is_finished());
                sessions.push(handle);
            }
            Body::Listen(id) => {
                if self.shared.authority.trust().allowed.contains(id.key()) && id.pid != 0 {
                    debug!("listener {id}");
                    self.shared.live.lock().unwrap().listeners.insert(id.service_id, id);
                }
            }
            Body::Unlisten(id) => {
                let mut live = self.shared.live.lock().unwrap();
                if live.listeners.get(&id.service_id) == Some(&id) {
                    live.listeners.remove(&id.service_id);
                }
            }
            Body::Attest(a) => self.on_attest(msg.session_id, a),
            Body::Close(a) => self.on_close(msg.session_id, a),
            other => debug!("unexpected {:?} on host channel", Message::new(msg.session_id, other).kind()),
        }
    }

    fn on_attest(&self, session_id: u64, a: Attest) {
        let mut live = self.shared.live.lock().unwrap();
        let Some(ch) = live.channels.get_mut(&a.channel_id) else {
            return;
        };
        if ch.session_id != session_id || ch.transcript != a.transcript_hash || ch.established {
            warn!("attestation for channel {} rejected", a.channel_id);
            return;
        }
        ch.attested[a.role as usize - 1] = true;
        self.try_establish(&mut live, a.channel_id);
    }

    /// Marks a fully attested channel ESTABLISHED once its session thread is
    /// done, so the endpoints start on a quiet broker.
    fn try_establish(&self, live: &mut Live, channel_id: u32) {
        let s = &self.shared;
        let Some(ch) = live.channels.get(&channel_id) else {
            return;
        };
        if ch.established || ch.attested != [true, true] || live.in_progress.contains_key(&ch.session_id) {
            return;
        }
        let ch = live.channels.get_mut(&channel_id).expect("present");
        match s.gate.mark_established(channel_id, &ch.transcript) {
            Ok(()) => {
                ch.established = true;
                info!("channel {channel_id} established ({} <-> {})", ch.client, ch.server);
            }
            Err(e) => warn!("channel {channel_id}: {e}"),
        }
        s.notice.bump();
    }

    fn on_close(&self, session_id: u64, a: Attest) {
        {
            let mut live = self.shared.live.lock().unwrap();
            let Some(ch) = live.channels.get_mut(&a.channel_id) else {
                return;
            };
            if ch.session_id != session_id || ch.transcript != a.transcript_hash {
                return;
            }
            ch.closed_by[a.role as usize - 1] = true;
            if ch.closed_by != [true, true] {
                ch.close_deadline.get_or_insert(Instant::now() + CLOSE_LINGER);
                return;
            }
        }
        self.close_rings(a.channel_id);
        BrokerEnv::new(&self.shared).release(a.channel_id);
    }

    /// Releases channels that were never attested, were closed, or whose
    /// endpoints died, and forgets dead listeners.
    fn reap(&self) {
        let now = Instant::now();
        let doomed: Vec<u32> = {
            let mut live = self.shared.live.lock().unwrap();
            live.listeners.retain(|_, id| process_alive(id.pid));
            let in_progress: HashSet<u32> = live.in_progress.values().flatten().copied().collect();
            live.channels
                .iter()
                .filter(|(id, _)| !in_progress.contains(id))
                .filter(|(_, ch)| {
                    (!ch.established && now >= ch.attest_deadline)
                        || ch.close_deadline.is_some_and(|d| now >= d)
                        || !process_alive(ch.client.pid)
                        || !process_alive(ch.server.pid)
                })
                .map(|(id, _)| *id)
                .collect()
        };
        for id in doomed {
            self.close_rings(id);
            BrokerEnv::new(&self.shared).release(id);
        }
    }

    fn close_rings(&self, channel_id: u32) {
        if let Ok(view) = self.shared.gate.map_host(channel_id) {
            let view = Arc::new(view);
            if let Some((fwd, rev)) = channel_rings(view.len()) {
                for layout in [fwd, rev] {
                    if let Ok(p) = Producer::attach(view.clone(), layout, RingOptions::default()) {
                        p.close();
                    }
                }
            }
        }
    }

    /// Closes every non-host channel, clears the policy and stops the
    /// heartbeat. The region file stays on disk.
    fn shutdown(&self) {
        let s = &self.shared;
        let sessions = std::mem::take(&mut *s.sessions.lock().unwrap());
        for h in sessions {
            let _ = h.join();
        }
        let live: Vec<u32> = s
            .region
            .channels()
            .map(|all| all.iter().filter(|m| m.channel_id != 0 && m.state.is_live()).map(|m| m.channel_id).collect())
            .unwrap_or_default();
        for id in live {
            self.close_rings(id);
            if let Err(e) = s.region.release_channel(id) {
                warn!("release {id} at shutdown: {e}");
            }
        }
        s.live.lock().unwrap().channels.clear();
        if let Err(e) = s.gate.teardown() {
            warn!("gate teardown: {e}");
        }
        s.notice.stop_heartbeat();
        let _ = s.region.mem().flush();
        info!("broker down");
    }

    fn record_log(&self, lines: &[String]) {
        let s = &self.shared;
        s.log.lock().unwrap().extend_from_slice(lines);
        if let Some(path) = &s.config.session_log {
            let result = OpenOptions::new().create(true).append(true).open(path).and_then(|mut f| {
                lines.iter().try_for_each(|l| writeln!(f, "{l}"))
            });
            if let Err(e) = result {
                warn!("session log {}: {e}", path.display());
            }
        }
    }

    /// Drives one host session from its ClientHello to a terminal phase.
    fn run_session(&self, hello: Vec<u8>) {
        let s = &self.shared;
        let env = BrokerEnv::new(s);
        let mut host = HostSession::new();
        let session_id = Message::decode(&hello).map(|m| m.session_id).unwrap_or(0);
        let outcome = self.drive(&mut host, &env, &hello);
        if let Err(reason) = outcome {
            host.abort(&s.authority, &env, reason);
        }
        self.record_log(host.transitions());
        if env.claimed.get() {
            let mut live = s.live.lock().unwrap();
            let data = live.in_progress.remove(&session_id).flatten();
            live.sessions.remove(&session_id);
            if let Some(id) = data {
                self.try_establish(&mut live, id);
            }
        }
        s.notice.bump();
    }

    fn drive(&self, host: &mut HostSession, env: &BrokerEnv<'_>, hello: &[u8]) -> Result<(), AbortReason> {
        let s = &self.shared;
        let auth = &s.authority;
        let timeout = s.config.phase_timeout;

        let mut client = match host.on_frame(auth, env, hello, now_ms()) {
            HostStep::ToClient { temp_channel_id, frame } => {
                let mut link = self.link(temp_channel_id)?;
                link.send(&frame, Instant::now() + timeout)?;
                link
            }
            HostStep::Aborted(r) => return Err(r),
            _ => return Err(AbortReason::Internal),
        };

        let frame = self.receive(&mut client, timeout)?;
        let mut server = match host.on_frame(auth, env, &frame, now_ms()) {
            HostStep::ToServer { temp_channel_id, frame } => {
                let mut link = self.link(temp_channel_id)?;
                link.send(&frame, Instant::now() + timeout)?;
                link
            }
            HostStep::Aborted(r) => return Err(r),
            _ => return Err(AbortReason::Internal),
        };

        let frame = self.receive(&mut server, timeout)?;
        let grants = match host.on_frame(auth, env, &frame, now_ms()) {
            HostStep::Grant(g) => g,
            HostStep::Aborted(r) => return Err(r),
            _ => return Err(AbortReason::Internal),
        };
        let deadline = Instant::now() + timeout;
        client.send(&grants.to_client, deadline)?;
        server.send(&grants.to_server, deadline)?;
        client.tx.drain(deadline).map_err(|_| AbortReason::Timeout)?;
        server.tx.drain(deadline).map_err(|_| AbortReason::Timeout)?;
        host.finish(auth, env);
        Ok(())
    }

    fn link(&self, channel_id: u32) -> Result<Link, AbortReason> {
        let view = Arc::new(self.shared.gate.map_host(channel_id).map_err(|_| AbortReason::Internal)?);
        let (fwd, rev) = channel_rings(view.len()).ok_or(AbortReason::Internal)?;
        let opts = control_ring();
        Ok(Link {
            tx: Producer::attach(view.clone(), rev, opts).map_err(|_| AbortReason::Internal)?,
            rx: Consumer::attach(view, fwd, opts).map_err(|_| AbortReason::Internal)?,
        })
    }

    fn receive(&self, link: &mut Link, timeout: Duration) -> Result<Vec<u8>, AbortReason> {
        let deadline = Instant::now() + timeout;
        loop {
            if self.is_shutting_down() {
                return Err(AbortReason::Shutdown);
            }
            let slice = (Instant::now() + POLL_SLICE).min(deadline);
            match link.rx.receive(slice) {
                Ok(f) => return Ok(f),
                Err(TransportError::Timeout) if Instant::now() < deadline => continue,
                Err(TransportError::Timeout) => return Err(AbortReason::Timeout),
                Err(_) => return Err(AbortReason::Internal),
            }
        }
    }
}

/// Host end of a temp channel: sends on the reverse ring, receives on the
/// forward ring.
struct Link {
    tx: Producer,
    rx: Consumer,
}

impl Link {
    fn send(&mut self, frame: &[u8], deadline: Instant) -> Result<(), AbortReason> {
        self.tx.send(frame, deadline).map_err(|e| match e {
            TransportError::Timeout => AbortReason::Timeout,
            _ => AbortReason::Internal,
        })
    }
}

/// [`HostEnv`] over the live region and gate, for one session.
struct BrokerEnv<'a> {
    s: &'a Shared,
    claimed: Cell<bool>,
}

impl<'a> BrokerEnv<'a> {
    fn new(s: &'a Shared) -> Self {
        Self { s, claimed: Cell::new(false) }
    }
}

impl HostEnv for BrokerEnv<'_> {
    fn claim_session(&self, session_id: u64) -> bool {
        let fresh = self.s.live.lock().unwrap().sessions.insert(session_id);
        self.claimed.set(fresh);
        fresh
    }

    fn listener(&self, service_id: u32) -> Option<Identity> {
        let live = self.s.live.lock().unwrap();
        live.listeners.get(&service_id).copied().filter(|id| process_alive(id.pid))
    }

    fn allocate_temp(&self, session_id: u64, endpoint: Identity, role: Role) -> Result<u32, AbortReason> {
        let s = self.s;
        if role == Role::Client {
            let mut live = s.live.lock().unwrap();
            if s.shutdown.load(Ordering::Acquire) {
                return Err(AbortReason::Shutdown);
            }
            if live.load() >= s.config.max_sessions as usize {
                return Err(AbortReason::RegionExhausted);
            }
            live.in_progress.insert(session_id, None);
        }
        let (server, client) = match role {
            Role::Client => (Identity::default(), endpoint),
            Role::Server => (endpoint, Identity::default()),
        };
        let request = ChannelRequest { state: RequestedState::Temp, server, client, session_id };
        let id = allocate(s, request, s.config.temp_channel_size)?;
        s.notice.bump();
        Ok(id)
    }

    fn allocate_data(
        &self,
        session_id: u64,
        client: Identity,
        server: Identity,
        witness: AuthorizationWitness,
    ) -> Result<(u32, u32), AbortReason> {
        let s = self.s;
        let request = ChannelRequest { state: RequestedState::Authorized(witness), server, client, session_id };
        let size = s.config.region.default_channel_size;
        let id = allocate(s, request, size)?;
        if let Some(slot) = s.live.lock().unwrap().in_progress.get_mut(&session_id) {
            *slot = Some(id);
        }
        let meta = s.region.channel(id).map_err(|_| AbortReason::Internal)?;
        Ok((id, meta.buffer_size))
    }

    fn authorize(&self, channel_id: u32, client: Identity, server: Identity, transcript: Hash) -> Result<(), AbortReason> {
        let s = self.s;
        s.gate
            .mark_authorized(channel_id, [client.pid, server.pid], [client.service_id, server.service_id], transcript)
            .map_err(|_| AbortReason::Internal)?;
        let session_id = s.region.channel(channel_id).map_err(|_| AbortReason::Internal)?.session_id;
        s.live.lock().unwrap().channels.insert(
            channel_id,
            DataChannel {
                session_id,
                client,
                server,
                transcript,
                attested: [false; 2],
                established: false,
                attest_deadline: Instant::now() + 2 * s.config.phase_timeout,
                closed_by: [false; 2],
                close_deadline: None,
            },
        );
        Ok(())
    }

    fn release(&self, channel_id: u32) {
        let s = self.s;
        s.gate.forget(channel_id);
        s.live.lock().unwrap().channels.remove(&channel_id);
        match s.region.channel(channel_id) {
            Ok(m) if m.state.is_live() => {
                if let Err(e) = s.region.release_channel(channel_id) {
                    warn!("release {channel_id}: {e}");
                }
            }
            _ => {}
        }
        s.notice.bump();
    }

    fn on_abort(&self, session_id: u64, reason: AbortReason) {
        let s = self.s;
        // A hello reusing the id of a session in progress must not be able
        // to post an abort that the real client would pick up.
        let owner_live = !self.claimed.get() && s.live.lock().unwrap().sessions.contains(&session_id);
        if session_id != 0 && !owner_live {
            s.notice.post(session_id, reason as u32);
        }
        info!("session {session_id:016x} aborted: {reason}");
    }
}

/// Allocates a channel and lays out its two rings.
fn allocate(s: &Shared, request: ChannelRequest, size: usize) -> Result<u32, AbortReason> {
    let id = s.region.allocate_channel(request, size).map_err(|e| match e {
        RegionError::RegionExhausted { .. } | RegionError::NoFreeSlot => AbortReason::RegionExhausted,
        other => {
            warn!("allocate: {other}");
            AbortReason::Internal
        }
    })?;
    let ready = s.gate.map_host(id).ok().and_then(|view| {
        let (fwd, rev) = channel_rings(view.len())?;
        init_ring(&view, fwd);
        init_ring(&view, rev);
        Some(())
    });
    if ready.is_none() {
        let _ = s.region.release_channel(id);
        return Err(AbortReason::Internal);
    }
    Ok(id)
}

/// Whether a process with this pid exists. Endpoints in the broker's own
/// process count as alive.
pub fn process_alive(pid: u64) -> bool {
    if pid == u64::from(std::process::id()) {
        return true;
    }
    let Ok(pid) = libc::pid_t::try_from(pid) else {
        return false;
    };
    if pid <= 0 {
        return false;
    }
    // SAFETY: signal 0 performs only the existence and permission check.
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || std::io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

/// A broker serving on a background thread; shuts down when dropped.
pub struct RunningBroker {
    broker: Broker,
    thread: Option<JoinHandle<()>>,
}

impl RunningBroker {
    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn region_path(&self) -> &Path {
        &self.broker.shared.config.region_path
    }

    pub fn credentials_dir(&self) -> &Path {
        &self.broker.shared.config.credentials_dir
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Stops serving without releasing anything, leaving the region as a
    /// crashed broker would. Used to exercise recovery.
    pub fn abandon(mut self) {
        self.broker.shared.abandon.store(true, Ordering::Release);
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(t) = self.thread.take() {
            self.broker.request_shutdown();
            let _ = t.join();
        }
    }
}

impl Drop for RunningBroker {
    fn drop(&mut self) {
        self.stop();
    }
}

impl std::ops::Deref for RunningBroker {
    type Target = Broker;
    fn deref(&self) -> &Broker {
        &self.broker
    }
}

/// Convenience for checking the TEMP invariant: live TEMP channels right now.
pub fn temp_channels(region: &Region) -> Result<Vec<u32>, RegionError> {
    Ok(region.channels()?.iter().filter(|m| m.state == ChannelState::Temp).map(|m| m.channel_id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lines() {
        let text = "# services\n1, 1, echo\n\n2,1,db # primary\n";
        let reg = parse_registry(text).unwrap();
        assert_eq!(reg, vec![RegistryEntry::new(1, 1, "echo"), RegistryEntry::new(2, 1, "db")]);
        assert!(parse_registry("1,x,bad").is_err());
        assert!(parse_registry("1,1").is_err());
        assert!(parse_registry("1,1,").is_err());
    }

    #[test]
    fn session_quota_sizes_the_table() {
        let cfg = BrokerConfig::new("r", "c", vec![]).with_max_sessions(500);
        assert_eq!(cfg.region.max_channels, 1501);
        assert_eq!(cfg.region.control_size, align_up(32 + 64 * 1501, 4096));
        cfg.region.validate().unwrap();
        let small = BrokerConfig::new("r", "c", vec![]).with_max_sessions(2);
        assert_eq!(small.region.control_size, 8192);
    }

    #[test]
    fn boot_refuses_bad_registries() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = |reg| {
            let mut c = BrokerConfig::new(dir.path().join("region"), dir.path().join("creds"), reg).with_max_sessions(2);
            c.key_sizes = KeySizes::FAST;
            c
        };
        let reserved = Broker::boot(cfg(vec![RegistryEntry::new(0, 1, "host")]));
        assert!(matches!(reserved, Err(BrokerError::Config(_))));
        let dup = Broker::boot(cfg(vec![RegistryEntry::new(1, 1, "a"), RegistryEntry::new(1, 1, "b")]));
        assert!(matches!(dup, Err(BrokerError::Pki(PkiError::DuplicateIdentity(_)))));
    }

    #[test]
    fn dead_pids_are_detected() {
        assert!(process_alive(u64::from(std::process::id())));
        let mut child = std::process::Command::new("true").spawn().unwrap();
        let pid = u64::from(child.id());
        child.wait().unwrap();
        assert!(!process_alive(pid));
        assert!(!process_alive(0));
        assert!(!process_alive(u64::MAX));
    }
}
