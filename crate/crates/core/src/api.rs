//! Socket-style endpoint API: `connect`, `listen`/`accept`, `send`,
//! `receive`.
//!
//! The client sends on a data channel's forward ring and receives on its
//! reverse ring; the server does the opposite.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::debug;
use thiserror::Error;

use crate::gate::{Denied, Gate, GateError};
use crate::handshake::transcript::Hash;
use crate::handshake::wire::{Attest, Body};
use crate::handshake::{AbortReason, ChannelGrant, ClientSession, Message, Role, ServerPhase, ServerSession, Step};
use crate::identity::{Identity, ServiceKey};
use crate::pki::{load_service, load_trust, PkiError, ServiceCredentials, TrustStore};
use crate::region::{ChannelMeta, ChannelState, Region, RegionError, REGION_ENV};
use crate::transport::notice::NoticeBoard;
use crate::transport::ring::DEFAULT_WINDOW;
use crate::transport::{channel_rings, host_channel_layout, Consumer, Producer, RingCounters, RingOptions, TransportError};

/// A broker heartbeat older than this means nobody is serving the region.
pub const HEARTBEAT_STALE: Duration = Duration::from_secs(2);
const POLL_SLICE: Duration = Duration::from_millis(50);

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("handshake aborted: {0}")]
    HandshakeAborted(AbortReason),
    #[error("timed out")]
    Timeout,
    #[error("broker unreachable: {0}")]
    BrokerUnreachable(String),
    #[error("permission denied: {0}")]
    PermissionDenied(Denied),
    #[error("channel closed")]
    ChannelClosed,
    #[error("frame of {len} bytes exceeds {max}")]
    FrameTooLarge { len: usize, max: usize },
    #[error("credentials: {0}")]
    Credentials(#[from] PkiError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("transport: {0}")]
    Transport(TransportError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<TransportError> for ApiError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout => ApiError::Timeout,
            TransportError::ChannelClosed => ApiError::ChannelClosed,
            TransportError::PermissionDenied(d) => ApiError::PermissionDenied(d),
            TransportError::FrameTooLarge { len, max } => ApiError::FrameTooLarge { len, max },
            other => ApiError::Transport(other),
        }
    }
}

impl From<GateError> for ApiError {
    fn from(e: GateError) -> Self {
        match e {
            GateError::PermissionDenied(d) => ApiError::PermissionDenied(d),
            GateError::Region(r) => ApiError::Region(r),
            other => ApiError::Protocol(other.to_string()),
        }
    }
}

impl From<Denied> for ApiError {
    fn from(d: Denied) -> Self {
        ApiError::PermissionDenied(d)
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub region_path: PathBuf,
    pub credentials_dir: PathBuf,
    pub vm_id: u32,
    pub service_id: u32,
    /// Process id to claim; the real one unless overridden.
    pub pid: Option<u64>,
    pub window: Duration,
    pub phase_timeout: Duration,
}

impl EndpointConfig {
    pub fn new(region_path: impl Into<PathBuf>, credentials_dir: impl Into<PathBuf>, vm_id: u32, service_id: u32) -> Self {
        Self {
            region_path: region_path.into(),
            credentials_dir: credentials_dir.into(),
            vm_id,
            service_id,
            pid: None,
            window: DEFAULT_WINDOW,
            phase_timeout: Duration::from_secs(2),
        }
    }

    /// Takes the region path from `SHMGUARD_REGION`.
    pub fn from_env(credentials_dir: impl Into<PathBuf>, vm_id: u32, service_id: u32) -> Result<Self, ApiError> {
        let path = std::env::var_os(REGION_ENV)
            .ok_or_else(|| ApiError::BrokerUnreachable(format!("{REGION_ENV} is not set")))?;
        Ok(Self::new(PathBuf::from(path), credentials_dir, vm_id, service_id))
    }

    pub fn with_pid(mut self, pid: u64) -> Self {
        self.pid = Some(pid);
        self
    }

    pub fn with_window(mut self, window: Duration) -> Self {
        self.window = window;
        self
    }

    pub fn identity(&self) -> Identity {
        match self.pid {
            Some(pid) => Identity::new(self.service_id, self.vm_id, pid),
            None => Identity::current(self.service_id, self.vm_id),
        }
    }
}

/// An attached service instance: credentials, trust, the region and the
/// host channel.
pub struct Endpoint {
    identity: Identity,
    creds: Arc<ServiceCredentials>,
    trust: Arc<TrustStore>,
    region: Region,
    gate: Gate,
    control: Mutex<Producer>,
    notice: NoticeBoard,
    window: Duration,
    phase_timeout: Duration,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("identity", &self.identity).finish()
    }
}

impl Endpoint {
    pub fn open(cfg: &EndpointConfig) -> Result<Arc<Endpoint>, ApiError> {
        let key = ServiceKey::new(cfg.service_id, cfg.vm_id);
        let creds = load_service(&cfg.credentials_dir, key)?;
        let trust = load_trust(&cfg.credentials_dir)?;
        let region = match Region::open(&cfg.region_path) {
            Ok(r) => r,
            Err(RegionError::Io(e)) => {
                return Err(ApiError::BrokerUnreachable(format!("{}: {e}", cfg.region_path.display())))
            }
            Err(e) => return Err(e.into()),
        };
        if !region.policy_active() {
            return Err(ApiError::BrokerUnreachable("no policy installed".into()));
        }
        let identity = cfg.identity();
        let registered: Vec<u32> = trust.allowed.keys().map(|k| k.service_id).collect();
        let gate = Gate::new(region.clone(), registered);
        let host = Arc::new(gate.map(0, identity)?);
        let (ring, board_at) =
            host_channel_layout(host.len()).ok_or_else(|| ApiError::Protocol("host channel too small".into()))?;
        let control = Producer::attach_shared(host.clone(), ring, RingOptions::with_window(cfg.window))?;
        let notice = NoticeBoard::new(host, board_at);
        match notice.heartbeat_age()? {
            Some(age) if age <= HEARTBEAT_STALE.as_millis() as u64 => {}
            Some(age) => return Err(ApiError::BrokerUnreachable(format!("heartbeat {age} ms old"))),
            None => return Err(ApiError::BrokerUnreachable("broker has shut down".into())),
        }
        Ok(Arc::new(Endpoint {
            identity,
            creds: Arc::new(creds),
            trust: Arc::new(trust),
            region,
            gate,
            control: Mutex::new(control),
            notice,
            window: cfg.window,
            phase_timeout: cfg.phase_timeout,
        }))
    }

    pub fn identity(&self) -> Identity {
        self.identity
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn trust(&self) -> &TrustStore {
        &self.trust
    }

    pub fn credentials(&self) -> &ServiceCredentials {
        &self.creds
    }

    /// Posts a raw frame on the host channel.
    pub fn post(&self, frame: &[u8], deadline: Instant) -> Result<(), ApiError> {
        self.control.lock().unwrap().send(frame, deadline).map_err(ApiError::from)
    }

    fn ensure_broker(&self) -> Result<(), ApiError> {
        match self.notice.heartbeat_age()? {
            Some(age) if age <= HEARTBEAT_STALE.as_millis() as u64 => Ok(()),
            _ => Err(ApiError::BrokerUnreachable("heartbeat stopped".into())),
        }
    }

    /// Sleeps until the broker reports a change or `slice` passes.
    fn wait_event(&self, seen: u32, deadline: Instant) -> Result<(), ApiError> {
        let left = deadline.saturating_duration_since(Instant::now()).min(POLL_SLICE);
        self.notice.wait_event(seen, left)?;
        Ok(())
    }

    fn notice_for(&self, session_id: u64) -> Result<Option<AbortReason>, ApiError> {
        Ok(self.notice.find(session_id)?.map(|c| AbortReason::from_u8(c as u8).unwrap_or(AbortReason::Internal)))
    }

    /// Finds the TEMP channel the broker opened for this session and
    /// endpoint, or the abort it posted instead.
    fn await_temp(&self, session_id: u64, endpoint: Identity, role: Role, deadline: Instant) -> Result<u32, ApiError> {
        loop {
            let seen = self.notice.event_seq()?;
            let found = self.region.channels()?.into_iter().find(|m| {
                m.state == ChannelState::Temp && m.session_id == session_id && endpoint_of(m, endpoint, role)
            });
            if let Some(m) = found {
                return Ok(m.channel_id);
            }
            if let Some(r) = self.notice_for(session_id)? {
                return Err(ApiError::HandshakeAborted(r));
            }
            if Instant::now() >= deadline {
                return Err(ApiError::Timeout);
            }
            self.ensure_broker()?;
            self.wait_event(seen, deadline)?;
        }
    }

    /// Runs the client handshake up to the grant.
    pub fn connect_pending(self: &Arc<Self>, target_service_id: u32, timeout: Duration) -> Result<PendingChannel, ApiError> {
        let (session, hello) = ClientSession::start(self.identity, target_service_id, self.creds.clone(), self.trust.clone());
        self.drive_client(session, &hello, Instant::now() + timeout)
    }

    /// Waits for the broker's answer to a hello posted for `session_id` on
    /// behalf of `client`: the temp channel it opened, or its abort reason.
    pub fn await_hello_answer(&self, session_id: u64, client: Identity, deadline: Instant) -> Result<u32, ApiError> {
        self.await_temp(session_id, client, Role::Client, deadline)
    }

    /// Posts `hello` and drives `session` to the grant. The session may
    /// carry any identity and credentials.
    pub fn drive_client(
        self: &Arc<Self>,
        mut session: ClientSession,
        hello: &[u8],
        deadline: Instant,
    ) -> Result<PendingChannel, ApiError> {
        let session_id = session.session_id();
        self.ensure_broker()?;
        self.post(hello, deadline)?;
        let temp = self.await_temp(session_id, session.identity(), Role::Client, deadline)?;
        let mut link = TempLink::open(self, temp)?;
        loop {
            let frame = link.receive(self, session_id, deadline)?;
            match session.on_frame(&frame) {
                Step::Send(reply) => link.send(&reply, deadline)?,
                Step::Granted(grant) => {
                    return Ok(PendingChannel {
                        endpoint: self.clone(),
                        role: Role::Client,
                        session_id,
                        grant,
                        transcript: session.transcript_hash().expect("set on grant"),
                        transitions: session.transitions().to_vec(),
                    })
                }
                Step::Aborted(reason) => {
                    if !is_abort(&frame) {
                        link.tell(&session.abort_frame(reason));
                    }
                    return Err(ApiError::HandshakeAborted(reason));
                }
            }
        }
    }

    pub fn connect(self: &Arc<Self>, target_service_id: u32, timeout: Duration) -> Result<EstablishedChannel, ApiError> {
        let deadline = Instant::now() + timeout;
        self.connect_pending(target_service_id, timeout)?.establish(deadline)
    }
}

fn endpoint_of(m: &ChannelMeta, id: Identity, role: Role) -> bool {
    match role {
        Role::Client => m.client == id,
        Role::Server => m.server == id,
    }
}

fn is_abort(frame: &[u8]) -> bool {
    matches!(Message::decode(frame), Ok(Message { body: Body::Abort(_), .. }))
}

/// Guest end of a temp channel: sends on the forward ring, receives on the
/// reverse ring.
struct TempLink {
    tx: Producer,
    rx: Consumer,
}

impl TempLink {
    fn open(ep: &Endpoint, channel_id: u32) -> Result<Self, ApiError> {
        let view = Arc::new(ep.gate.map(channel_id, ep.identity)?);
        let (fwd, rev) = channel_rings(view.len()).ok_or_else(|| ApiError::Protocol("temp channel too small".into()))?;
        let opts = RingOptions::with_window(ep.window);
        Ok(Self { tx: Producer::attach(view.clone(), fwd, opts)?, rx: Consumer::attach(view, rev, opts)? })
    }

    fn send(&mut self, frame: &[u8], deadline: Instant) -> Result<(), ApiError> {
        Ok(self.tx.send(frame, deadline)?)
    }

    /// Next frame from the broker. If the channel went away, the broker's
    /// posted reason is reported instead.
    fn receive(&mut self, ep: &Endpoint, session_id: u64, deadline: Instant) -> Result<Vec<u8>, ApiError> {
        loop {
            let slice = (Instant::now() + POLL_SLICE).min(deadline);
            match self.rx.receive(slice) {
                Ok(frame) => return Ok(frame),
                Err(TransportError::Timeout) if Instant::now() < deadline => {
                    if let Some(r) = ep.notice_for(session_id)? {
                        return Err(ApiError::HandshakeAborted(r));
                    }
                    ep.ensure_broker()?;
                }
                Err(e) => {
                    if let Some(r) = ep.notice_for(session_id)? {
                        return Err(ApiError::HandshakeAborted(r));
                    }
                    return Err(e.into());
                }
            }
        }
    }

    fn tell(&mut self, frame: &[u8]) {
        let _ = self.tx.send(frame, Instant::now() + Duration::from_millis(100));
    }
}

/// A granted channel that is not yet ESTABLISHED. Its buffer cannot be
/// touched until both endpoints have attested.
pub struct PendingChannel {
    endpoint: Arc<Endpoint>,
    role: Role,
    session_id: u64,
    grant: ChannelGrant,
    transcript: Hash,
    transitions: Vec<String>,
}

impl PendingChannel {
    pub fn grant(&self) -> &ChannelGrant {
        &self.grant
    }

    pub fn channel_id(&self) -> u32 {
        self.grant.channel_id
    }

    pub fn transcript_hash(&self) -> Hash {
        self.transcript
    }

    pub fn transitions(&self) -> &[String] {
        &self.transitions
    }

    /// Maps the buffer and attaches a producer without attesting. The gate
    /// refuses ring access until the channel is ESTABLISHED.
    pub fn open_raw(&self) -> Result<Producer, ApiError> {
        let ep = &self.endpoint;
        let view = Arc::new(ep.gate.map(self.grant.channel_id, ep.identity)?);
        let (fwd, rev) = channel_rings(view.len()).ok_or_else(|| ApiError::Protocol("channel too small".into()))?;
        let ring = if self.role == Role::Client { fwd } else { rev };
        Ok(Producer::attach(view, ring, RingOptions::default())?)
    }

    /// Attests the transcript to the broker and waits for ESTABLISHED.
    pub fn establish(self, deadline: Instant) -> Result<EstablishedChannel, ApiError> {
        let ep = &self.endpoint;
        let id = self.grant.channel_id;
        let meta = ep.region.channel(id)?;
        let expected = (meta.session_id == self.session_id
            && meta.client == self.grant.client
            && meta.server == self.grant.server
            && meta.buffer_size == self.grant.buffer_size)
            .then_some(())
            .ok_or_else(|| ApiError::Protocol(format!("control entry for channel {id} does not match the grant")));
        expected?;
        let attest = Attest { role: self.role, channel_id: id, transcript_hash: self.transcript };
        ep.post(&Message::new(self.session_id, Body::Attest(attest)).encode(), deadline)?;
        loop {
            let seen = ep.notice.event_seq()?;
            let meta = ep.region.channel(id)?;
            if meta.session_id != self.session_id || !meta.state.is_live() {
                return Err(ApiError::ChannelClosed);
            }
            if meta.state == ChannelState::Established {
                break;
            }
            if Instant::now() >= deadline {
                return Err(ApiError::Timeout);
            }
            ep.ensure_broker()?;
            ep.wait_event(seen, deadline)?;
        }
        let view = Arc::new(ep.gate.map(id, ep.identity)?);
        let (fwd, rev) = channel_rings(view.len()).ok_or_else(|| ApiError::Protocol("channel too small".into()))?;
        let (tx, rx) = match self.role {
            Role::Client => (fwd, rev),
            Role::Server => (rev, fwd),
        };
        let opts = RingOptions::with_window(ep.window);
        let peer = match self.role {
            Role::Client => self.grant.server,
            Role::Server => self.grant.client,
        };
        let link = Arc::new(Link { endpoint: self.endpoint.clone(), session_id: self.session_id, attest });
        debug!("{} established channel {id} with {peer}", ep.identity);
        Ok(EstablishedChannel {
            tx: ChannelSender { tx: Producer::attach(view.clone(), tx, opts)?, link: link.clone() },
            rx: ChannelReceiver { rx: Consumer::attach(view, rx, opts)?, link },
            peer,
            transitions: self.transitions,
        })
    }
}

/// Shared by both halves of a channel; tells the broker the channel is
/// done once both are dropped.
struct Link {
    endpoint: Arc<Endpoint>,
    session_id: u64,
    attest: Attest,
}

impl Drop for Link {
    fn drop(&mut self) {
        let frame = Message::new(self.session_id, Body::Close(self.attest)).encode();
        let _ = self.endpoint.post(&frame, Instant::now() + Duration::from_millis(100));
    }
}

pub struct ChannelSender {
    tx: Producer,
    link: Arc<Link>,
}

impl ChannelSender {
    pub fn channel_id(&self) -> u32 {
        self.link.attest.channel_id
    }

    pub fn max_frame(&self) -> usize {
        self.tx.max_frame()
    }

    pub fn send(&mut self, payload: &[u8], deadline: Instant) -> Result<(), ApiError> {
        Ok(self.tx.send(payload, deadline)?)
    }

    pub fn counters(&self) -> RingCounters {
        self.tx.counters()
    }
}

impl Drop for ChannelSender {
    fn drop(&mut self) {
        self.tx.close();
    }
}

pub struct ChannelReceiver {
    rx: Consumer,
    link: Arc<Link>,
}

impl ChannelReceiver {
    pub fn channel_id(&self) -> u32 {
        self.link.attest.channel_id
    }

    pub fn receive(&mut self, deadline: Instant) -> Result<Vec<u8>, ApiError> {
        let mut out = Vec::new();
        self.receive_into(&mut out, deadline)?;
        Ok(out)
    }

    /// Receives into `out`, replacing its contents. Returns the length.
    pub fn receive_into(&mut self, out: &mut Vec<u8>, deadline: Instant) -> Result<usize, ApiError> {
        out.clear();
        match self.rx.receive_into(out, deadline) {
            Ok(n) => Ok(n),
            Err(TransportError::PermissionDenied(d)) => Err(self.gone().unwrap_or(ApiError::PermissionDenied(d))),
            Err(e) => Err(e.into()),
        }
    }

    /// A receive that fails because the broker released the channel reports
    /// it as closed.
    fn gone(&self) -> Option<ApiError> {
        let meta = self.link.endpoint.region.channel(self.channel_id()).ok()?;
        (!meta.state.is_live() || meta.session_id != self.link.session_id).then_some(ApiError::ChannelClosed)
    }
}

/// An ESTABLISHED channel. The send and receive halves own different rings
/// and can be split across threads.
pub struct EstablishedChannel {
    tx: ChannelSender,
    rx: ChannelReceiver,
    peer: Identity,
    transitions: Vec<String>,
}

impl std::fmt::Debug for EstablishedChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EstablishedChannel")
            .field("channel_id", &self.channel_id())
            .field("peer", &self.peer)
            .finish()
    }
}

impl EstablishedChannel {
    pub fn channel_id(&self) -> u32 {
        self.tx.channel_id()
    }

    pub fn session_id(&self) -> u64 {
        self.rx.link.session_id
    }

    pub fn peer(&self) -> Identity {
        self.peer
    }

    pub fn transcript_hash(&self) -> Hash {
        self.tx.link.attest.transcript_hash
    }

    /// This endpoint's handshake phase changes.
    pub fn transitions(&self) -> &[String] {
        &self.transitions
    }

    pub fn max_frame(&self) -> usize {
        self.tx.max_frame()
    }

    pub fn send(&mut self, payload: &[u8], deadline: Instant) -> Result<(), ApiError> {
        self.tx.send(payload, deadline)
    }

    pub fn receive(&mut self, deadline: Instant) -> Result<Vec<u8>, ApiError> {
        self.rx.receive(deadline)
    }

    pub fn receive_into(&mut self, out: &mut Vec<u8>, deadline: Instant) -> Result<usize, ApiError> {
        self.rx.receive_into(out, deadline)
    }

    pub fn split(self) -> (ChannelSender, ChannelReceiver) {
        (self.tx, self.rx)
    }

    /// Closes the sending ring and tells the broker to release the channel.
    pub fn close(self) {}
}

/// Accepts connections for one service.
pub struct Listener {
    endpoint: Arc<Endpoint>,
    seen: HashSet<u64>,
}

impl Listener {
    pub fn new(endpoint: Arc<Endpoint>) -> Result<Listener, ApiError> {
        let frame = Message::new(0, Body::Listen(endpoint.identity)).encode();
        endpoint.post(&frame, Instant::now() + endpoint.phase_timeout)?;
        Ok(Listener { endpoint, seen: HashSet::new() })
    }

    pub fn endpoint(&self) -> &Arc<Endpoint> {
        &self.endpoint
    }

    pub fn accept(&mut self, timeout: Duration) -> Result<EstablishedChannel, ApiError> {
        self.accept_with(|_| true, timeout)
    }

    /// Waits for a handshake addressed to this service, asking `policy`
    /// whether to take each client. Rejected and failed handshakes are
    /// skipped.
    pub fn accept_with(&mut self, mut policy: impl FnMut(&Identity) -> bool, timeout: Duration) -> Result<EstablishedChannel, ApiError> {
        let deadline = Instant::now() + timeout;
        loop {
            let pending = self.accept_pending(&mut policy, deadline)?;
            let id = pending.channel_id();
            match pending.establish(deadline) {
                Ok(ch) => return Ok(ch),
                Err(ApiError::Timeout) => return Err(ApiError::Timeout),
                Err(e) => debug!("channel {id} failed to establish: {e}"),
            }
        }
    }

    /// Runs the server handshake up to the grant.
    pub fn accept_pending(
        &mut self,
        policy: &mut impl FnMut(&Identity) -> bool,
        deadline: Instant,
    ) -> Result<PendingChannel, ApiError> {
        let ep = self.endpoint.clone();
        loop {
            let seen = ep.notice.event_seq()?;
            let temps: Vec<ChannelMeta> = ep
                .region
                .channels()?
                .into_iter()
                .filter(|m| m.state == ChannelState::Temp && endpoint_of(m, ep.identity, Role::Server))
                .collect();
            self.seen.retain(|s| temps.iter().any(|m| m.session_id == *s));
            for meta in temps {
                if !self.seen.insert(meta.session_id) {
                    continue;
                }
                match self.respond(&ep, &meta, policy, deadline) {
                    Ok(Some(p)) => return Ok(p),
                    Ok(None) => {}
                    Err(e) => debug!("handshake {:016x} failed: {e}", meta.session_id),
                }
            }
            if Instant::now() >= deadline {
                return Err(ApiError::Timeout);
            }
            ep.ensure_broker()?;
            ep.wait_event(seen, deadline)?;
        }
    }

    fn respond(
        &self,
        ep: &Arc<Endpoint>,
        meta: &ChannelMeta,
        policy: &mut impl FnMut(&Identity) -> bool,
        deadline: Instant,
    ) -> Result<Option<PendingChannel>, ApiError> {
        let phase_deadline = deadline.min(Instant::now() + ep.phase_timeout);
        let mut link = TempLink::open(ep, meta.channel_id)?;
        let mut session = ServerSession::new(ep.identity, ep.creds.clone(), ep.trust.clone());
        loop {
            let frame = link.receive(ep, meta.session_id, phase_deadline)?;
            match session.on_frame(&frame, &mut *policy) {
                Step::Send(reply) => {
                    link.send(&reply, phase_deadline)?;
                    if session.phase() == ServerPhase::Aborted(AbortReason::Rejected) {
                        return Ok(None);
                    }
                }
                Step::Granted(grant) => {
                    return Ok(Some(PendingChannel {
                        endpoint: ep.clone(),
                        role: Role::Server,
                        session_id: session.session_id(),
                        grant,
                        transcript: session.transcript_hash().expect("set on grant"),
                        transitions: session.transitions().to_vec(),
                    }))
                }
                Step::Aborted(reason) => {
                    if !is_abort(&frame) {
                        link.tell(&session.abort_frame(reason));
                    }
                    return Err(ApiError::HandshakeAborted(reason));
                }
            }
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        let frame = Message::new(0, Body::Unlisten(self.endpoint.identity)).encode();
        let _ = self.endpoint.post(&frame, Instant::now() + Duration::from_millis(100));
    }
}

/// Opens an endpoint and registers it as the listener for its service.
pub fn listen(cfg: &EndpointConfig) -> Result<Listener, ApiError> {
    Listener::new(Endpoint::open(cfg)?)
}

/// Opens an endpoint and connects to `target_service_id`.
pub fn connect(cfg: &EndpointConfig, target_service_id: u32, timeout: Duration) -> Result<EstablishedChannel, ApiError> {
    Endpoint::open(cfg)?.connect(target_service_id, timeout)
}
