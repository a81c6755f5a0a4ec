//! In-memory handshake driver: all three roles in one thread, with a hook
//! that sees (and may rewrite) every frame in flight.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::transcript::Hash;
use super::wire::{AbortReason, ChannelGrant, Message, Role};
use super::{AuthorizationWitness, ClientPhase, ClientSession, HostAuthority, HostEnv, HostPhase, HostSession, HostStep};
use super::{ServerPhase, ServerSession, Step};
use crate::identity::{Identity, ServiceKey};
use crate::pki::{CertificateAuthority, KeySizes, PkiError, ReplayCache, ServiceCredentials, TrustStore};
use crate::transport::notice::now_ms;

const VALIDITY: Duration = Duration::from_secs(86_400);
pub const DATA_CHANNEL_SIZE: u32 = 512 << 10;

/// Where a frame is on its way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hop {
    ClientHello,
    HostHello,
    ClientAuth,
    ServerRequest,
    ServerHello,
    GrantToClient,
    GrantToServer,
}

impl Hop {
    pub const ALL: [Hop; 7] = [
        Hop::ClientHello,
        Hop::HostHello,
        Hop::ClientAuth,
        Hop::ServerRequest,
        Hop::ServerHello,
        Hop::GrantToClient,
        Hop::GrantToServer,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataRecord {
    pub session_id: u64,
    pub client: Identity,
    pub server: Identity,
    pub buffer_size: u32,
    pub transcript: Option<Hash>,
}

/// [`HostEnv`] backed by plain maps.
#[derive(Debug, Default)]
pub struct MemoryEnv {
    inner: Mutex<EnvState>,
}

#[derive(Debug, Default)]
struct EnvState {
    next_channel: u32,
    sessions: HashSet<u64>,
    listeners: HashMap<u32, Identity>,
    temps: BTreeMap<u32, (u64, Role)>,
    data: BTreeMap<u32, DataRecord>,
    aborts: Vec<(u64, AbortReason)>,
    quota: Option<usize>,
}

impl MemoryEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_quota(channels: usize) -> Self {
        let env = Self::default();
        env.inner.lock().unwrap().quota = Some(channels);
        env
    }

    pub fn add_listener(&self, id: Identity) {
        self.inner.lock().unwrap().listeners.insert(id.service_id, id);
    }

    pub fn live_temps(&self) -> usize {
        self.inner.lock().unwrap().temps.len()
    }

    pub fn data_channels(&self) -> BTreeMap<u32, DataRecord> {
        self.inner.lock().unwrap().data.clone()
    }

    pub fn aborts(&self) -> Vec<(u64, AbortReason)> {
        self.inner.lock().unwrap().aborts.clone()
    }

    /// The check an endpoint makes against the control table before
    /// attesting: the grant must name a channel the host authorized with
    /// this exact transcript and these exact endpoints.
    pub fn grant_matches(&self, session_id: u64, grant: &ChannelGrant) -> bool {
        self.inner.lock().unwrap().data.get(&grant.channel_id).is_some_and(|d| {
            d.session_id == session_id
                && d.client == grant.client
                && d.server == grant.server
                && d.buffer_size == grant.buffer_size
                && d.transcript == Some(grant.transcript_hash)
        })
    }

    fn allocate(&self) -> Result<u32, AbortReason> {
        let mut st = self.inner.lock().unwrap();
        if st.quota.is_some_and(|q| st.temps.len() + st.data.len() >= q) {
            return Err(AbortReason::RegionExhausted);
        }
        st.next_channel += 1;
        Ok(st.next_channel)
    }
}

impl HostEnv for MemoryEnv {
    fn claim_session(&self, session_id: u64) -> bool {
        self.inner.lock().unwrap().sessions.insert(session_id)
    }

    fn listener(&self, service_id: u32) -> Option<Identity> {
        self.inner.lock().unwrap().listeners.get(&service_id).copied()
    }

    fn allocate_temp(&self, session_id: u64, _endpoint: Identity, role: Role) -> Result<u32, AbortReason> {
        let id = self.allocate()?;
        self.inner.lock().unwrap().temps.insert(id, (session_id, role));
        Ok(id)
    }

    fn allocate_data(
        &self,
        session_id: u64,
        client: Identity,
        server: Identity,
        _witness: AuthorizationWitness,
    ) -> Result<(u32, u32), AbortReason> {
        let id = self.allocate()?;
        let record = DataRecord { session_id, client, server, buffer_size: DATA_CHANNEL_SIZE, transcript: None };
        self.inner.lock().unwrap().data.insert(id, record);
        Ok((id, DATA_CHANNEL_SIZE))
    }

    fn authorize(&self, channel_id: u32, _client: Identity, _server: Identity, transcript: Hash) -> Result<(), AbortReason> {
        let mut st = self.inner.lock().unwrap();
        let record = st.data.get_mut(&channel_id).ok_or(AbortReason::Internal)?;
        record.transcript = Some(transcript);
        Ok(())
    }

    fn release(&self, channel_id: u32) {
        let mut st = self.inner.lock().unwrap();
        st.temps.remove(&channel_id);
        st.data.remove(&channel_id);
    }

    fn on_abort(&self, session_id: u64, reason: AbortReason) {
        self.inner.lock().unwrap().aborts.push((session_id, reason));
    }
}

/// A CA with a host, a client (service 1) and a server (service 2), all on
/// vm 1.
pub struct Fixture {
    pub ca: CertificateAuthority,
    pub trust: Arc<TrustStore>,
    pub authority: HostAuthority,
    pub client: Identity,
    pub server: Identity,
    pub client_creds: Arc<ServiceCredentials>,
    pub server_creds: Arc<ServiceCredentials>,
}

impl Fixture {
    pub fn new(sizes: KeySizes) -> Result<Self, PkiError> {
        let mut ca = CertificateAuthority::init(sizes, VALIDITY)?;
        let host = ca.issue(ServiceKey::HOST, VALIDITY)?;
        let client = Identity::new(1, 1, 4001);
        let server = Identity::new(2, 1, 4002);
        let client_creds = Arc::new(ca.issue(client.key(), VALIDITY)?);
        let server_creds = Arc::new(ca.issue(server.key(), VALIDITY)?);
        let trust = Arc::new(TrustStore { ca: ca.certificate().clone(), allowed: ca.allowed().clone() });
        let authority = HostAuthority::new(host, (*trust).clone(), ReplayCache::default());
        Ok(Self { ca, trust, authority, client, server, client_creds, server_creds })
    }

    pub fn env(&self) -> MemoryEnv {
        let env = MemoryEnv::new();
        env.add_listener(self.server);
        env
    }
}

/// How one simulated session ended.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub session_id: u64,
    pub client: ClientPhase,
    pub server: ServerPhase,
    pub host: HostPhase,
    pub client_grant: Option<ChannelGrant>,
    pub server_grant: Option<ChannelGrant>,
    /// Every frame as delivered, after the hook ran.
    pub frames: Vec<(Hop, Vec<u8>)>,
}

impl Outcome {
    /// Both endpoints accepted grants that match what the host authorized,
    /// so the channel could go on to ESTABLISHED.
    pub fn granted(&self, env: &MemoryEnv) -> bool {
        self.host == HostPhase::Granted
            && self.client == ClientPhase::Granted
            && self.server == ServerPhase::Granted
            && self.client_grant.is_some_and(|g| env.grant_matches(self.session_id, &g))
            && self.server_grant.is_some_and(|g| env.grant_matches(self.session_id, &g))
            && self.client_grant.map(|g| g.transcript_hash) == self.server_grant.map(|g| g.transcript_hash)
    }

    pub fn abort_reason(&self) -> Option<AbortReason> {
        match (self.host, self.client, self.server) {
            (HostPhase::Aborted(r), _, _) | (_, ClientPhase::Aborted(r), _) | (_, _, ServerPhase::Aborted(r)) => Some(r),
            _ => None,
        }
    }
}

/// Runs one session. `hook` may rewrite any frame before delivery; the
/// server accepts iff `accept`.
pub fn run(fix: &Fixture, env: &MemoryEnv, accept: bool, mut hook: impl FnMut(Hop, &mut Vec<u8>)) -> Outcome {
    let auth = &fix.authority;
    let (mut client, hello) = ClientSession::start(fix.client, fix.server.service_id, fix.client_creds.clone(), fix.trust.clone());
    let mut server = ServerSession::new(fix.server, fix.server_creds.clone(), fix.trust.clone());
    let mut host = HostSession::new();
    let mut frames = Vec::new();
    let mut deliver = |hop: Hop, mut frame: Vec<u8>| {
        hook(hop, &mut frame);
        frames.push((hop, frame.clone()));
        frame
    };

    'run: {
        let frame = deliver(Hop::ClientHello, hello);
        let HostStep::ToClient { frame, .. } = host.on_frame(auth, env, &frame, now_ms()) else { break 'run };
        let frame = deliver(Hop::HostHello, frame);
        let Step::Send(frame) = client.on_frame(&frame) else {
            client_gave_up(&mut host, &client, auth, env);
            break 'run;
        };
        let frame = deliver(Hop::ClientAuth, frame);
        let HostStep::ToServer { frame, .. } = host.on_frame(auth, env, &frame, now_ms()) else { break 'run };
        let frame = deliver(Hop::ServerRequest, frame);
        let step = server.on_frame(&frame, |_| accept);
        let Step::Send(frame) = step else {
            if let ServerPhase::Aborted(r) = server.phase() {
                host.on_frame(auth, env, &server.abort_frame(r), now_ms());
            }
            break 'run;
        };
        let frame = deliver(Hop::ServerHello, frame);
        let HostStep::Grant(grants) = host.on_frame(auth, env, &frame, now_ms()) else { break 'run };
        let to_client = deliver(Hop::GrantToClient, grants.to_client);
        let to_server = deliver(Hop::GrantToServer, grants.to_server);
        let client_ok = matches!(client.on_frame(&to_client), Step::Granted(_));
        let server_ok = matches!(server.on_frame(&to_server, |_| accept), Step::Granted(_));
        if client_ok && server_ok {
            host.finish(auth, env);
        } else {
            host.abort(auth, env, AbortReason::TranscriptMismatch);
        }
    }
    if !host.phase().is_terminal() {
        host.abort(auth, env, AbortReason::Timeout);
    }
    Outcome {
        session_id: client.session_id(),
        client: client.phase(),
        server: server.phase(),
        host: host.phase(),
        client_grant: client.grant().copied(),
        server_grant: server.grant().copied(),
        frames,
    }
}

fn client_gave_up(host: &mut HostSession, client: &ClientSession, auth: &HostAuthority, env: &MemoryEnv) {
    if let ClientPhase::Aborted(r) = client.phase() {
        host.on_frame(auth, env, &client.abort_frame(r), now_ms());
    }
}

/// Replaces the session id and body of a frame, for tests that inject
/// hand-built messages.
pub fn reframe(frame: &[u8], f: impl FnOnce(&mut Message)) -> Vec<u8> {
    let mut msg = Message::decode(frame).expect("well-formed frame");
    f(&mut msg);
    msg.encode()
}
