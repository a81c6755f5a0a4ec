//! Trusted-host side of the handshake.
//!
//! The session object validates and produces messages; channel allocation,
//! listener lookup and policy updates go through [`HostEnv`], which the
//! broker implements over the real region and gate.

use std::collections::HashSet;
use std::sync::Mutex;

use super::transcript::{client_auth_context, combine, host_hello_context, server_auth_context, Hash, Leg};
use super::wire::{
    AbortReason, Body, ChannelGrant, HostHello, Message, Role, ServerRequest, CIPHER_RSA_PSS_SHA256, PROTOCOL_VERSION,
};
use super::{check_peer_certificate, AuthorizationWitness, Transitions};
use crate::identity::{Identity, HOST_SERVICE_ID};
use crate::pki::{
    challenge_message, verify_challenge, Nonce, Rejected, ReplayCache, ServiceCredentials, TrustStore,
};
use rsa::RsaPublicKey;

/// Side effects the host state machine needs from its surroundings.
pub trait HostEnv {
    /// Reserves a session id; false if it is already in use.
    fn claim_session(&self, session_id: u64) -> bool;
    /// The server currently listening for `service_id`.
    fn listener(&self, service_id: u32) -> Option<Identity>;
    fn allocate_temp(&self, session_id: u64, endpoint: Identity, role: Role) -> Result<u32, AbortReason>;
    /// Allocates the data channel in AUTHORIZED state. Returns its id and
    /// buffer size.
    fn allocate_data(
        &self,
        session_id: u64,
        client: Identity,
        server: Identity,
        witness: AuthorizationWitness,
    ) -> Result<(u32, u32), AbortReason>;
    /// Records the pending attestation for a freshly allocated channel.
    fn authorize(&self, channel_id: u32, client: Identity, server: Identity, transcript: Hash) -> Result<(), AbortReason>;
    fn release(&self, channel_id: u32);
    /// Called once when the session aborts, before its channels are
    /// released.
    fn on_abort(&self, _session_id: u64, _reason: AbortReason) {}
}

/// Trust material and replay state shared by every host session.
pub struct HostAuthority {
    creds: ServiceCredentials,
    trust: TrustStore,
    replay: Mutex<ReplayCache>,
    in_flight: Mutex<HashSet<[u8; 16]>>,
}

impl HostAuthority {
    pub fn new(creds: ServiceCredentials, trust: TrustStore, replay: ReplayCache) -> Self {
        Self { creds, trust, replay: Mutex::new(replay), in_flight: Mutex::new(HashSet::new()) }
    }

    pub fn trust(&self) -> &TrustStore {
        &self.trust
    }

    /// Freshness and replay screening of a hello's nonce, counting nonces of
    /// sessions still in progress as used.
    fn screen(&self, nonce: &Nonce, now_ms: u64) -> Result<(), AbortReason> {
        self.replay.lock().unwrap().screen(nonce, now_ms).map_err(rejected)?;
        if !self.in_flight.lock().unwrap().insert(nonce.value) {
            return Err(AbortReason::Replay);
        }
        Ok(())
    }

    fn done_with(&self, nonce: &Nonce) {
        self.in_flight.lock().unwrap().remove(&nonce.value);
    }

    fn verify(&self, key: &RsaPublicKey, nonce: &Nonce, context: &[u8], sig: &[u8], now_ms: u64) -> Result<(), AbortReason> {
        let mut cache = self.replay.lock().unwrap();
        verify_challenge(key, nonce, context, sig, now_ms, &mut cache).map_err(rejected)
    }
}

fn rejected(r: Rejected) -> AbortReason {
    match r {
        Rejected::BadSignature => AbortReason::BadChallenge,
        Rejected::Stale => AbortReason::Stale,
        Rejected::Replay => AbortReason::Replay,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HostPhase {
    AwaitHello,
    HelloSent,
    RequestSent,
    Granting,
    Granted,
    Aborted(AbortReason),
}

impl HostPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Granted | Self::Aborted(_))
    }
}

/// Grants for both endpoints of a newly authorized channel.
#[derive(Debug, Clone)]
pub struct Grants {
    pub channel_id: u32,
    pub transcript_hash: Hash,
    pub to_client: Vec<u8>,
    pub to_server: Vec<u8>,
}

/// What a host session wants done after consuming a frame.
#[derive(Debug, Clone)]
pub enum HostStep {
    /// Send on the client's temp channel (allocated if new).
    ToClient { temp_channel_id: u32, frame: Vec<u8> },
    /// Send on the server's temp channel.
    ToServer { temp_channel_id: u32, frame: Vec<u8> },
    Grant(Grants),
    Aborted(AbortReason),
}

pub struct HostSession {
    session_id: u64,
    phase: HostPhase,
    client: Option<Identity>,
    client_nonce: Option<Nonce>,
    server: Option<Identity>,
    server_nonce: Option<Nonce>,
    client_leg: Leg,
    server_leg: Leg,
    client_temp: Option<u32>,
    server_temp: Option<u32>,
    data_channel: Option<u32>,
    transcript: Option<Hash>,
    log: Transitions,
}

impl Default for HostSession {
    fn default() -> Self {
        Self::new()
    }
}

impl HostSession {
    pub fn new() -> Self {
        Self {
            session_id: 0,
            phase: HostPhase::AwaitHello,
            client: None,
            client_nonce: None,
            server: None,
            server_nonce: None,
            client_leg: Leg::default(),
            server_leg: Leg::default(),
            client_temp: None,
            server_temp: None,
            data_channel: None,
            transcript: None,
            log: Transitions::new("host", 0),
        }
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn phase(&self) -> HostPhase {
        self.phase
    }

    pub fn client(&self) -> Option<Identity> {
        self.client
    }

    pub fn server(&self) -> Option<Identity> {
        self.server
    }

    pub fn client_temp(&self) -> Option<u32> {
        self.client_temp
    }

    pub fn server_temp(&self) -> Option<u32> {
        self.server_temp
    }

    pub fn data_channel(&self) -> Option<u32> {
        self.data_channel
    }

    pub fn transcript_hash(&self) -> Option<Hash> {
        self.transcript
    }

    pub fn transitions(&self) -> &[String] {
        self.log.lines()
    }

    fn enter(&mut self, next: HostPhase) {
        self.log.record(&format!("{:?}", self.phase), &format!("{next:?}"));
        self.phase = next;
    }

    /// Dispatches any frame by phase and type. Pairs without a defined
    /// transition abort the session.
    pub fn on_frame(&mut self, auth: &HostAuthority, env: &dyn HostEnv, frame: &[u8], now_ms: u64) -> HostStep {
        if self.phase.is_terminal() {
            return HostStep::Aborted(AbortReason::UnexpectedMessage);
        }
        let kind = match Message::decode(frame) {
            Ok(m) if self.phase != HostPhase::AwaitHello && m.session_id != self.session_id => {
                return HostStep::Aborted(self.abort(auth, env, AbortReason::UnexpectedMessage));
            }
            Ok(m) => m.body,
            Err(_) => return HostStep::Aborted(self.abort(auth, env, AbortReason::Malformed)),
        };
        let result = match (self.phase, kind) {
            (_, Body::Abort(reason)) => Err(reason),
            (HostPhase::AwaitHello, Body::ClientHello(_)) => self
                .on_client_hello(auth, env, frame, now_ms)
                .map(|(temp_channel_id, frame)| HostStep::ToClient { temp_channel_id, frame }),
            (HostPhase::HelloSent, Body::ClientAuth(_)) => self
                .on_client_auth(auth, env, frame, now_ms)
                .map(|(temp_channel_id, frame)| HostStep::ToServer { temp_channel_id, frame }),
            (HostPhase::RequestSent, Body::ServerHello(_)) => {
                self.on_server_hello(auth, env, frame, now_ms).map(HostStep::Grant)
            }
            _ => Err(AbortReason::UnexpectedMessage),
        };
        result.unwrap_or_else(|reason| HostStep::Aborted(self.abort(auth, env, reason)))
    }

    /// Step 2: check the hello, open a temp channel for the client, and
    /// answer with the host certificate.
    pub fn on_client_hello(
        &mut self,
        auth: &HostAuthority,
        env: &dyn HostEnv,
        frame: &[u8],
        now_ms: u64,
    ) -> Result<(u32, Vec<u8>), AbortReason> {
        let msg = Message::decode(frame).map_err(|_| AbortReason::Malformed)?;
        let Body::ClientHello(hello) = msg.body else {
            return Err(AbortReason::UnexpectedMessage);
        };
        if self.phase != HostPhase::AwaitHello {
            return Err(AbortReason::UnexpectedMessage);
        }
        self.session_id = msg.session_id;
        self.log.set_session(msg.session_id);
        if hello.version != PROTOCOL_VERSION {
            return Err(AbortReason::VersionMismatch);
        }
        auth.screen(&hello.nonce, now_ms)?;
        self.client_nonce = Some(hello.nonce);
        if msg.session_id == 0 || !env.claim_session(msg.session_id) {
            return Err(AbortReason::DuplicateSession);
        }
        let client = hello.client;
        if client.service_id == HOST_SERVICE_ID || !auth.trust.allowed.contains(client.key()) {
            return Err(AbortReason::UnknownService);
        }
        if client.pid == 0 {
            return Err(AbortReason::Malformed);
        }
        if !hello.cipher_suites.contains(&CIPHER_RSA_PSS_SHA256) {
            return Err(AbortReason::UnsupportedCipher);
        }
        self.client = Some(client);
        let temp = env.allocate_temp(self.session_id, client, Role::Client)?;
        self.client_temp = Some(temp);
        let signed = challenge_message(&hello.nonce, &host_hello_context(self.session_id));
        let reply = Message::new(
            self.session_id,
            Body::HostHello(HostHello {
                host_certificate: auth.creds.cert.to_bytes(),
                selected_cipher: CIPHER_RSA_PSS_SHA256,
                host_signature: auth.creds.sign(&signed),
            }),
        )
        .encode();
        self.client_leg.absorb(frame);
        self.client_leg.absorb(&reply);
        self.enter(HostPhase::HelloSent);
        Ok((temp, reply))
    }

    /// Step 4: authenticate the client and forward the request to the
    /// target's listener on a new temp channel.
    pub fn on_client_auth(
        &mut self,
        auth: &HostAuthority,
        env: &dyn HostEnv,
        frame: &[u8],
        now_ms: u64,
    ) -> Result<(u32, Vec<u8>), AbortReason> {
        let msg = Message::decode(frame).map_err(|_| AbortReason::Malformed)?;
        let Body::ClientAuth(ca) = msg.body else {
            return Err(AbortReason::UnexpectedMessage);
        };
        if self.phase != HostPhase::HelloSent || msg.session_id != self.session_id {
            return Err(AbortReason::UnexpectedMessage);
        }
        let client = self.client.expect("set at hello");
        let nonce = self.client_nonce.expect("set at hello");
        let cert = check_peer_certificate(&auth.trust, &ca.client_certificate, client.key())?;
        let context = client_auth_context(self.session_id, &self.client_leg.digest());
        auth.verify(&cert.public_key, &nonce, &context, &ca.challenge_signature, now_ms)?;
        self.client_leg.absorb(frame);
        let server = env.listener(ca.target_service_id).ok_or(AbortReason::NoListener)?;
        self.server = Some(server);
        let temp = env.allocate_temp(self.session_id, server, Role::Server)?;
        self.server_temp = Some(temp);
        let server_nonce = Nonce::fresh();
        self.server_nonce = Some(server_nonce);
        let request = Message::new(
            self.session_id,
            Body::ServerRequest(ServerRequest {
                client,
                nonce: server_nonce,
                temp_channel_id: temp,
                client_leg: self.client_leg.digest(),
            }),
        )
        .encode();
        self.server_leg.absorb(&request);
        self.enter(HostPhase::RequestSent);
        Ok((temp, request))
    }

    /// Step 6: authenticate the server, allocate and authorize the data
    /// channel, and build both grants.
    pub fn on_server_hello(
        &mut self,
        auth: &HostAuthority,
        env: &dyn HostEnv,
        frame: &[u8],
        now_ms: u64,
    ) -> Result<Grants, AbortReason> {
        let msg = Message::decode(frame).map_err(|_| AbortReason::Malformed)?;
        let Body::ServerHello(sh) = msg.body else {
            return Err(AbortReason::UnexpectedMessage);
        };
        if self.phase != HostPhase::RequestSent || msg.session_id != self.session_id {
            return Err(AbortReason::UnexpectedMessage);
        }
        let (client, server) = (self.client.expect("set"), self.server.expect("set"));
        let nonce = self.server_nonce.expect("set at request");
        let cert = check_peer_certificate(&auth.trust, &sh.server_certificate, server.key())?;
        let context = server_auth_context(self.session_id, &self.server_leg.digest());
        auth.verify(&cert.public_key, &nonce, &context, &sh.challenge_signature, now_ms)?;
        if !sh.accept {
            return Err(AbortReason::Rejected);
        }
        self.server_leg.absorb(frame);
        let (client_leg, server_leg) = (self.client_leg.digest(), self.server_leg.digest());
        let transcript = combine(&client_leg, &server_leg);
        let witness = AuthorizationWitness { _sealed: () };
        let (channel_id, buffer_size) = env.allocate_data(self.session_id, client, server, witness)?;
        self.data_channel = Some(channel_id);
        env.authorize(channel_id, client, server, transcript)?;
        self.transcript = Some(transcript);
        let grant = |peer_leg| {
            Message::new(
                self.session_id,
                Body::ChannelGrant(ChannelGrant {
                    channel_id,
                    buffer_size,
                    client,
                    server,
                    transcript_hash: transcript,
                    peer_leg,
                }),
            )
            .encode()
        };
        let grants = Grants { channel_id, transcript_hash: transcript, to_client: grant(server_leg), to_server: grant(client_leg) };
        self.enter(HostPhase::Granting);
        Ok(grants)
    }

    fn release_temps(&mut self, env: &dyn HostEnv) {
        for temp in [self.client_temp.take(), self.server_temp.take()].into_iter().flatten() {
            env.release(temp);
        }
    }

    /// Step 6, continued: both grants were delivered, so the temp channels
    /// go away and the session is done.
    pub fn finish(&mut self, auth: &HostAuthority, env: &dyn HostEnv) {
        if self.phase != HostPhase::Granting {
            return;
        }
        self.release_temps(env);
        if let Some(n) = self.client_nonce {
            auth.done_with(&n);
        }
        self.enter(HostPhase::Granted);
    }

    /// Terminates the session, releasing every channel it still holds. A
    /// data channel whose grants were never delivered is released too.
    pub fn abort(&mut self, auth: &HostAuthority, env: &dyn HostEnv, reason: AbortReason) -> AbortReason {
        if self.phase.is_terminal() {
            return reason;
        }
        env.on_abort(self.session_id, reason);
        self.release_temps(env);
        if let Some(channel) = self.data_channel.take() {
            env.release(channel);
        }
        if let Some(n) = self.client_nonce {
            auth.done_with(&n);
        }
        self.enter(HostPhase::Aborted(reason));
        reason
    }
}
