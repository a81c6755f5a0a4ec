//! Client side of the handshake.

use std::sync::Arc;

use rand::Rng;

use super::transcript::{client_auth_context, combine, host_hello_context, Hash, Leg};
use super::wire::{AbortReason, Body, ChannelGrant, ClientAuth, ClientHello, Message, CIPHER_RSA_PSS_SHA256, PROTOCOL_VERSION};
use super::{check_peer_certificate, Step, Transitions};
use crate::identity::{Identity, ServiceKey};
use crate::pki::{challenge_message, sign_challenge, verify, Nonce, ServiceCredentials, TrustStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Init,
    SentHello,
    HostVerified,
    Authed,
    Granted,
    Aborted(AbortReason),
}

impl ClientPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Granted | Self::Aborted(_))
    }
}

pub struct ClientSession {
    session_id: u64,
    identity: Identity,
    target_service_id: u32,
    creds: Arc<ServiceCredentials>,
    trust: Arc<TrustStore>,
    nonce: Nonce,
    leg: Leg,
    phase: ClientPhase,
    transcript: Option<Hash>,
    grant: Option<ChannelGrant>,
    log: Transitions,
}

impl ClientSession {
    /// Builds the ClientHello for a fresh session.
    pub fn start(
        identity: Identity,
        target_service_id: u32,
        creds: Arc<ServiceCredentials>,
        trust: Arc<TrustStore>,
    ) -> (Self, Vec<u8>) {
        let session_id = rand::thread_rng().gen_range(1..=u64::MAX);
        let nonce = Nonce::fresh();
        let hello = Message::new(
            session_id,
            Body::ClientHello(ClientHello {
                version: PROTOCOL_VERSION,
                cipher_suites: vec![CIPHER_RSA_PSS_SHA256],
                client: identity,
                nonce,
            }),
        )
        .encode();
        let mut leg = Leg::default();
        leg.absorb(&hello);
        let mut s = Self {
            session_id,
            identity,
            target_service_id,
            creds,
            trust,
            nonce,
            leg,
            phase: ClientPhase::Init,
            transcript: None,
            grant: None,
            log: Transitions::new("client", session_id),
        };
        s.enter(ClientPhase::SentHello);
        (s, hello)
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    /// The identity this session claims.
    pub fn identity(&self) -> Identity {
        self.identity
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    pub fn transcript_hash(&self) -> Option<Hash> {
        self.transcript
    }

    pub fn grant(&self) -> Option<&ChannelGrant> {
        self.grant.as_ref()
    }

    pub fn transitions(&self) -> &[String] {
        self.log.lines()
    }

    fn enter(&mut self, next: ClientPhase) {
        self.log.record(&format!("{:?}", self.phase), &format!("{next:?}"));
        self.phase = next;
    }

    fn abort(&mut self, reason: AbortReason) -> Step {
        if !self.phase.is_terminal() {
            self.enter(ClientPhase::Aborted(reason));
        }
        Step::Aborted(reason)
    }

    /// Feeds one frame from the host.
    pub fn on_frame(&mut self, frame: &[u8]) -> Step {
        if self.phase.is_terminal() {
            return Step::Aborted(AbortReason::UnexpectedMessage);
        }
        let Ok(msg) = Message::decode(frame) else {
            return self.abort(AbortReason::Malformed);
        };
        if msg.session_id != self.session_id {
            return self.abort(AbortReason::UnexpectedMessage);
        }
        match (self.phase, msg.body) {
            (_, Body::Abort(reason)) => self.abort(reason),
            (ClientPhase::SentHello, Body::HostHello(hh)) => {
                if hh.selected_cipher != CIPHER_RSA_PSS_SHA256 {
                    return self.abort(AbortReason::UnsupportedCipher);
                }
                let cert = match check_peer_certificate(&self.trust, &hh.host_certificate, ServiceKey::HOST) {
                    Ok(c) => c,
                    Err(r) => return self.abort(r),
                };
                let signed = challenge_message(&self.nonce, &host_hello_context(self.session_id));
                if !verify(&cert.public_key, &signed, &hh.host_signature) {
                    return self.abort(AbortReason::BadChallenge);
                }
                self.leg.absorb(frame);
                self.enter(ClientPhase::HostVerified);
                let context = client_auth_context(self.session_id, &self.leg.digest());
                let auth = Message::new(
                    self.session_id,
                    Body::ClientAuth(ClientAuth {
                        client_certificate: self.creds.cert.to_bytes(),
                        challenge_signature: sign_challenge(&self.creds, &self.nonce, &context),
                        target_service_id: self.target_service_id,
                    }),
                )
                .encode();
                self.leg.absorb(&auth);
                self.enter(ClientPhase::Authed);
                Step::Send(auth)
            }
            (ClientPhase::Authed, Body::ChannelGrant(grant)) => self.finalize(grant),
            _ => self.abort(AbortReason::UnexpectedMessage),
        }
    }

    /// Accepts the grant only if the host's transcript matches ours.
    fn finalize(&mut self, grant: ChannelGrant) -> Step {
        if grant.client != self.identity || grant.server.service_id != self.target_service_id {
            return self.abort(AbortReason::TranscriptMismatch);
        }
        let transcript = combine(&self.leg.digest(), &grant.peer_leg);
        if transcript != grant.transcript_hash {
            return self.abort(AbortReason::TranscriptMismatch);
        }
        self.transcript = Some(transcript);
        self.grant = Some(grant);
        self.enter(ClientPhase::Granted);
        Step::Granted(grant)
    }

    /// Frame telling the host this client gave up.
    pub fn abort_frame(&self, reason: AbortReason) -> Vec<u8> {
        Message::new(self.session_id, Body::Abort(reason)).encode()
    }
}
