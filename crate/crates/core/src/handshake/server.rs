//! Server side of the handshake.

use std::sync::Arc;

use super::transcript::{combine, server_auth_context, Hash, Leg};
use super::wire::{AbortReason, Body, ChannelGrant, Message, ServerHello};
use super::{Step, Transitions};
use crate::identity::Identity;
use crate::pki::{sign_challenge, ServiceCredentials, TrustStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerPhase {
    Listening,
    Responded,
    Granted,
    Aborted(AbortReason),
}

impl ServerPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Granted | Self::Aborted(_))
    }
}

pub struct ServerSession {
    session_id: u64,
    identity: Identity,
    creds: Arc<ServiceCredentials>,
    _trust: Arc<TrustStore>,
    leg: Leg,
    client: Option<Identity>,
    client_leg: Option<Hash>,
    temp_channel_id: Option<u32>,
    phase: ServerPhase,
    transcript: Option<Hash>,
    grant: Option<ChannelGrant>,
    log: Transitions,
}

impl ServerSession {
    pub fn new(identity: Identity, creds: Arc<ServiceCredentials>, trust: Arc<TrustStore>) -> Self {
        Self {
            session_id: 0,
            identity,
            creds,
            _trust: trust,
            leg: Leg::default(),
            client: None,
            client_leg: None,
            temp_channel_id: None,
            phase: ServerPhase::Listening,
            transcript: None,
            grant: None,
            log: Transitions::new("server", 0),
        }
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    pub fn phase(&self) -> ServerPhase {
        self.phase
    }

    pub fn client(&self) -> Option<Identity> {
        self.client
    }

    pub fn temp_channel_id(&self) -> Option<u32> {
        self.temp_channel_id
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

    fn enter(&mut self, next: ServerPhase) {
        self.log.record(&format!("{:?}", self.phase), &format!("{next:?}"));
        self.phase = next;
    }

    fn abort(&mut self, reason: AbortReason) -> Step {
        if !self.phase.is_terminal() {
            self.enter(ServerPhase::Aborted(reason));
        }
        Step::Aborted(reason)
    }

    /// Feeds one frame from the host. `accept` decides whether to take a
    /// connection from the named client.
    pub fn on_frame(&mut self, frame: &[u8], accept: impl FnOnce(&Identity) -> bool) -> Step {
        if self.phase.is_terminal() {
            return Step::Aborted(AbortReason::UnexpectedMessage);
        }
        let Ok(msg) = Message::decode(frame) else {
            return self.abort(AbortReason::Malformed);
        };
        if self.phase != ServerPhase::Listening && msg.session_id != self.session_id {
            return self.abort(AbortReason::UnexpectedMessage);
        }
        match (self.phase, msg.body) {
            (_, Body::Abort(reason)) => self.abort(reason),
            (ServerPhase::Listening, Body::ServerRequest(req)) => {
                self.session_id = msg.session_id;
                self.log.set_session(msg.session_id);
                self.leg.absorb(frame);
                let context = server_auth_context(self.session_id, &self.leg.digest());
                let accepted = accept(&req.client);
                let hello = Message::new(
                    self.session_id,
                    Body::ServerHello(ServerHello {
                        server_certificate: self.creds.cert.to_bytes(),
                        challenge_signature: sign_challenge(&self.creds, &req.nonce, &context),
                        accept: accepted,
                    }),
                )
                .encode();
                self.leg.absorb(&hello);
                self.client = Some(req.client);
                self.client_leg = Some(req.client_leg);
                self.temp_channel_id = Some(req.temp_channel_id);
                self.enter(if accepted { ServerPhase::Responded } else { ServerPhase::Aborted(AbortReason::Rejected) });
                Step::Send(hello)
            }
            (ServerPhase::Responded, Body::ChannelGrant(grant)) => self.finalize(grant),
            _ => self.abort(AbortReason::UnexpectedMessage),
        }
    }

    fn finalize(&mut self, grant: ChannelGrant) -> Step {
        let client_leg = self.client_leg.expect("set with the request");
        if grant.server != self.identity || Some(grant.client) != self.client || grant.peer_leg != client_leg {
            return self.abort(AbortReason::TranscriptMismatch);
        }
        let transcript = combine(&client_leg, &self.leg.digest());
        if transcript != grant.transcript_hash {
            return self.abort(AbortReason::TranscriptMismatch);
        }
        self.transcript = Some(transcript);
        self.grant = Some(grant);
        self.enter(ServerPhase::Granted);
        Step::Granted(grant)
    }

    pub fn abort_frame(&self, reason: AbortReason) -> Vec<u8> {
        Message::new(self.session_id, Body::Abort(reason)).encode()
    }
}
