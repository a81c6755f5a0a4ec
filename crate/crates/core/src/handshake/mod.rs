//! Mutual-authentication handshake mediated by the trusted host.
//!
//! ```text
//! client                      host                        server
//!   ClientHello  ──ch0──▶
//!                ◀─temp─  HostHello
//!   ClientAuth   ──temp─▶
//!                              ServerRequest ──temp─▶
//!                              ◀──temp──  ServerHello
//!                ◀─temp─  ChannelGrant ──temp─▶
//! ```
//!
//! Each role is a state machine that consumes framed bytes and says what to
//! send next. I/O lives in the broker and the endpoint API.

pub mod client;
pub mod host;
pub mod server;
pub mod sim;
pub mod transcript;
pub mod wire;

use crate::identity::ServiceKey;
use crate::pki::{unix_now, verify_certificate, Certificate, TrustStore};

pub use client::{ClientPhase, ClientSession};
pub use host::{Grants, HostAuthority, HostEnv, HostPhase, HostSession, HostStep};
pub use server::{ServerPhase, ServerSession};
pub use wire::{AbortReason, ChannelGrant, Message, Role};

/// Proof that a service channel is being created by a completed handshake.
/// Only the host side of the protocol can mint one.
#[derive(Debug)]
pub struct AuthorizationWitness {
    _sealed: (),
}

/// What an endpoint state machine wants done after a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Send(Vec<u8>),
    Granted(ChannelGrant),
    Aborted(AbortReason),
}

/// Decodes and validates a peer certificate that must name `subject`.
pub(crate) fn check_peer_certificate(
    trust: &TrustStore,
    bytes: &[u8],
    subject: ServiceKey,
) -> Result<Certificate, AbortReason> {
    let cert = Certificate::from_bytes(bytes).map_err(|_| AbortReason::BadCertificate)?;
    if cert.subject != subject {
        return Err(AbortReason::BadCertificate);
    }
    verify_certificate(&trust.ca, &trust.allowed, &cert, unix_now()).map_err(|_| AbortReason::BadCertificate)?;
    Ok(cert)
}

/// One log line per phase change.
#[derive(Debug, Clone)]
pub(crate) struct Transitions {
    role: &'static str,
    session_id: u64,
    lines: Vec<String>,
}

impl Transitions {
    pub(crate) fn new(role: &'static str, session_id: u64) -> Self {
        Self { role, session_id, lines: Vec::new() }
    }

    pub(crate) fn set_session(&mut self, session_id: u64) {
        self.session_id = session_id;
    }

    pub(crate) fn record(&mut self, from: &str, to: &str) {
        let line = format!("session={:016x} role={} {} -> {}", self.session_id, self.role, from, to);
        log::debug!(target: "shmguard::session", "{line}");
        self.lines.push(line);
    }

    pub(crate) fn lines(&self) -> &[String] {
        &self.lines
    }
}

#[cfg(test)]
mod tests;
