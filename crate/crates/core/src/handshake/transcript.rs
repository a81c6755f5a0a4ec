//! Transcript digests and challenge contexts.
//!
//! The handshake has two legs. The client leg covers ClientHello, HostHello
//! and ClientAuth; the server leg covers ServerRequest and ServerHello. The
//! host sees both, each endpoint sees its own, and the grant hands each
//! endpoint the digest of the other. All three compute
//! `SHA-256(client_leg || server_leg)` and must agree.

use sha2::{Digest, Sha256};

pub type Hash = [u8; 32];

/// Running digest of framed messages.
#[derive(Clone, Default)]
pub struct Leg {
    hasher: Sha256,
    frames: usize,
}

impl Leg {
    pub fn absorb(&mut self, frame: &[u8]) {
        self.hasher.update(frame);
        self.frames += 1;
    }

    pub fn digest(&self) -> Hash {
        self.hasher.clone().finalize().into()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
}

pub fn combine(client_leg: &Hash, server_leg: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update(client_leg);
    h.update(server_leg);
    h.finalize().into()
}

fn context(label: &[u8], session_id: u64, binding: Option<&Hash>) -> Vec<u8> {
    let mut c = label.to_vec();
    c.extend_from_slice(&session_id.to_le_bytes());
    if let Some(b) = binding {
        c.extend_from_slice(b);
    }
    c
}

/// What the host signs in HostHello: the client's nonce, bound to the
/// session.
pub fn host_hello_context(session_id: u64) -> Vec<u8> {
    context(b"shmguard/host-hello/", session_id, None)
}

/// What the client signs: its own nonce, bound to the session and to the
/// exact ClientHello and HostHello exchanged.
pub fn client_auth_context(session_id: u64, hello_digest: &Hash) -> Vec<u8> {
    context(b"shmguard/client-auth/", session_id, Some(hello_digest))
}

/// What the server signs: the host's nonce, bound to the session and the
/// exact ServerRequest it answers.
pub fn server_auth_context(session_id: u64, request_digest: &Hash) -> Vec<u8> {
    context(b"shmguard/server-auth/", session_id, Some(request_digest))
}
