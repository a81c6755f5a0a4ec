//! Handshake and host-channel control messages.
//!
//! Every frame is `u32 len | u8 type | u64 session_id | fields`, where `len`
//! counts everything after itself. Integers are little-endian; byte strings
//! are `u32 len | bytes`. Decoding is strict: unknown types, out-of-range
//! enums and trailing bytes are errors, so `encode(decode(b)) == b` for
//! every accepted `b`.

use thiserror::Error;

use crate::identity::Identity;
use crate::pki::{Nonce, PkiError, Reader};

pub const PROTOCOL_VERSION: u16 = 1;
/// RSA-PSS/SHA-256 signatures over nonce challenges. The only suite.
pub const CIPHER_RSA_PSS_SHA256: u16 = 0x0001;
pub const MAX_MESSAGE: usize = 16 << 10;
const MAX_FIELD: usize = 4096;
const MAX_SUITES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    ClientHello = 1,
    HostHello = 2,
    ClientAuth = 3,
    ServerRequest = 4,
    ServerHello = 5,
    ChannelGrant = 6,
    Abort = 7,
    Listen = 0x10,
    Unlisten = 0x11,
    Attest = 0x12,
    Close = 0x13,
}

impl MessageType {
    pub const ALL: [MessageType; 11] = [
        Self::ClientHello,
        Self::HostHello,
        Self::ClientAuth,
        Self::ServerRequest,
        Self::ServerHello,
        Self::ChannelGrant,
        Self::Abort,
        Self::Listen,
        Self::Unlisten,
        Self::Attest,
        Self::Close,
    ];

    fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
#[repr(u8)]
pub enum AbortReason {
    #[error("unknown service")]
    UnknownService = 1,
    #[error("bad certificate")]
    BadCertificate = 2,
    #[error("bad challenge signature")]
    BadChallenge = 3,
    #[error("replayed nonce")]
    Replay = 4,
    #[error("stale nonce")]
    Stale = 5,
    #[error("region exhausted")]
    RegionExhausted = 6,
    #[error("rejected by server")]
    Rejected = 7,
    #[error("timed out")]
    Timeout = 8,
    #[error("unexpected message")]
    UnexpectedMessage = 9,
    #[error("protocol version mismatch")]
    VersionMismatch = 10,
    #[error("no common cipher suite")]
    UnsupportedCipher = 11,
    #[error("no listener for target service")]
    NoListener = 12,
    #[error("transcript mismatch")]
    TranscriptMismatch = 13,
    #[error("duplicate session id")]
    DuplicateSession = 14,
    #[error("internal broker error")]
    Internal = 15,
    #[error("malformed message")]
    Malformed = 16,
    #[error("broker shutting down")]
    Shutdown = 17,
}

impl AbortReason {
    pub const ALL: [AbortReason; 17] = [
        Self::UnknownService,
        Self::BadCertificate,
        Self::BadChallenge,
        Self::Replay,
        Self::Stale,
        Self::RegionExhausted,
        Self::Rejected,
        Self::Timeout,
        Self::UnexpectedMessage,
        Self::VersionMismatch,
        Self::UnsupportedCipher,
        Self::NoListener,
        Self::TranscriptMismatch,
        Self::DuplicateSession,
        Self::Internal,
        Self::Malformed,
        Self::Shutdown,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|r| *r as u8 == v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    Client = 1,
    Server = 2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHello {
    pub version: u16,
    pub cipher_suites: Vec<u16>,
    pub client: Identity,
    pub nonce: Nonce,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostHello {
    pub host_certificate: Vec<u8>,
    pub selected_cipher: u16,
    /// Host's signature over the client's nonce.
    pub host_signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientAuth {
    pub client_certificate: Vec<u8>,
    pub challenge_signature: Vec<u8>,
    pub target_service_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerRequest {
    pub client: Identity,
    /// Host-issued challenge for the server.
    pub nonce: Nonce,
    pub temp_channel_id: u32,
    /// Digest of the client's half of the handshake.
    pub client_leg: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerHello {
    pub server_certificate: Vec<u8>,
    pub challenge_signature: Vec<u8>,
    pub accept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelGrant {
    pub channel_id: u32,
    pub buffer_size: u32,
    pub client: Identity,
    pub server: Identity,
    pub transcript_hash: [u8; 32],
    /// Digest of the other endpoint's half of the handshake.
    pub peer_leg: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attest {
    pub role: Role,
    pub channel_id: u32,
    pub transcript_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    ClientHello(ClientHello),
    HostHello(HostHello),
    ClientAuth(ClientAuth),
    ServerRequest(ServerRequest),
    ServerHello(ServerHello),
    ChannelGrant(ChannelGrant),
    Abort(AbortReason),
    Listen(Identity),
    Unlisten(Identity),
    Attest(Attest),
    Close(Attest),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub session_id: u64,
    pub body: Body,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame length {0} invalid")]
    BadLength(usize),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("bad field: {0}")]
    BadField(String),
}

impl From<PkiError> for WireError {
    fn from(e: PkiError) -> Self {
        WireError::BadField(e.to_string())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn raw(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.raw(b);
    }
    fn identity(&mut self, id: &Identity) {
        self.u32(id.service_id);
        self.u32(id.vm_id);
        self.u64(id.pid);
    }
    fn nonce(&mut self, n: &Nonce) {
        self.raw(&n.value);
        self.u64(n.timestamp_ms);
    }
    fn attest(&mut self, a: &Attest) {
        self.u8(a.role as u8);
        self.u32(a.channel_id);
        self.raw(&a.transcript_hash);
    }
}

fn u8_of(r: &mut Reader<'_>) -> Result<u8, WireError> {
    Ok(r.take(1)?[0])
}

fn u16_of(r: &mut Reader<'_>) -> Result<u16, WireError> {
    Ok(u16::from_le_bytes(r.take(2)?.try_into().unwrap()))
}

fn hash_of(r: &mut Reader<'_>) -> Result<[u8; 32], WireError> {
    Ok(r.take(32)?.try_into().unwrap())
}

fn identity_of(r: &mut Reader<'_>) -> Result<Identity, WireError> {
    Ok(Identity::new(r.u32()?, r.u32()?, r.u64()?))
}

fn nonce_of(r: &mut Reader<'_>) -> Result<Nonce, WireError> {
    let value = r.take(16)?.try_into().unwrap();
    Ok(Nonce { value, timestamp_ms: r.u64()? })
}

fn field_of(r: &mut Reader<'_>) -> Result<Vec<u8>, WireError> {
    Ok(r.bytes(MAX_FIELD)?.to_vec())
}

fn attest_of(r: &mut Reader<'_>) -> Result<Attest, WireError> {
    let role = match u8_of(r)? {
        1 => Role::Client,
        2 => Role::Server,
        v => return Err(WireError::BadField(format!("role {v}"))),
    };
    Ok(Attest { role, channel_id: r.u32()?, transcript_hash: hash_of(r)? })
}

impl Message {
    pub fn new(session_id: u64, body: Body) -> Self {
        Self { session_id, body }
    }

    pub fn kind(&self) -> MessageType {
        match &self.body {
            Body::ClientHello(_) => MessageType::ClientHello,
            Body::HostHello(_) => MessageType::HostHello,
            Body::ClientAuth(_) => MessageType::ClientAuth,
            Body::ServerRequest(_) => MessageType::ServerRequest,
            Body::ServerHello(_) => MessageType::ServerHello,
            Body::ChannelGrant(_) => MessageType::ChannelGrant,
            Body::Abort(_) => MessageType::Abort,
            Body::Listen(_) => MessageType::Listen,
            Body::Unlisten(_) => MessageType::Unlisten,
            Body::Attest(_) => MessageType::Attest,
            Body::Close(_) => MessageType::Close,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(vec![0; 4]);
        w.u8(self.kind() as u8);
        w.u64(self.session_id);
        match &self.body {
            Body::ClientHello(m) => {
                w.u16(m.version);
                w.u16(m.cipher_suites.len() as u16);
                for s in &m.cipher_suites {
                    w.u16(*s);
                }
                w.identity(&m.client);
                w.nonce(&m.nonce);
            }
            Body::HostHello(m) => {
                w.bytes(&m.host_certificate);
                w.u16(m.selected_cipher);
                w.bytes(&m.host_signature);
            }
            Body::ClientAuth(m) => {
                w.bytes(&m.client_certificate);
                w.bytes(&m.challenge_signature);
                w.u32(m.target_service_id);
            }
            Body::ServerRequest(m) => {
                w.identity(&m.client);
                w.nonce(&m.nonce);
                w.u32(m.temp_channel_id);
                w.raw(&m.client_leg);
            }
            Body::ServerHello(m) => {
                w.bytes(&m.server_certificate);
                w.bytes(&m.challenge_signature);
                w.u8(m.accept as u8);
            }
            Body::ChannelGrant(m) => {
                w.u32(m.channel_id);
                w.u32(m.buffer_size);
                w.identity(&m.client);
                w.identity(&m.server);
                w.raw(&m.transcript_hash);
                w.raw(&m.peer_leg);
            }
            Body::Abort(reason) => w.u8(*reason as u8),
            Body::Listen(id) | Body::Unlisten(id) => w.identity(id),
            Body::Attest(a) | Body::Close(a) => w.attest(a),
        }
        let len = (w.0.len() - 4) as u32;
        w.0[..4].copy_from_slice(&len.to_le_bytes());
        w.0
    }

    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        if frame.len() < 13 || frame.len() > MAX_MESSAGE {
            return Err(WireError::BadLength(frame.len()));
        }
        let declared = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        if declared != frame.len() - 4 {
            return Err(WireError::BadLength(declared));
        }
        let mut r = Reader::new(&frame[4..], "handshake message");
        let ty = u8_of(&mut r)?;
        let kind = MessageType::from_u8(ty).ok_or(WireError::UnknownType(ty))?;
        let session_id = r.u64()?;
        let body = match kind {
            MessageType::ClientHello => {
                let version = u16_of(&mut r)?;
                let n = u16_of(&mut r)? as usize;
                if n > MAX_SUITES {
                    return Err(WireError::BadField(format!("{n} cipher suites")));
                }
                let cipher_suites = (0..n).map(|_| u16_of(&mut r)).collect::<Result<_, _>>()?;
                Body::ClientHello(ClientHello {
                    version,
                    cipher_suites,
                    client: identity_of(&mut r)?,
                    nonce: nonce_of(&mut r)?,
                })
            }
            MessageType::HostHello => Body::HostHello(HostHello {
                host_certificate: field_of(&mut r)?,
                selected_cipher: u16_of(&mut r)?,
                host_signature: field_of(&mut r)?,
            }),
            MessageType::ClientAuth => Body::ClientAuth(ClientAuth {
                client_certificate: field_of(&mut r)?,
                challenge_signature: field_of(&mut r)?,
                target_service_id: r.u32()?,
            }),
            MessageType::ServerRequest => Body::ServerRequest(ServerRequest {
                client: identity_of(&mut r)?,
                nonce: nonce_of(&mut r)?,
                temp_channel_id: r.u32()?,
                client_leg: hash_of(&mut r)?,
            }),
            MessageType::ServerHello => Body::ServerHello(ServerHello {
                server_certificate: field_of(&mut r)?,
                challenge_signature: field_of(&mut r)?,
                accept: match u8_of(&mut r)? {
                    0 => false,
                    1 => true,
                    v => return Err(WireError::BadField(format!("accept flag {v}"))),
                },
            }),
            MessageType::ChannelGrant => Body::ChannelGrant(ChannelGrant {
                channel_id: r.u32()?,
                buffer_size: r.u32()?,
                client: identity_of(&mut r)?,
                server: identity_of(&mut r)?,
                transcript_hash: hash_of(&mut r)?,
                peer_leg: hash_of(&mut r)?,
            }),
            MessageType::Abort => {
                let v = u8_of(&mut r)?;
                Body::Abort(AbortReason::from_u8(v).ok_or_else(|| WireError::BadField(format!("abort reason {v}")))?)
            }
            MessageType::Listen => Body::Listen(identity_of(&mut r)?),
            MessageType::Unlisten => Body::Unlisten(identity_of(&mut r)?),
            MessageType::Attest => Body::Attest(attest_of(&mut r)?),
            MessageType::Close => Body::Close(attest_of(&mut r)?),
        };
        r.finish()?;
        Ok(Self { session_id, body })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_identity() -> impl Strategy<Value = Identity> {
        (any::<u32>(), any::<u32>(), any::<u64>()).prop_map(|(s, v, p)| Identity::new(s, v, p))
    }

    fn arb_nonce() -> impl Strategy<Value = Nonce> {
        (any::<[u8; 16]>(), any::<u64>()).prop_map(|(value, timestamp_ms)| Nonce { value, timestamp_ms })
    }

    fn arb_bytes() -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(any::<u8>(), 0..600)
    }

    fn arb_attest() -> impl Strategy<Value = Attest> {
        (prop::bool::ANY, any::<u32>(), any::<[u8; 32]>()).prop_map(|(c, channel_id, transcript_hash)| Attest {
            role: if c { Role::Client } else { Role::Server },
            channel_id,
            transcript_hash,
        })
    }

    pub(crate) fn arb_message() -> impl Strategy<Value = Message> {
        let body = prop_oneof![
            (any::<u16>(), prop::collection::vec(any::<u16>(), 0..16), arb_identity(), arb_nonce()).prop_map(
                |(version, cipher_suites, client, nonce)| Body::ClientHello(ClientHello {
                    version,
                    cipher_suites,
                    client,
                    nonce
                })
            ),
            (arb_bytes(), any::<u16>(), arb_bytes()).prop_map(|(c, s, sig)| Body::HostHello(HostHello {
                host_certificate: c,
                selected_cipher: s,
                host_signature: sig
            })),
            (arb_bytes(), arb_bytes(), any::<u32>()).prop_map(|(c, s, t)| Body::ClientAuth(ClientAuth {
                client_certificate: c,
                challenge_signature: s,
                target_service_id: t
            })),
            (arb_identity(), arb_nonce(), any::<u32>(), any::<[u8; 32]>()).prop_map(|(client, nonce, t, leg)| {
                Body::ServerRequest(ServerRequest { client, nonce, temp_channel_id: t, client_leg: leg })
            }),
            (arb_bytes(), arb_bytes(), prop::bool::ANY).prop_map(|(c, s, a)| Body::ServerHello(ServerHello {
                server_certificate: c,
                challenge_signature: s,
                accept: a
            })),
            (any::<u32>(), any::<u32>(), arb_identity(), arb_identity(), any::<[u8; 32]>(), any::<[u8; 32]>())
                .prop_map(|(channel_id, buffer_size, client, server, t, peer)| Body::ChannelGrant(ChannelGrant {
                    channel_id,
                    buffer_size,
                    client,
                    server,
                    transcript_hash: t,
                    peer_leg: peer
                })),
            prop::sample::select(AbortReason::ALL.to_vec()).prop_map(Body::Abort),
            arb_identity().prop_map(Body::Listen),
            arb_identity().prop_map(Body::Unlisten),
            arb_attest().prop_map(Body::Attest),
            arb_attest().prop_map(Body::Close),
        ];
        (any::<u64>(), body).prop_map(|(session_id, body)| Message { session_id, body })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(msg in arb_message()) {
            let bytes = msg.encode();
            let back = Message::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &msg);
            prop_assert_eq!(back.encode(), bytes);
        }

        #[test]
        fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            if let Ok(msg) = Message::decode(&bytes) {
                prop_assert_eq!(msg.encode(), bytes);
            }
        }

        #[test]
        fn truncation_and_extension_rejected(msg in arb_message(), cut in 1usize..8) {
            let bytes = msg.encode();
            let short = &bytes[..bytes.len().saturating_sub(cut)];
            prop_assert!(Message::decode(short).is_err());
            let mut long = bytes.clone();
            long.push(0);
            prop_assert!(Message::decode(&long).is_err());
        }
    }

    #[test]
    fn abort_layout() {
        let m = Message::new(0x0102030405060708, Body::Abort(AbortReason::Replay));
        assert_eq!(m.encode(), [10, 0, 0, 0, 7, 8, 7, 6, 5, 4, 3, 2, 1, 4]);
    }
}
