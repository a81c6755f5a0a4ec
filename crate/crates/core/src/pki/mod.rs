//! Broker-as-CA trust material: certificates, the allowed-service list, and
//! signed nonce challenges.
//!
//! Certificate encoding (little-endian):
//!
//! ```text
//!   u32 subject_service_id
//!   u32 subject_vm_id
//!   u32 key_len, key_len bytes   PKCS#1 DER RSA public key
//!   u64 issued_at                unix seconds
//!   u64 expires_at               unix seconds
//!   u32 sig_len, sig_len bytes   RSA-PSS/SHA-256 over every preceding byte
//! ```

mod challenge;
mod store;

use std::collections::BTreeMap;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rsa::pkcs1::{DecodeRsaPublicKey, EncodeRsaPublicKey};
use rsa::pss::{BlindedSigningKey, Signature, VerifyingKey};
use rsa::signature::{RandomizedSigner, SignatureEncoding, Verifier};
use rsa::{RsaPrivateKey, RsaPublicKey};
use sha2::Sha256;
use thiserror::Error;

use crate::identity::{ServiceKey, CA_SERVICE_ID};

pub use challenge::{
    challenge_message, sign_challenge, verify_challenge, ChallengeVerdict, Nonce, Rejected, ReplayCache,
    DEFAULT_FRESHNESS, REPLAY_CAPACITY,
};
pub use store::{load_service, load_trust, write_service, write_trust, TrustStore};

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("rsa: {0}")]
    Rsa(#[from] rsa::Error),
    #[error("key encoding: {0}")]
    KeyEncoding(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("{0} already has a key pair")]
    DuplicateIdentity(ServiceKey),
    #[error("credentials i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn malformed(what: &'static str, detail: impl Into<String>) -> PkiError {
    PkiError::Malformed { what, detail: detail.into() }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySizes {
    pub ca_bits: usize,
    pub service_bits: usize,
}

impl Default for KeySizes {
    fn default() -> Self {
        Self { ca_bits: 4096, service_bits: 2048 }
    }
}

impl KeySizes {
    /// Small keys for tests that exercise protocol logic, not cryptographic
    /// strength.
    pub const FAST: KeySizes = KeySizes { ca_bits: 1024, service_bits: 1024 };
}

pub(crate) fn sign(key: &BlindedSigningKey<Sha256>, msg: &[u8]) -> Vec<u8> {
    key.sign_with_rng(&mut rand::thread_rng(), msg).to_vec()
}

pub(crate) fn verify(key: &RsaPublicKey, msg: &[u8], sig: &[u8]) -> bool {
    let Ok(sig) = Signature::try_from(sig) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(key.clone()).verify(msg, &sig).is_ok()
}

fn encode_public(key: &RsaPublicKey) -> Result<Vec<u8>, PkiError> {
    key.to_pkcs1_der()
        .map(|d| d.as_bytes().to_vec())
        .map_err(|e| PkiError::KeyEncoding(e.to_string()))
}

fn decode_public(der: &[u8]) -> Result<RsaPublicKey, PkiError> {
    RsaPublicKey::from_pkcs1_der(der).map_err(|e| malformed("public key", e.to_string()))
}

/// Little-endian cursor over an untrusted byte string.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], PkiError> {
        if self.buf.len() < n {
            return Err(malformed(self.what, format!("truncated: need {n}, have {}", self.buf.len())));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, PkiError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, PkiError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self, limit: usize) -> Result<&'a [u8], PkiError> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(malformed(self.what, format!("length {n} over limit {limit}")));
        }
        self.take(n)
    }

    pub(crate) fn finish(self) -> Result<(), PkiError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(malformed(self.what, format!("{} trailing bytes", self.buf.len())))
        }
    }
}

const MAX_KEY_DER: usize = 4096;
const MAX_SIG: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: ServiceKey,
    pub public_key: RsaPublicKey,
    pub issued_at: u64,
    pub expires_at: u64,
    key_der: Vec<u8>,
    signature: Vec<u8>,
}

impl Certificate {
    fn tbs(subject: ServiceKey, key_der: &[u8], issued_at: u64, expires_at: u64) -> Vec<u8> {
        let mut b = Vec::with_capacity(28 + key_der.len());
        b.extend_from_slice(&subject.service_id.to_le_bytes());
        b.extend_from_slice(&subject.vm_id.to_le_bytes());
        b.extend_from_slice(&(key_der.len() as u32).to_le_bytes());
        b.extend_from_slice(key_der);
        b.extend_from_slice(&issued_at.to_le_bytes());
        b.extend_from_slice(&expires_at.to_le_bytes());
        b
    }

    fn signed(
        signer: &BlindedSigningKey<Sha256>,
        subject: ServiceKey,
        public_key: RsaPublicKey,
        issued_at: u64,
        expires_at: u64,
    ) -> Result<Self, PkiError> {
        let key_der = encode_public(&public_key)?;
        let signature = sign(signer, &Self::tbs(subject, &key_der, issued_at, expires_at));
        Ok(Self { subject, public_key, issued_at, expires_at, key_der, signature })
    }

    pub fn signature(&self) -> &[u8] {
        &self.signature
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Self::tbs(self.subject, &self.key_der, self.issued_at, self.expires_at);
        b.extend_from_slice(&(self.signature.len() as u32).to_le_bytes());
        b.extend_from_slice(&self.signature);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader::new(bytes, "certificate");
        let cert = Self::read(&mut r)?;
        r.finish()?;
        Ok(cert)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, PkiError> {
        let subject = ServiceKey::new(r.u32()?, r.u32()?);
        let key_der = r.bytes(MAX_KEY_DER)?.to_vec();
        let public_key = decode_public(&key_der)?;
        let issued_at = r.u64()?;
        let expires_at = r.u64()?;
        let signature = r.bytes(MAX_SIG)?.to_vec();
        Ok(Self { subject, public_key, issued_at, expires_at, key_der, signature })
    }

    /// True if the certificate's own key verifies its signature.
    pub fn is_self_signed(&self) -> bool {
        self.signed_by(&self.public_key)
    }

    pub fn signed_by(&self, issuer: &RsaPublicKey) -> bool {
        let tbs = Self::tbs(self.subject, &self.key_der, self.issued_at, self.expires_at);
        verify(issuer, &tbs, &self.signature)
    }
}

/// Why a certificate was refused, in the order checks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CertError {
    #[error("signature does not verify against the CA")]
    BadSignature,
    #[error("subject is not in the allowed-service list")]
    NotAllowed,
    #[error("public key differs from the listed key")]
    KeyMismatch,
    #[error("validity period is empty")]
    BadValidity,
    #[error("not yet valid")]
    NotYetValid,
    #[error("expired")]
    Expired,
}

pub fn verify_certificate(
    ca: &Certificate,
    allowed: &AllowedServiceList,
    cert: &Certificate,
    now: u64,
) -> Result<(), CertError> {
    if !cert.signed_by(&ca.public_key) {
        return Err(CertError::BadSignature);
    }
    let listed = allowed.get(cert.subject).ok_or(CertError::NotAllowed)?;
    if listed != &cert.public_key {
        return Err(CertError::KeyMismatch);
    }
    if cert.issued_at >= cert.expires_at {
        return Err(CertError::BadValidity);
    }
    if now < cert.issued_at {
        return Err(CertError::NotYetValid);
    }
    if now >= cert.expires_at {
        return Err(CertError::Expired);
    }
    Ok(())
}

/// Published map from `(service_id, vm_id)` to public key.
///
/// Encoding: `u32 count` then per entry `u32 service_id, u32 vm_id,
/// u32 key_len, key_len bytes of PKCS#1 DER`, sorted by key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AllowedServiceList {
    entries: BTreeMap<ServiceKey, RsaPublicKey>,
}

impl AllowedServiceList {
    pub fn get(&self, key: ServiceKey) -> Option<&RsaPublicKey> {
        self.entries.get(&key)
    }

    pub fn contains(&self, key: ServiceKey) -> bool {
        self.entries.contains_key(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = ServiceKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn insert(&mut self, key: ServiceKey, public: RsaPublicKey) -> Result<(), PkiError> {
        if self.entries.contains_key(&key) {
            return Err(PkiError::DuplicateIdentity(key));
        }
        self.entries.insert(key, public);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PkiError> {
        let mut b = (self.entries.len() as u32).to_le_bytes().to_vec();
        for (key, public) in &self.entries {
            let der = encode_public(public)?;
            b.extend_from_slice(&key.service_id.to_le_bytes());
            b.extend_from_slice(&key.vm_id.to_le_bytes());
            b.extend_from_slice(&(der.len() as u32).to_le_bytes());
            b.extend_from_slice(&der);
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PkiError> {
        let mut r = Reader::new(bytes, "allowed-service list");
        let count = r.u32()?;
        let mut list = Self::default();
        for _ in 0..count {
            let key = ServiceKey::new(r.u32()?, r.u32()?);
            let public = decode_public(r.bytes(MAX_KEY_DER)?)?;
            list.insert(key, public)
                .map_err(|_| malformed("allowed-service list", format!("duplicate {key}")))?;
        }
        r.finish()?;
        Ok(list)
    }
}

/// A private key with its certificate.
#[derive(Clone)]
pub struct ServiceCredentials {
    pub cert: Certificate,
    key: RsaPrivateKey,
    signer: BlindedSigningKey<Sha256>,
}

impl std::fmt::Debug for ServiceCredentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceCredentials").field("subject", &self.cert.subject).finish()
    }
}

impl ServiceCredentials {
    pub fn new(key: RsaPrivateKey, cert: Certificate) -> Self {
        let signer = BlindedSigningKey::<Sha256>::new(key.clone());
        Self { cert, key, signer }
    }

    pub fn subject(&self) -> ServiceKey {
        self.cert.subject
    }

    pub fn private_key(&self) -> &RsaPrivateKey {
        &self.key
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        sign(&self.signer, msg)
    }
}

pub struct CertificateAuthority {
    creds: ServiceCredentials,
    sizes: KeySizes,
    allowed: AllowedServiceList,
}

impl CertificateAuthority {
    /// Generates the CA key and its self-signed certificate.
    pub fn init(sizes: KeySizes, validity: Duration) -> Result<Self, PkiError> {
        let key = RsaPrivateKey::new(&mut rand::thread_rng(), sizes.ca_bits)?;
        let signer = BlindedSigningKey::<Sha256>::new(key.clone());
        let now = unix_now();
        let subject = ServiceKey::new(CA_SERVICE_ID, CA_SERVICE_ID);
        let cert = Certificate::signed(&signer, subject, key.to_public_key(), now, now + validity.as_secs().max(1))?;
        Ok(Self { creds: ServiceCredentials::new(key, cert), sizes, allowed: AllowedServiceList::default() })
    }

    pub fn certificate(&self) -> &Certificate {
        &self.creds.cert
    }

    pub fn allowed(&self) -> &AllowedServiceList {
        &self.allowed
    }

    /// Generates a key pair for `subject`, certifies it, and lists it.
    pub fn issue(&mut self, subject: ServiceKey, validity: Duration) -> Result<ServiceCredentials, PkiError> {
        if self.allowed.contains(subject) {
            return Err(PkiError::DuplicateIdentity(subject));
        }
        let key = RsaPrivateKey::new(&mut rand::thread_rng(), self.sizes.service_bits)?;
        let public = key.to_public_key();
        let now = unix_now();
        let cert = Certificate::signed(&self.creds.signer, subject, public.clone(), now, now + validity.as_secs().max(1))?;
        self.allowed.insert(subject, public)?;
        Ok(ServiceCredentials::new(key, cert))
    }

    /// Certifies an existing key without listing it. Used to build
    /// certificates whose only defect is their absence from the list.
    pub fn certify_unlisted(
        &self,
        subject: ServiceKey,
        public: RsaPublicKey,
        issued_at: u64,
        expires_at: u64,
    ) -> Result<Certificate, PkiError> {
        Certificate::signed(&self.creds.signer, subject, public, issued_at, expires_at)
    }
}
