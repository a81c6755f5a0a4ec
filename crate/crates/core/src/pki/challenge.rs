//! Signed nonce challenges with freshness and replay checks.

use std::collections::{HashSet, VecDeque};
use std::time::Duration;

use rand::RngCore;
use rsa::RsaPublicKey;
use thiserror::Error;

use super::ServiceCredentials;

pub const DEFAULT_FRESHNESS: Duration = Duration::from_millis(5000);
pub const REPLAY_CAPACITY: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce {
    pub value: [u8; 16],
    /// Unix milliseconds at creation.
    pub timestamp_ms: u64,
}

impl Nonce {
    pub fn fresh() -> Self {
        let mut value = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut value);
        Self { value, timestamp_ms: crate::transport::notice::now_ms() }
    }
}

/// The exact bytes a challenge signature covers.
pub fn challenge_message(nonce: &Nonce, context: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(4 + context.len() + 24);
    m.extend_from_slice(&(context.len() as u32).to_le_bytes());
    m.extend_from_slice(context);
    m.extend_from_slice(&nonce.value);
    m.extend_from_slice(&nonce.timestamp_ms.to_le_bytes());
    m
}

pub fn sign_challenge(creds: &ServiceCredentials, nonce: &Nonce, context: &[u8]) -> Vec<u8> {
    creds.sign(&challenge_message(nonce, context))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Rejected {
    #[error("challenge signature invalid")]
    BadSignature,
    #[error("nonce outside the freshness window")]
    Stale,
    #[error("nonce already used")]
    Replay,
}

pub type ChallengeVerdict = Result<(), Rejected>;

/// Bounded set of nonce values already accepted; oldest entries fall out
/// first once full.
#[derive(Debug)]
pub struct ReplayCache {
    window: Duration,
    capacity: usize,
    seen: HashSet<[u8; 16]>,
    order: VecDeque<[u8; 16]>,
}

impl Default for ReplayCache {
    fn default() -> Self {
        Self::new(DEFAULT_FRESHNESS, REPLAY_CAPACITY)
    }
}

impl ReplayCache {
    pub fn new(window: Duration, capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { window, capacity, seen: HashSet::new(), order: VecDeque::new() }
    }

    pub fn window(&self) -> Duration {
        self.window
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn contains(&self, value: &[u8; 16]) -> bool {
        self.seen.contains(value)
    }

    /// Freshness and replay checks without recording the nonce.
    pub fn screen(&self, nonce: &Nonce, now_ms: u64) -> ChallengeVerdict {
        if now_ms.abs_diff(nonce.timestamp_ms) > self.window.as_millis() as u64 {
            return Err(Rejected::Stale);
        }
        if self.contains(&nonce.value) {
            return Err(Rejected::Replay);
        }
        Ok(())
    }

    fn insert(&mut self, value: [u8; 16]) {
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.seen.insert(value);
        self.order.push_back(value);
    }
}

/// Accepts a challenge iff the signature verifies, the nonce is fresh, and
/// its value has not been accepted before. Accepted values are recorded.
pub fn verify_challenge(
    public_key: &RsaPublicKey,
    nonce: &Nonce,
    context: &[u8],
    signature: &[u8],
    now_ms: u64,
    cache: &mut ReplayCache,
) -> ChallengeVerdict {
    if !super::verify(public_key, &challenge_message(nonce, context), signature) {
        return Err(Rejected::BadSignature);
    }
    cache.screen(nonce, now_ms)?;
    cache.insert(nonce.value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::ServiceKey;
    use crate::pki::{CertificateAuthority, KeySizes};
    use crate::transport::notice::now_ms;

    fn creds() -> ServiceCredentials {
        let mut ca = CertificateAuthority::init(KeySizes::FAST, Duration::from_secs(60)).unwrap();
        ca.issue(ServiceKey::new(1, 1), Duration::from_secs(60)).unwrap()
    }

    #[test]
    fn replay_stale_and_context() {
        let c = creds();
        let pk = &c.cert.public_key;
        let mut cache = ReplayCache::default();
        let n = Nonce::fresh();
        let sig = sign_challenge(&c, &n, b"client|1");
        assert_eq!(verify_challenge(pk, &n, b"server|1", &sig, now_ms(), &mut cache), Err(Rejected::BadSignature));
        assert_eq!(verify_challenge(pk, &n, b"client|1", &sig, now_ms(), &mut cache), Ok(()));
        assert_eq!(verify_challenge(pk, &n, b"client|1", &sig, now_ms(), &mut cache), Err(Rejected::Replay));

        let old = Nonce { timestamp_ms: now_ms() - 5001, ..Nonce::fresh() };
        let sig = sign_challenge(&c, &old, b"client|1");
        assert_eq!(verify_challenge(pk, &old, b"client|1", &sig, now_ms(), &mut cache), Err(Rejected::Stale));
        let edge = Nonce { timestamp_ms: 10_000, ..Nonce::fresh() };
        let sig = sign_challenge(&c, &edge, b"x");
        assert_eq!(verify_challenge(pk, &edge, b"x", &sig, 15_000, &mut cache), Ok(()));
    }

    #[test]
    fn cache_is_bounded() {
        let mut cache = ReplayCache::new(DEFAULT_FRESHNESS, 4);
        let values: Vec<[u8; 16]> = (0..6u8).map(|i| [i; 16]).collect();
        for v in &values {
            cache.insert(*v);
        }
        assert_eq!(cache.len(), 4);
        assert!(!cache.contains(&values[0]) && !cache.contains(&values[1]));
        assert!(cache.contains(&values[5]));
    }
}
