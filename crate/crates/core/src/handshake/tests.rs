use std::sync::OnceLock;

use proptest::prelude::*;

use super::sim::{self, Fixture, Hop, MemoryEnv};
use super::wire::{Body, ClientHello, Message, CIPHER_RSA_PSS_SHA256, PROTOCOL_VERSION};
use super::*;
use crate::identity::Identity;
use crate::pki::{KeySizes, Nonce};
use crate::transport::notice::now_ms;

fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| Fixture::new(KeySizes::FAST).unwrap())
}

#[test]
fn honest_session_is_granted_with_one_transcript() {
    let fix = fixture();
    let env = fix.env();
    let out = sim::run(fix, &env, true, |_, _| {});
    assert!(out.granted(&env), "{out:?}");
    let (c, s) = (out.client_grant.unwrap(), out.server_grant.unwrap());
    assert_eq!(c.transcript_hash, s.transcript_hash);
    assert_eq!(c.channel_id, s.channel_id);
    assert_eq!(env.live_temps(), 0);
    assert_eq!(env.data_channels().len(), 1);
    let hops: Vec<Hop> = out.frames.iter().map(|(h, _)| *h).collect();
    assert_eq!(hops, Hop::ALL);
}

#[test]
fn rejection_allocates_nothing() {
    let fix = fixture();
    let env = fix.env();
    let out = sim::run(fix, &env, false, |_, _| {});
    assert_eq!(out.host, HostPhase::Aborted(AbortReason::Rejected));
    assert_eq!(out.server, ServerPhase::Aborted(AbortReason::Rejected));
    assert_eq!(env.live_temps(), 0);
    assert!(env.data_channels().is_empty());
}

#[test]
fn replayed_hello_is_refused_before_any_allocation() {
    let fix = fixture();
    let env = fix.env();
    let out = sim::run(fix, &env, true, |_, _| {});
    assert!(out.granted(&env));
    let hello = out.frames[0].1.clone();
    let mut host = HostSession::new();
    let step = host.on_frame(&fix.authority, &env, &hello, now_ms());
    assert!(matches!(step, HostStep::Aborted(AbortReason::Replay)), "{step:?}");
    assert_eq!(env.live_temps(), 0);
    assert_eq!(env.data_channels().len(), 1);

    // Same nonce under a new session id is still a replay.
    let renamed = sim::reframe(&hello, |m| m.session_id ^= 1);
    let step = HostSession::new().on_frame(&fix.authority, &env, &renamed, now_ms());
    assert!(matches!(step, HostStep::Aborted(AbortReason::Replay)), "{step:?}");
}

#[test]
fn stale_hello_is_refused() {
    let fix = fixture();
    let env = fix.env();
    let mut nonce = Nonce::fresh();
    nonce.timestamp_ms -= 60_000;
    let hello = Message::new(
        7,
        Body::ClientHello(ClientHello {
            version: PROTOCOL_VERSION,
            cipher_suites: vec![CIPHER_RSA_PSS_SHA256],
            client: fix.client,
            nonce,
        }),
    )
    .encode();
    let step = HostSession::new().on_frame(&fix.authority, &env, &hello, now_ms());
    assert!(matches!(step, HostStep::Aborted(AbortReason::Stale)), "{step:?}");
}

#[test]
fn hello_checks_run_in_order() {
    let fix = fixture();
    let env = fix.env();
    let hello = |client: Identity, version: u16, suites: Vec<u16>| {
        Message::new(
            rand::random::<u64>() | 1,
            Body::ClientHello(ClientHello { version, cipher_suites: suites, client, nonce: Nonce::fresh() }),
        )
        .encode()
    };
    let cases = [
        (hello(fix.client, 9, vec![CIPHER_RSA_PSS_SHA256]), AbortReason::VersionMismatch),
        (hello(Identity::new(77, 1, 5), PROTOCOL_VERSION, vec![CIPHER_RSA_PSS_SHA256]), AbortReason::UnknownService),
        (hello(Identity::new(1, 2, 5), PROTOCOL_VERSION, vec![CIPHER_RSA_PSS_SHA256]), AbortReason::UnknownService),
        (hello(Identity::new(0, 0, 5), PROTOCOL_VERSION, vec![CIPHER_RSA_PSS_SHA256]), AbortReason::UnknownService),
        (hello(fix.client, PROTOCOL_VERSION, vec![0x0002]), AbortReason::UnsupportedCipher),
    ];
    for (frame, want) in cases {
        let step = HostSession::new().on_frame(&fix.authority, &env, &frame, now_ms());
        assert!(matches!(step, HostStep::Aborted(r) if r == want), "want {want:?}, got {step:?}");
    }
    assert_eq!(env.live_temps(), 0);
}

#[test]
fn wrong_client_identity_in_auth_is_refused() {
    let fix = fixture();
    let env = fix.env();
    // The server's certificate presented for the client's hello.
    let server_cert = fix.server_creds.cert.to_bytes();
    let out = sim::run(fix, &env, true, |hop, frame| {
        if hop == Hop::ClientAuth {
            *frame = sim::reframe(frame, |m| {
                if let Body::ClientAuth(ca) = &mut m.body {
                    ca.client_certificate = server_cert.clone();
                }
            });
        }
    });
    assert_eq!(out.host, HostPhase::Aborted(AbortReason::BadCertificate));
    assert_eq!(env.live_temps(), 0);
}

#[test]
fn missing_listener_and_quota_abort_cleanly() {
    let fix = fixture();
    let env = MemoryEnv::new();
    let out = sim::run(fix, &env, true, |_, _| {});
    assert_eq!(out.host, HostPhase::Aborted(AbortReason::NoListener));
    assert_eq!(env.live_temps(), 0);

    let env = MemoryEnv::with_quota(2);
    env.add_listener(fix.server);
    let out = sim::run(fix, &env, true, |_, _| {});
    assert_eq!(out.host, HostPhase::Aborted(AbortReason::RegionExhausted));
    assert_eq!(env.live_temps(), 0);
    assert!(env.data_channels().is_empty());
}

#[test]
fn every_single_byte_flip_is_caught() {
    let fix = fixture();
    let honest = sim::run(fix, &fix.env(), true, |_, _| {});
    for (hop, frame) in &honest.frames {
        // Stride keeps the run short while touching every field.
        for pos in (0..frame.len()).step_by(7) {
            let env = fix.env();
            let out = sim::run(fix, &env, true, |h, f| {
                if h == *hop && pos < f.len() {
                    f[pos] ^= 0x01;
                }
            });
            assert!(!out.granted(&env), "{hop:?} byte {pos} flip was granted");
            assert_eq!(env.live_temps(), 0, "{hop:?} byte {pos} leaked a temp channel");
        }
    }
}

#[test]
fn host_session_ends_after_abort_from_peer() {
    let fix = fixture();
    let env = fix.env();
    let out = sim::run(fix, &env, true, |hop, frame| {
        if hop == Hop::HostHello {
            frame.truncate(frame.len() - 1);
        }
    });
    assert_eq!(out.client, ClientPhase::Aborted(AbortReason::Malformed));
    assert_eq!(out.host, HostPhase::Aborted(AbortReason::Malformed));
    assert_eq!(env.live_temps(), 0);
}

fn arb_body() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Any frame in any phase yields a defined step and never panics.
    #[test]
    fn host_is_total(prefix in 0usize..4, junk in arb_body(), kind in 0u8..0x14) {
        let fix = fixture();
        let env = fix.env();
        let honest = sim::run(fix, &env, true, |_, _| {});
        let env = fix.env();
        let mut host = HostSession::new();
        let inputs = [&honest.frames[0].1, &honest.frames[2].1, &honest.frames[4].1];
        for frame in inputs.iter().take(prefix.min(3)) {
            host.on_frame(&fix.authority, &env, frame, now_ms());
        }
        let mut frame = vec![kind];
        frame.extend_from_slice(&honest.session_id.to_le_bytes());
        frame.extend_from_slice(&junk);
        let _ = host.on_frame(&fix.authority, &env, &frame, now_ms());
        let _ = host.on_frame(&fix.authority, &env, &junk, now_ms());
        prop_assert_ne!(host.phase(), HostPhase::Granted);
        if host.phase().is_terminal() {
            prop_assert_eq!(env.live_temps(), 0);
        }
    }

    #[test]
    fn endpoints_are_total(junk in arb_body()) {
        let fix = fixture();
        let (mut client, _) = ClientSession::start(fix.client, 2, fix.client_creds.clone(), fix.trust.clone());
        let mut server = ServerSession::new(fix.server, fix.server_creds.clone(), fix.trust.clone());
        let step = client.on_frame(&junk);
        prop_assert!(matches!(step, Step::Aborted(_)));
        prop_assert!(client.phase().is_terminal());
        let step = server.on_frame(&junk, |_| true);
        prop_assert!(matches!(step, Step::Aborted(_)));
    }
}
