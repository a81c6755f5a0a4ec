mod common;

use std::thread;
use std::time::{Duration, Instant};

use shmguard_core::api::{connect, listen, ApiError, Endpoint};
use shmguard_core::handshake::AbortReason;
use shmguard_core::{ChannelState, Denied};

const T: Duration = Duration::from_secs(10);

fn soon() -> Instant {
    Instant::now() + T
}

#[test]
fn ping_round_trip() {
    let h = common::boot(2, 4);
    let mut listener = listen(&h.endpoint(2)).unwrap();
    let server = thread::spawn(move || {
        let mut ch = listener.accept(T).unwrap();
        let msg = ch.receive(soon()).unwrap();
        ch.send(&msg, soon()).unwrap();
        ch.peer()
    });
    let mut ch = connect(&h.endpoint(1), 2, T).unwrap();
    ch.send(b"ping", soon()).unwrap();
    assert_eq!(ch.receive(soon()).unwrap(), b"ping");
    assert_eq!(server.join().unwrap().service_id, 1);
    let meta = h.broker.region().channel(ch.channel_id()).unwrap();
    assert_eq!(meta.state, ChannelState::Established);
}

#[test]
fn raw_access_before_attestation_is_denied() {
    let h = common::boot(2, 4);
    let mut listener = listen(&h.endpoint(2)).unwrap();
    let server = thread::spawn(move || {
        let mut policy = |_: &_| true;
        listener.accept_pending(&mut policy, soon()).unwrap()
    });
    let client = Endpoint::open(&h.endpoint(1)).unwrap();
    let pending = client.connect_pending(2, T).unwrap();
    let server_pending = server.join().unwrap();
    assert_eq!(h.broker.region().channel(pending.channel_id()).unwrap().state, ChannelState::Authorized);
    match pending.open_raw() {
        Err(ApiError::PermissionDenied(Denied::NotEstablished)) => {}
        other => panic!("expected NotEstablished, got {:?}", other.map(|_| ())),
    }
    let s = thread::spawn(move || server_pending.establish(soon()).unwrap());
    let mut c = pending.establish(soon()).unwrap();
    let mut s = s.join().unwrap();
    c.send(b"late", soon()).unwrap();
    assert_eq!(s.receive(soon()).unwrap(), b"late");
}

#[test]
fn no_listener_aborts_and_leaves_no_temp() {
    let h = common::boot(2, 4);
    match connect(&h.endpoint(1), 2, T) {
        Err(ApiError::HandshakeAborted(AbortReason::NoListener)) => {}
        other => panic!("{other:?}"),
    }
    let deadline = Instant::now() + T;
    while !shmguard_core::broker::temp_channels(h.broker.region()).unwrap().is_empty() {
        assert!(Instant::now() < deadline);
        thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn concurrent_pairs_see_only_their_own_payloads() {
    let h = common::boot(4, 6);
    let mut servers = Vec::new();
    for svc in [3u32, 4] {
        let mut listener = listen(&h.endpoint(svc)).unwrap();
        servers.push(thread::spawn(move || {
            let mut ch = listener.accept(T).unwrap();
            let mut got = Vec::new();
            for _ in 0..200 {
                got.push(ch.receive(soon()).unwrap());
            }
            got
        }));
    }
    let clients: Vec<_> = [(1u32, 3u32), (2, 4)]
        .into_iter()
        .map(|(me, target)| {
            let cfg = h.endpoint(me);
            thread::spawn(move || {
                let mut ch = connect(&cfg, target, T).unwrap();
                for i in 0..200u32 {
                    let mut frame = vec![target as u8; 64];
                    frame[..4].copy_from_slice(&i.to_le_bytes());
                    ch.send(&frame, soon()).unwrap();
                }
                ch
            })
        })
        .collect();
    let _chans: Vec<_> = clients.into_iter().map(|c| c.join().unwrap()).collect();
    for (server, tag) in servers.into_iter().zip([3u8, 4]) {
        let got = server.join().unwrap();
        assert_eq!(got.len(), 200);
        for (i, frame) in got.iter().enumerate() {
            assert_eq!(&frame[..4], &(i as u32).to_le_bytes());
            assert!(frame[4..].iter().all(|&b| b == tag), "foreign bytes on channel for service {tag}");
        }
    }
}

#[test]
fn server_policy_rejection_reaches_the_client() {
    let h = common::boot(2, 4);
    let mut listener = listen(&h.endpoint(2)).unwrap();
    let server = thread::spawn(move || listener.accept_with(|_| false, Duration::from_millis(1500)));
    match connect(&h.endpoint(1), 2, T) {
        Err(ApiError::HandshakeAborted(AbortReason::Rejected)) => {}
        other => panic!("{other:?}"),
    }
    assert!(matches!(server.join().unwrap(), Err(ApiError::Timeout)));
}

#[test]
fn closing_one_end_ends_the_other() {
    let h = common::boot(2, 4);
    let mut listener = listen(&h.endpoint(2)).unwrap();
    let server = thread::spawn(move || listener.accept(T).unwrap());
    let mut client = connect(&h.endpoint(1), 2, T).unwrap();
    let mut server = server.join().unwrap();
    client.send(b"last words", soon()).unwrap();
    let id = client.channel_id();
    client.close();
    assert_eq!(server.receive(soon()).unwrap(), b"last words");
    assert!(matches!(server.receive(soon()), Err(ApiError::ChannelClosed)));
    drop(server);
    let deadline = Instant::now() + T;
    while h.broker.region().channel(id).unwrap().state.is_live() {
        assert!(Instant::now() < deadline, "channel {id} never released");
        thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn quota_exhaustion_is_reported() {
    let h = common::boot(2, 1);
    let mut listener = listen(&h.endpoint(2)).unwrap();
    let server = thread::spawn(move || listener.accept(T).unwrap());
    let _first = connect(&h.endpoint(1), 2, T).unwrap();
    let _held = server.join().unwrap();
    match connect(&h.endpoint(1), 2, T) {
        Err(ApiError::HandshakeAborted(AbortReason::RegionExhausted)) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_or_stopped_broker_is_unreachable() {
    let h = common::boot(2, 4);
    let cfg = h.endpoint(1);
    let mut bad = cfg.clone();
    bad.region_path = h.dir.path().join("nowhere");
    assert!(matches!(Endpoint::open(&bad), Err(ApiError::BrokerUnreachable(_))));
    let ep = Endpoint::open(&cfg).unwrap();
    h.broker.shutdown();
    let started = Instant::now();
    assert!(matches!(ep.connect(2, T), Err(ApiError::BrokerUnreachable(_) | ApiError::PermissionDenied(_))));
    assert!(started.elapsed() < T);
    assert!(matches!(Endpoint::open(&cfg), Err(ApiError::BrokerUnreachable(_))));
}

#[test]
fn accept_and_receive_honour_deadlines() {
    let h = common::boot(2, 4);
    let mut listener = listen(&h.endpoint(2)).unwrap();
    let started = Instant::now();
    assert!(matches!(listener.accept(Duration::from_millis(200)), Err(ApiError::Timeout)));
    assert!(started.elapsed() < Duration::from_secs(2));
    let server = thread::spawn(move || listener.accept(T).unwrap());
    let mut client = connect(&h.endpoint(1), 2, T).unwrap();
    let _server = server.join().unwrap();
    let started = Instant::now();
    assert!(matches!(client.receive(Instant::now() + Duration::from_millis(100)), Err(ApiError::Timeout)));
    assert!(started.elapsed() < Duration::from_secs(1));
    let big = vec![0u8; client.max_frame() + 1];
    assert!(matches!(client.send(&big, soon()), Err(ApiError::FrameTooLarge { .. })));
}
