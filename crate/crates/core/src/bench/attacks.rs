//! The attack matrix: out-of-bounds access, writes to the control section,
//! and impersonation handshakes. Every attempt must be refused and leave no
//! channel behind.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BenchError, SecureTarget};
use crate::api::{listen, ApiError, Endpoint, EstablishedChannel};
use crate::gate::{AccessKind, AccessRequest, Denied, GateError};
use crate::handshake::{AbortReason, ClientSession};
use crate::identity::Identity;
use crate::pki::{Certificate, CertificateAuthority, KeySizes, ServiceCredentials};
use crate::region::{ChannelRequest, ChannelState, RegionError, RequestedState};

const TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackRow {
    pub scenario: &'static str,
    pub runs: usize,
    pub blocked: usize,
    /// First unblocked attempt, if any.
    pub failure: Option<String>,
}

impl AttackRow {
    fn new(scenario: &'static str) -> Self {
        Self { scenario, runs: 0, blocked: 0, failure: None }
    }

    fn record(&mut self, outcome: Result<(), String>) {
        self.runs += 1;
        match outcome {
            Ok(()) => self.blocked += 1,
            Err(e) => {
                self.failure.get_or_insert(e);
            }
        }
    }

    pub fn all_blocked(&self) -> bool {
        self.runs > 0 && self.blocked == self.runs
    }
}

#[derive(Debug, Clone)]
pub struct AttackReport {
    pub rows: Vec<AttackRow>,
    /// Legitimate in-bounds accesses on an ESTABLISHED channel:
    /// `(runs, permitted)`.
    pub legitimate: (usize, usize),
}

impl AttackReport {
    pub fn all_blocked(&self) -> bool {
        self.rows.iter().all(AttackRow::all_blocked)
    }

    pub fn row(&self, scenario: &str) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }

    pub const CSV_HEADER: [&'static str; 4] = ["scenario", "runs", "blocked", "permitted"];

    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.scenario.to_string(), r.runs.to_string(), r.blocked.to_string(), "0".into()])
            .collect();
        let (runs, permitted) = self.legitimate;
        rows.push(vec!["legitimate-in-bounds".into(), runs.to_string(), "0".into(), permitted.to_string()]);
        rows
    }
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<34} {:>5} {:>8} {:>7}", "scenario", "runs", "blocked", "rate")?;
        for r in &self.rows {
            let rate = 100.0 * r.blocked as f64 / r.runs.max(1) as f64;
            writeln!(f, "{:<34} {:>5} {:>8} {:>6.0}%", r.scenario, r.runs, r.blocked, rate)?;
            if let Some(e) = &r.failure {
                writeln!(f, "  not blocked: {e}")?;
            }
        }
        let (runs, ok) = self.legitimate;
        writeln!(f, "{:<34} {:>5} {:>8} {:>7}", "legitimate in-bounds (permitted)", runs, ok, "")
    }
}

pub const OUT_OF_BOUNDS: &str = "out-of-bounds";
pub const CONTROL_SECTION: &str = "control-section";
pub const WRONG_SERVICE: &str = "impersonation/wrong-service-id";
pub const FORGED_CERT: &str = "impersonation/forged-certificate";
pub const REPLAYED_NONCE: &str = "impersonation/replayed-nonce";

/// Runs every scenario `runs` times against the broker behind `target`,
/// using pair 0's services.
pub fn attack_suite(target: &SecureTarget, runs: usize, seed: u64) -> Result<AttackReport, BenchError> {
    let (c, s) = target.pair_services(0)?;
    let server = Server::start(target, s)?;
    let client = Endpoint::open(&target.endpoint(c))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut channel = client.connect(s, TIMEOUT)?;
    let mut oob = AttackRow::new(OUT_OF_BOUNDS);
    let mut legit = (0, 0);
    for i in 0..runs {
        oob.record(out_of_bounds(&client, &channel, &mut rng, i));
        legit.0 += 1;
        if in_bounds(&client, &mut channel, i).is_ok() {
            legit.1 += 1;
        }
    }

    let mut control = AttackRow::new(CONTROL_SECTION);
    for i in 0..runs {
        control.record(control_write(&client, &channel, i));
    }
    drop(channel);

    let mut wrong = AttackRow::new(WRONG_SERVICE);
    for i in 0..runs {
        wrong.record(wrong_service(&client, s, i));
    }

    let rogue = Rogue::new(&client)?;
    let mut forged = AttackRow::new(FORGED_CERT);
    for i in 0..runs {
        forged.record(forged_certificate(&client, &rogue, s, i));
    }

    let mut replay = AttackRow::new(REPLAYED_NONCE);
    for _ in 0..runs {
        replay.record(replayed_nonce(&client, s));
    }
    server.stop()?;
    Ok(AttackReport { rows: vec![oob, control, wrong, forged, replay], legitimate: legit })
}

/// Accepts and immediately drops every connection until stopped.
struct Server {
    stop: Arc<AtomicBool>,
    thread: thread::JoinHandle<Result<(), BenchError>>,
}

impl Server {
    fn start(target: &SecureTarget, service: u32) -> Result<Server, BenchError> {
        let mut listener = listen(&target.endpoint(service))?;
        let stop = Arc::new(AtomicBool::new(false));
        let stopped = stop.clone();
        let thread = thread::spawn(move || {
            let mut held: Option<EstablishedChannel> = None;
            while !stopped.load(Ordering::Acquire) {
                match listener.accept(Duration::from_millis(100)) {
                    // Keep the newest channel so the client's view stays valid.
                    Ok(ch) => held = Some(ch),
                    Err(ApiError::Timeout) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            drop(held);
            Ok(())
        });
        Ok(Server { stop, thread })
    }

    fn stop(self) -> Result<(), BenchError> {
        self.stop.store(true, Ordering::Release);
        self.thread.join().map_err(|_| BenchError::Invalid("accept thread panicked".into()))?
    }
}

fn expect_denied(what: &str, got: Result<(), Denied>, want: Denied) -> Result<(), String> {
    match got {
        Err(d) if d == want => Ok(()),
        other => Err(format!("{what}: expected {want:?}, got {other:?}")),
    }
}

/// Reads, writes and gate checks past the end of an ESTABLISHED channel.
fn out_of_bounds(ep: &Endpoint, ch: &EstablishedChannel, rng: &mut ChaCha8Rng, i: usize) -> Result<(), String> {
    let id = ch.channel_id();
    let view = ep.gate().map(id, ep.identity()).map_err(|e| format!("map: {e}"))?;
    let len = view.len();
    let (offset, length) = match i % 4 {
        0 => (len + rng.gen_range(0..4096), rng.gen_range(1..64)),
        1 => (len - rng.gen_range(1..64), rng.gen_range(65..4096)),
        2 => (len - 1, rng.gen_range(2..4096)),
        _ => (usize::MAX - rng.gen_range(0..16), 16),
    };
    let mut buf = vec![0u8; length];
    expect_denied("read", view.read(offset, &mut buf), Denied::OutOfBounds)?;
    expect_denied("write", view.write(offset, &buf), Denied::OutOfBounds)?;
    for kind in [AccessKind::Read, AccessKind::Write, AccessKind::Map] {
        let req = AccessRequest::new(ep.identity(), id, offset as u64, length as u64, kind);
        expect_denied("gate check", ep.gate().check(&req).into_result(), Denied::OutOfBounds)?;
    }
    Ok(())
}

/// A legitimate mapping, read and release, followed by a frame on the
/// channel to show it was undisturbed.
fn in_bounds(ep: &Endpoint, ch: &mut EstablishedChannel, i: usize) -> Result<(), String> {
    let view = ep.gate().map(ch.channel_id(), ep.identity()).map_err(|e| e.to_string())?;
    let mut head = [0u8; 8];
    view.read(0, &mut head).map_err(|e| e.to_string())?;
    drop(view);
    ch.send(&(i as u64).to_le_bytes(), Instant::now() + TIMEOUT).map_err(|e| e.to_string())
}

/// Every route a guest has towards the control section, in turn.
fn control_write(ep: &Endpoint, ch: &EstablishedChannel, i: usize) -> Result<(), String> {
    let region = ep.region();
    let gate = ep.gate();
    let before = region.control_bytes();
    let me = ep.identity();
    let not_broker_region = |r: Result<(), RegionError>| match r {
        Err(RegionError::NotBroker) => Ok(()),
        other => Err(format!("expected NotBroker, got {other:?}")),
    };
    let not_broker_gate = |r: Result<(), GateError>| match r {
        Err(GateError::NotBroker) => Ok(()),
        other => Err(format!("expected NotBroker, got {other:?}")),
    };
    let result = match i % 10 {
        0 => {
            let req = ChannelRequest { state: RequestedState::Temp, server: me, client: me, session_id: 1 };
            not_broker_region(region.allocate_channel(req, 4096).map(|_| ()))
        }
        1 => not_broker_region(region.release_channel(ch.channel_id())),
        2 => not_broker_region(region.control_lock().map(|_| ())),
        3 => not_broker_gate(gate.mark_authorized(ch.channel_id(), [me.pid, me.pid], [me.service_id; 2], [0; 32])),
        4 => not_broker_gate(gate.mark_established(ch.channel_id(), &ch.transcript_hash())),
        5 => not_broker_gate(gate.teardown()),
        6 => not_broker_gate(gate.map_host(0).map(|_| ())),
        7 => match gate.map(region.max_channels(), me) {
            Err(GateError::PermissionDenied(Denied::NoChannel)) => Ok(()),
            other => Err(format!("map past the table: {:?}", other.map(|_| ()))),
        },
        8 => {
            // The host channel buffer ends where the control section does
            // not begin; writes stop at its edge.
            let host = gate.map(0, me).map_err(|e| e.to_string())?;
            expect_denied("host channel write", host.write(host.len(), &[0xff; 8]), Denied::OutOfBounds)
        }
        _ => {
            let view = gate.map(ch.channel_id(), me).map_err(|e| e.to_string())?;
            expect_denied("wrapped offset", view.write(usize::MAX - 7, &[0xff; 8]), Denied::OutOfBounds)
        }
    };
    result?;
    let after = region.control_bytes();
    if before != after {
        return Err(format!("attempt {i} changed the control section"));
    }
    if !region.policy_active() {
        return Err("policy switched off".into());
    }
    Ok(())
}

/// Waits until nothing is left of `session_id` in the channel table.
fn no_channel_left(ep: &Endpoint, session_id: u64) -> Result<(), String> {
    let deadline = Instant::now() + TIMEOUT;
    loop {
        let live: Vec<_> = ep
            .region()
            .channels()
            .map_err(|e| e.to_string())?
            .into_iter()
            .filter(|m| m.channel_id != 0 && m.session_id == session_id && m.state.is_live())
            .collect();
        if live.is_empty() {
            return Ok(());
        }
        if live.iter().any(|m| matches!(m.state, ChannelState::Authorized | ChannelState::Established)) {
            return Err(format!("session {session_id:016x} obtained a data channel"));
        }
        if Instant::now() >= deadline {
            return Err(format!("temp channel of {session_id:016x} never released"));
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Waits for the broker to retire the TEMP channels of `session_id`.
fn temps_gone(ep: &Endpoint, session_id: u64) -> Result<(), String> {
    let deadline = Instant::now() + TIMEOUT;
    loop {
        let channels = ep.region().channels().map_err(|e| e.to_string())?;
        if !channels.iter().any(|m| m.session_id == session_id && m.state == ChannelState::Temp) {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(format!("temp channels of {session_id:016x} never released"));
        }
        thread::sleep(Duration::from_millis(1));
    }
}

fn expect_abort(what: &str, got: Result<(), ApiError>, allowed: &[AbortReason]) -> Result<(), String> {
    match got {
        Err(ApiError::HandshakeAborted(r)) if allowed.contains(&r) => Ok(()),
        other => Err(format!("{what}: expected abort {allowed:?}, got {other:?}")),
    }
}

/// Hellos naming services the registry does not hold.
fn wrong_service(ep: &Arc<Endpoint>, target: u32, i: usize) -> Result<(), String> {
    let me = ep.identity();
    let claimed = match i % 2 {
        0 => Identity::new(0xdead_0000 + i as u32, me.vm_id, me.pid),
        _ => Identity::new(me.service_id, me.vm_id + 1000, me.pid),
    };
    let (session, hello) = ClientSession::start(claimed, target, Arc::new(clone_creds(ep.credentials())), Arc::new(ep.trust().clone()));
    let sid = session.session_id();
    let got = ep.drive_client(session, &hello, Instant::now() + TIMEOUT).map(|_| ());
    expect_abort("wrong service id", got, &[AbortReason::UnknownService])?;
    no_channel_left(ep, sid)
}

fn clone_creds(c: &ServiceCredentials) -> ServiceCredentials {
    ServiceCredentials::new(c.private_key().clone(), c.cert.clone())
}

/// Credentials an attacker could assemble without the CA's key.
struct Rogue {
    /// Issued by a CA of the attacker's own, for the client's identity.
    foreign: ServiceCredentials,
    /// The genuine certificate with its signature altered.
    tampered: ServiceCredentials,
    /// The genuine certificate paired with a key that does not match it.
    stolen: ServiceCredentials,
}

impl Rogue {
    fn new(ep: &Endpoint) -> Result<Rogue, BenchError> {
        let subject = ep.identity().key();
        let bad = |e: crate::pki::PkiError| BenchError::Invalid(e.to_string());
        let mut ca = CertificateAuthority::init(KeySizes::FAST, Duration::from_secs(3600)).map_err(bad)?;
        let foreign = ca.issue(subject, Duration::from_secs(3600)).map_err(bad)?;
        let genuine = ep.credentials();
        let mut bytes = genuine.cert.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        let tampered_cert = Certificate::from_bytes(&bytes).map_err(bad)?;
        let tampered = ServiceCredentials::new(genuine.private_key().clone(), tampered_cert);
        let stolen = ServiceCredentials::new(foreign.private_key().clone(), genuine.cert.clone());
        Ok(Rogue { foreign, tampered, stolen })
    }
}

fn forged_certificate(ep: &Arc<Endpoint>, rogue: &Rogue, target: u32, i: usize) -> Result<(), String> {
    let (creds, allowed): (&ServiceCredentials, &[AbortReason]) = match i % 3 {
        0 => (&rogue.foreign, &[AbortReason::BadCertificate]),
        1 => (&rogue.tampered, &[AbortReason::BadCertificate]),
        _ => (&rogue.stolen, &[AbortReason::BadChallenge]),
    };
    let (session, hello) = ClientSession::start(ep.identity(), target, Arc::new(clone_creds(creds)), Arc::new(ep.trust().clone()));
    let sid = session.session_id();
    let got = ep.drive_client(session, &hello, Instant::now() + TIMEOUT).map(|_| ());
    expect_abort("forged certificate", got, allowed)?;
    no_channel_left(ep, sid)
}

/// Completes an honest session, then posts its recorded hello again.
fn replayed_nonce(ep: &Arc<Endpoint>, target: u32) -> Result<(), String> {
    let (session, hello) =
        ClientSession::start(ep.identity(), target, Arc::new(clone_creds(ep.credentials())), Arc::new(ep.trust().clone()));
    let sid = session.session_id();
    let deadline = Instant::now() + TIMEOUT;
    let honest = ep
        .drive_client(session, &hello, deadline)
        .and_then(|p| p.establish(deadline))
        .map_err(|e| format!("honest session failed: {e}"))?;
    let honest_id = honest.channel_id();
    temps_gone(ep, sid)?;
    ep.post(&hello, deadline).map_err(|e| e.to_string())?;
    let got = ep.await_hello_answer(sid, ep.identity(), deadline).map(|_| ());
    expect_abort("replayed hello", got, &[AbortReason::Replay])?;
    let extra = ep
        .region()
        .channels()
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter(|m| m.session_id == sid && m.state.is_live() && m.channel_id != honest_id)
        .count();
    if extra > 0 {
        return Err(format!("replay of {sid:016x} allocated {extra} channel(s)"));
    }
    Ok(())
}
