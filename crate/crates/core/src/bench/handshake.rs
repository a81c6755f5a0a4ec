//! One-time connection cost.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use super::{BenchError, SecureTarget, Stats};
use crate::api::{listen, ApiError, Endpoint};

const TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct HandshakeStats {
    /// From the client building its hello to accepting the grant.
    pub granted: Stats,
    /// Through attestation, until the channel is ESTABLISHED and mapped.
    pub established: Stats,
    /// Raw per-iteration `(granted, established)` times, warmup included.
    pub samples: Vec<(Duration, Duration)>,
}

/// Runs `iterations` fresh handshakes between pair 0's client and server.
pub fn bench_handshake(target: &SecureTarget, iterations: usize) -> Result<HandshakeStats, BenchError> {
    let (c, s) = target.pair_services(0)?;
    let mut listener = listen(&target.endpoint(s))?;
    let stop = Arc::new(AtomicBool::new(false));
    let stopped = stop.clone();
    let server = thread::spawn(move || -> Result<usize, BenchError> {
        let mut accepted = 0;
        while !stopped.load(Ordering::Acquire) {
            match listener.accept(Duration::from_millis(200)) {
                Ok(ch) => {
                    accepted += 1;
                    drop(ch);
                }
                Err(ApiError::Timeout) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(accepted)
    });
    let client = Endpoint::open(&target.endpoint(c))?;
    let mut samples = Vec::with_capacity(iterations);
    let result = (|| -> Result<(), BenchError> {
        for _ in 0..iterations {
            let t0 = Instant::now();
            let pending = client.connect_pending(s, TIMEOUT)?;
            let granted = t0.elapsed();
            let ch = pending.establish(Instant::now() + TIMEOUT)?;
            samples.push((granted, t0.elapsed()));
            drop(ch);
        }
        Ok(())
    })();
    stop.store(true, Ordering::Release);
    let served = server.join().map_err(|_| BenchError::Invalid("accept thread panicked".into()))??;
    result?;
    if served < iterations {
        return Err(BenchError::Invalid(format!("server accepted {served} of {iterations}")));
    }
    let granted: Vec<Duration> = samples.iter().map(|s| s.0).collect();
    let established: Vec<Duration> = samples.iter().map(|s| s.1).collect();
    Ok(HandshakeStats { granted: Stats::after_warmup(&granted), established: Stats::after_warmup(&established), samples })
}
