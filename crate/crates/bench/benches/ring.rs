use std::time::{Duration, Instant};

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use shmguard_core::bench::{Scratch, CHANNEL_SIZE};
use shmguard_core::transport::RingOptions;

/// Send then receive on one thread: the ring's own cost, no wakeups.
fn send_receive(c: &mut Criterion) {
    let mut group = c.benchmark_group("ring/send_receive");
    for size in [64usize, 1024, 16 << 10] {
        let pair = Scratch::new(CHANNEL_SIZE).unwrap().pair(RingOptions::default()).unwrap();
        let (mut tx, mut rx) = (pair.client.tx, pair.server.rx);
        let payload = vec![0x5au8; size];
        let mut buf = Vec::with_capacity(size);
        group.throughput(Throughput::Bytes(size as u64));
        group.bench_with_input(BenchmarkId::from_parameter(size), &size, |b, _| {
            b.iter(|| {
                let deadline = Instant::now() + Duration::from_secs(1);
                tx.send(&payload, deadline).unwrap();
                rx.receive_into(&mut buf, deadline).unwrap();
            })
        });
    }
    group.finish();
}

/// A 32-frame burst: shows how much notification suppression saves.
fn burst(c: &mut Criterion) {
    let mut group = c.benchmark_group("ring/burst32_1k");
    for (name, opts) in [("ring", RingOptions::with_window(Duration::ZERO)), ("naive", RingOptions::naive())] {
        let pair = Scratch::new(CHANNEL_SIZE).unwrap().pair(opts).unwrap();
        let (mut tx, mut rx) = (pair.client.tx, pair.server.rx);
        let payload = vec![0xa5u8; 1024];
        let mut buf = Vec::with_capacity(1024);
        let frames = if name == "naive" { 1 } else { 32 };
        group.throughput(Throughput::Bytes(1024 * frames));
        group.bench_function(name, |b| {
            b.iter(|| {
                let deadline = Instant::now() + Duration::from_secs(1);
                for _ in 0..frames {
                    tx.send(&payload, deadline).unwrap();
                }
                for _ in 0..frames {
                    rx.receive_into(&mut buf, deadline).unwrap();
                }
            })
        });
    }
    group.finish();
}

criterion_group!(benches, send_receive, burst);
criterion_main!(benches);
