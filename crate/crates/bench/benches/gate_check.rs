use criterion::{black_box, criterion_group, criterion_main, Criterion};
use shmguard_bench::{GateFixture, CLIENT};
use shmguard_core::{AccessKind, AccessRequest, Identity};

fn gate_check(c: &mut Criterion) {
    let fx = GateFixture::new();
    let cases = [
        ("permit", AccessRequest::new(CLIENT, fx.channel_id, 0, 4096, AccessKind::Read)),
        ("out_of_bounds", AccessRequest::new(CLIENT, fx.channel_id, fx.channel_len - 1, 2, AccessKind::Write)),
        ("wrong_pid", AccessRequest::new(Identity { pid: 1, ..CLIENT }, fx.channel_id, 0, 64, AccessKind::Read)),
        ("no_channel", AccessRequest::new(CLIENT, 5, 0, 64, AccessKind::Read)),
    ];
    let mut group = c.benchmark_group("gate_check");
    for (name, req) in cases {
        group.bench_function(name, |b| b.iter(|| fx.gate.check(black_box(&req))));
    }
    // What the transport pays per operation once a view has been verified.
    let view = fx.gate.map(fx.channel_id, CLIENT).expect("map");
    group.bench_function("mapped_view", |b| {
        b.iter(|| view.authorize(AccessKind::Write, black_box(0), black_box(4096)))
    });
    group.finish();
}

criterion_group!(benches, gate_check);
criterion_main!(benches);
