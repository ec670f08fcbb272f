use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use grtn_bench::{fixture, toy_params};
use grtn_core::autodiff::Conv2dSpec;
use grtn_core::net::Net;
use grtn_core::{AttentionKind, Graph};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_32ch_32x32");
    let x = fixture(&[2, 32, 32, 32], 1);
    for (name, spec, cin) in [
        ("plain", Conv2dSpec::same(3), 32),
        ("groups16", Conv2dSpec::same(3).with_groups(16), 2),
        ("stride2", Conv2dSpec::same(3).with_stride(2), 32),
    ] {
        let w = fixture(&[32, cin, 3, 3], 2);
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, wv) = (g.param(x.clone()), g.param(w.clone()));
                let y = g.conv2d(xv, wv, None, spec).unwrap();
                let s = g.sum(y);
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("window_attention_64tok_32ch");
    let (q, k, v) = (fixture(&[32, 64, 32], 3), fixture(&[32, 64, 32], 4), fixture(&[32, 64, 32], 5));
    for kind in [AttentionKind::Euclidean, AttentionKind::DotProduct] {
        group.bench_function(BenchmarkId::new("forward_backward", kind.name()), |b| {
            b.iter(|| {
                let mut g = Graph::new();
                let (qv, kv, vv) = (g.param(q.clone()), g.param(k.clone()), g.param(v.clone()));
                let y = g.attention(qv, kv, vv, None, 2, kind, 1e-12).unwrap();
                let s = g.sum(y);
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn step(c: &mut Criterion) {
    let params = toy_params();
    let frames = [fixture(&[1, 1, 64, 64], 6), fixture(&[1, 1, 64, 64], 7)];
    c.bench_function("grtn_toy_two_steps_64x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = params.store.bind(&mut g, false);
            let net = Net {
                config: &params.config,
                layout: &params.layout,
                bound: &bound,
            };
            let mut state = None;
            for f in &frames {
                let x = g.constant(f.clone());
                let (y, next) = net.step(&mut g, state, x, &[25.0]).unwrap();
                state = Some(next);
                black_box(y);
            }
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, attention, step
}
criterion_main!(benches);
