use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use refvfx::assembly::SegmentLayout;
use refvfx::denoiser::{decomposed_attention, masked_full_attention, AttentionPath};
use refvfx::icmask::{build_mask, FlowTable};
use refvfx::rng;
use refvfx::tensor::{Tape, Tensor};

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("attention");
    group.sample_size(20);
    for (gt, gr, zt, zr) in [(8, 8, 64, 64), (8, 8, 256, 256)] {
        let layout = SegmentLayout::in_context(gt, gr, zt, zr, None).unwrap();
        let table = FlowTable::canonical();
        let n = layout.total_len();
        let mut r = rng::rng(0);
        let q = Tensor::<f32>::randn(vec![n, 16], 1.0, &mut r);
        let k = Tensor::<f32>::randn(vec![n, 16], 1.0, &mut r);
        let v = Tensor::<f32>::randn(vec![n, 16], 1.0, &mut r);
        let mask = build_mask(&layout, &table).unwrap().additive::<f32>();
        for path in [AttentionPath::Full, AttentionPath::Decomposed] {
            group.bench_with_input(BenchmarkId::new(format!("{path:?}"), n), &path, |b, &path| {
                b.iter(|| {
                    let mut t = Tape::<f32>::new();
                    let (qv, kv, vv) = (t.param(q.clone()), t.param(k.clone()), t.param(v.clone()));
                    let o = match path {
                        AttentionPath::Full => masked_full_attention(&mut t, qv, kv, vv, Some(&mask)).unwrap().0,
                        AttentionPath::Decomposed => decomposed_attention(&mut t, qv, kv, vv, &layout, &table).unwrap(),
                    };
                    let l = t.mean(o).unwrap();
                    t.backward(l).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
