use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtlseg_core::{Model, ModelConfig, Tape, Tensor};

fn input(shape: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_fn(shape, |n, c, y, x| ((n * 7 + c * 5 + y * 3 + x) % 11) as f32 / 11.0 - 0.5)
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(ch, size) in &[(8, 64), (32, 32)] {
        let x = input((4, ch, size, size));
        let w = input((ch, ch, 3, 3));
        let b = input((1, ch, 1, 1));
        group.bench_with_input(BenchmarkId::new("forward", format!("{ch}ch_{size}px")), &(), |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, w, b) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
                tape.conv2d(x, w, b, 1, 1).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", format!("{ch}ch_{size}px")), &(), |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone().with_requires_grad(true));
                let wv = tape.leaf(w.clone().with_requires_grad(true));
                let bv = tape.leaf(b.clone().with_requires_grad(true));
                let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default(), 0).unwrap();
    let batch = input((4, 3, 64, 64));
    c.bench_function("model_predict_4x64x64", |b| b.iter(|| model.predict(&batch).unwrap()));
}

criterion_group!(benches, conv, model_forward);
criterion_main!(benches);
