//! Criterion benchmarks for the hot kernels: convolutions, the bidirectional
//! attention unit, and a full segmentation forward pass.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use awlab_core::nn::Conv2d;
use awlab_core::order::{predict, BiAttnUnit, OrderConfig, OrderNetwork};
use awlab_core::rng::{normal_vec, substream};
use awlab_core::{ParamStore, Tape, Tensor};

fn rand_tensor(seed: u64, label: &str, shape: &[usize]) -> Tensor {
    let mut rng = substream(seed, label);
    Tensor::new(shape.to_vec(), normal_vec(&mut rng, shape.iter().product())).unwrap()
}

fn bench_conv2d(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = substream(1, "init");
    let layer = Conv2d::new(&mut store, &mut rng, "c", 16, 16, 3, 1, 1);
    let x = rand_tensor(1, "x", &[4, 16, 64, 64]);
    c.bench_function("conv2d 3x3 16->16 @64 forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let y = layer.forward(&mut tape, &store, black_box(xv)).unwrap();
            black_box(tape.value(y).data()[0])
        })
    });
    c.bench_function("conv2d 3x3 16->16 @64 forward+backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let y = layer.forward(&mut tape, &store, black_box(xv)).unwrap();
            let l = tape.mean_all(y).unwrap();
            tape.backward(l).unwrap();
            black_box(tape.param_grads().len())
        })
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = substream(2, "init");
    let unit = BiAttnUnit::new(&mut store, &mut rng, "u", 8, 40, 8);
    let d = rand_tensor(2, "d", &[4, 8, 64, 64]);
    let e = rand_tensor(2, "e", &[4, 8, 64, 64]);
    c.bench_function("biattn unit c=8 d=40 @64 forward", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let dv = tape.constant(d.clone()).unwrap();
            let ev = tape.constant(e.clone()).unwrap();
            let out = unit.forward(&mut tape, &store, black_box(dv), ev, None).unwrap();
            black_box(tape.value(out.d_out).data()[0])
        })
    });
}

fn bench_network(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let network = OrderNetwork::new(&mut store, OrderConfig::default(), 3).unwrap();
    let image = rand_tensor(3, "img", &[1, 64, 64]);
    c.bench_function("segmentation forward @64", |b| {
        b.iter(|| black_box(predict(&store, &network, black_box(&image)).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_conv2d, bench_attention, bench_network
}
criterion_main!(benches);
