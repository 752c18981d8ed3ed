use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use idlat::blocking::{partition, reassemble_blocks, BlockSpec};
use idlat::codec::{compress_volume, entropy_decode, entropy_encode, Pmf};
use idlat::importance::{importance_from_isosurface, ImportanceMap};
use idlat::network::{Model, ModelConfig};
use idlat::nn::ops::conv3d;
use idlat::nn::{ConvGeometry, Padding, Tensor};
use idlat::volume::{synthetic_blobs, Dims};

fn gaussian_pmf(scale: f64) -> Pmf {
    let probs: Vec<f64> = (-127..=127)
        .map(|s: i32| (-0.5 * (s as f64 / scale).powi(2)).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    Pmf::new(-127, probs.into_iter().map(|p| p / total).collect())
}

fn rans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let pmfs: Vec<Pmf> = (0..16).map(|i| gaussian_pmf(0.5 + i as f64)).collect();
    let per_symbol: Vec<Pmf> = (0..n).map(|i| pmfs[i % pmfs.len()].clone()).collect();
    let symbols: Vec<i32> = (0..n)
        .map(|i| ((rng.gen::<f64>() - 0.5) * (1.0 + (i % 16) as f64)).round() as i32)
        .collect();
    let bytes = entropy_encode(&symbols, &per_symbol).unwrap();
    let mut g = c.benchmark_group("rans");
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("encode", |b| {
        b.iter(|| entropy_encode(black_box(&symbols), &per_symbol).unwrap())
    });
    g.bench_function("decode", |b| {
        b.iter(|| entropy_decode(black_box(&bytes), &per_symbol).unwrap())
    });
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = c.benchmark_group("conv3d");
    for (cin, cout, edge, stride) in [(1, 32, 24, 2), (32, 64, 12, 2), (16, 16, 12, 1)] {
        let x = Tensor::new(
            vec![cin, edge, edge, edge],
            (0..cin * edge.pow(3)).map(|_| rng.gen()).collect(),
        )
        .unwrap();
        let w = Tensor::new(
            vec![cout, cin, 3, 3, 3],
            (0..cout * cin * 27).map(|_| rng.gen()).collect(),
        )
        .unwrap();
        let bias = Tensor::zeros(&[cout]);
        let geom = ConvGeometry {
            kernel: 3,
            stride,
            pad: 1,
            padding: Padding::Replicate,
        };
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{cin}x{edge}^3->{cout}/s{stride}")),
            &x,
            |b, x| b.iter(|| conv3d(black_box(x), &w, &bias, geom)),
        );
    }
    g.finish();
}

fn blocks(c: &mut Criterion) {
    let v = synthetic_blobs(Dims::cube(64), 20, 0.01, 2);
    let imp = ImportanceMap::constant(v.dims, 1.0);
    let spec = BlockSpec::new(16, 4).unwrap();
    let parts = partition(&v, &imp, &spec).unwrap();
    let mut g = c.benchmark_group("blocking");
    g.throughput(Throughput::Elements(v.dims.len() as u64));
    g.bench_function("partition_64^3", |b| {
        b.iter(|| partition(black_box(&v), &imp, &spec).unwrap())
    });
    g.bench_function("reassemble_64^3", |b| {
        b.iter(|| reassemble_blocks(black_box(&parts), &spec, v.dims).unwrap())
    });
    g.bench_function("isosurface_importance_64^3", |b| {
        b.iter(|| importance_from_isosurface(black_box(&v), 0.1, 0.2).unwrap())
    });
    g.finish();
}

fn codec(c: &mut Criterion) {
    let v = synthetic_blobs(Dims::cube(32), 24, 0.02, 1);
    let imp = ImportanceMap::constant(v.dims, 1.0);
    let model = Model::new(ModelConfig::desk(8), BlockSpec::new(8, 2).unwrap()).unwrap();
    let mut g = c.benchmark_group("codec");
    g.sample_size(10);
    g.bench_function("compress_32^3_desk", |b| {
        b.iter(|| compress_volume(black_box(&v), &imp, &model).unwrap())
    });
    g.finish();
}

criterion_group!(benches, rans, conv, blocks, codec);
criterion_main!(benches);
