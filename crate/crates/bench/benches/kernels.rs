use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use nht_core::codec::{self, Model, QuantFlags};
use nht_core::imageio::synth;
use nht_core::interp::{weights, weights_jacobian, FeatureField, GradientStencil, Interpolation};
use nht_core::mesh::Mesh;
use nht_core::nn::Mlp;
use nht_core::splat2d::{composite_pixel, RenderOptions, Splat, SplatSet};
use nht_core::trainer::{sample_batch, MeshModel, TrainConfig};
use nht_core::{Encoding, MuLawParams};

fn random_mesh(r: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Mesh {
    let mut pts = vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    for _ in 0..n {
        pts.push([r.random_range(0.0..w), r.random_range(0.0..h)]);
    }
    Mesh::from_points(w, h, pts).unwrap()
}

fn interpolation(c: &mut Criterion) {
    let v = [[0.0, 0.0], [3.0, 0.5], [1.0, 2.5]];
    let p = [1.2, 0.9];
    c.bench_function("ct_weights", |b| {
        b.iter(|| weights(Interpolation::CloughTocher, black_box(v), black_box(p)))
    });
    c.bench_function("ct_weights_jacobian", |b| {
        b.iter(|| weights_jacobian(Interpolation::CloughTocher, black_box(v), black_box(p)))
    });
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mesh = random_mesh(&mut r, 5000, 1024.0, 1024.0);
    let feats: Vec<f32> = (0..mesh.num_vertices() * 8).map(|_| r.random_range(-1.0..1.0)).collect();
    let stencil = GradientStencil::new(&mesh);
    c.bench_function("vertex_gradients_5k", |b| b.iter(|| stencil.apply(black_box(&feats), 8)));
    let queries: Vec<[f64; 2]> = (0..1024).map(|_| [r.random_range(0.0..1024.0), r.random_range(0.0..1024.0)]).collect();
    c.bench_function("mesh_locate_1k", |b| {
        b.iter(|| queries.iter().map(|&q| mesh.locate(q).unwrap().0).sum::<usize>())
    });
}

fn decoder(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mlp = Mlp::<f32>::init(&[16, 64, 64, 3], &mut r).unwrap();
    let x: Vec<f32> = (0..16 * 4096).map(|_| r.random_range(-1.0..1.0)).collect();
    c.bench_function("mlp_forward_4096", |b| b.iter(|| mlp.infer(black_box(&x)).unwrap()));
    let cache = mlp.forward(&x).unwrap();
    let g = vec![1e-3f32; 3 * 4096];
    let mut gp = vec![0f32; mlp.num_params()];
    c.bench_function("mlp_backward_4096", |b| b.iter(|| mlp.backward(&cache, black_box(&g), &mut gp).unwrap()));
}

fn compositor(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let n_f = 8;
    let splats = (0..64)
        .map(|_| Splat {
            mean: [r.random_range(0.0..64.0), r.random_range(0.0..64.0)],
            theta: r.random_range(-3.0..3.0),
            scales: [r.random_range(1.0..8.0), r.random_range(1.0..8.0)],
            opacity: r.random_range(0.1..0.9),
            z: r.random_range(0.0..1.0),
            features: std::array::from_fn(|_| (0..n_f).map(|_| r.random_range(-1.0..1.0)).collect()),
        })
        .collect();
    let set = SplatSet::new(n_f, splats).unwrap();
    let order = set.depth_order();
    let opts = RenderOptions::default();
    c.bench_function("composite_pixel_64", |b| {
        b.iter(|| composite_pixel(&set, &order, black_box([31.5, 20.5]), [0.0, 0.0, 1.0], &opts))
    });
}

fn sampling_and_codec(c: &mut Criterion) {
    let img = synth::landscape(512, 512, 1);
    let mu = TrainConfig::default().mulaw(img.white_level).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    c.bench_function("sample_batch_8192", |b| b.iter(|| sample_batch(&mut r, &img, mu, 8192)));

    let mesh = random_mesh(&mut r, 4000, 512.0, 512.0);
    let feats: Vec<f32> = (0..mesh.num_vertices() * 8).map(|_| r.random_range(-2.0..2.0)).collect();
    let model = Model::Mesh(MeshModel {
        width: 512,
        height: 512,
        mulaw: MuLawParams::default(),
        interpolation: Interpolation::CloughTocher,
        encoding: Encoding::SinCos,
        field: FeatureField::new(8, feats).unwrap(),
        mesh,
        mlp: Mlp::init(&[16, 64, 64, 3], &mut r).unwrap(),
    });
    let mut g = c.benchmark_group("codec");
    g.sample_size(10);
    g.bench_function("serialize_all_4k", |b| b.iter(|| codec::serialize(&model, QuantFlags::ALL).unwrap()));
    let bytes = codec::serialize(&model, QuantFlags::ALL).unwrap();
    g.bench_function("deserialize_all_4k", |b| {
        b.iter_batched(|| bytes.clone(), |x| codec::deserialize(&x).unwrap(), BatchSize::SmallInput)
    });
    g.finish();
}

criterion_group!(benches, interpolation, decoder, compositor, sampling_and_codec);
criterion_main!(benches);
