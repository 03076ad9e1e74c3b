//! Criterion benchmarks for the numeric hot paths.

use criterion::{criterion_group, criterion_main, Criterion};
use hdrcycle_core::autograd::Graph;
use hdrcycle_core::discriminator::{Discriminator, DiscriminatorConfig};
use hdrcycle_core::generator::{Direction, FusionInputs, Generator, GeneratorConfig};
use hdrcycle_core::imagecore::{equalize_histogram, HdrImage, LdrImage};
use hdrcycle_core::metrics::ssim;
use hdrcycle_core::nn::{init_rng, ParamStore};
use hdrcycle_core::semantics::{miou, SegMask, Segmenter, StandInEncoder, StubSegmenter, EmbeddingEncoder};
use hdrcycle_core::tonemap::{mu_law, normalize_peak, ToneMapParams};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pixels(seed: u64, h: usize, w: usize) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0f32..1.0))
}

fn bench_conv(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = init_rng(0);
    let conv = hdrcycle_core::nn::Conv2d::new(&mut store, "w", 32, 32, 3, 1, 1, 1, true, &mut rng);
    let g = Graph::new();
    let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 32, 64, 64]), 0.3f32));
    c.bench_function("conv2d 32->32 @64x64 fwd", |b| {
        b.iter(|| conv.forward(&g, &x))
    });
    c.bench_function("conv2d 32->32 @64x64 fwd+bwd", |b| {
        b.iter(|| {
            let g = Graph::new();
            let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 32, 64, 64]), 0.3f32));
            let y = conv.forward(&g, &x).mean_all();
            g.backward(&y)
        })
    });
}

fn bench_generator(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = init_rng(0);
    let gen = Generator::new(
        &mut store,
        "gY",
        GeneratorConfig::toy(Direction::LdrToHdr),
        &mut rng,
    )
    .unwrap();
    let x = random_pixels(1, 64, 64);
    c.bench_function("toy generator infer @64x64", |b| {
        b.iter(|| gen.infer(&x, &FusionInputs::neutral()).unwrap())
    });
}

fn bench_discriminator(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut rng = init_rng(0);
    let disc =
        Discriminator::new(&mut store, "dY", DiscriminatorConfig::toy(), &mut rng).unwrap();
    let g = Graph::new();
    let x = g.constant(random_pixels(2, 64, 64).into_shape(IxDyn(&[1, 3, 64, 64])).unwrap());
    c.bench_function("toy discriminator fwd @64x64", |b| {
        b.iter(|| disc.forward(&g, &x, false).unwrap())
    });
}

fn bench_tonemap(c: &mut Criterion) {
    let hdr = HdrImage::new(random_pixels(3, 256, 256).mapv(|v| v * 10.0)).unwrap();
    let params = ToneMapParams::default();
    c.bench_function("mu-law tonemap 256x256", |b| {
        b.iter(|| {
            let (scaled, _) = normalize_peak(&hdr);
            mu_law(&scaled, params).unwrap()
        })
    });
}

fn bench_equalize(c: &mut Criterion) {
    let img = LdrImage::new(random_pixels(4, 256, 256), 8).unwrap();
    c.bench_function("histogram equalize 256x256", |b| b.iter(|| equalize_histogram(&img)));
}

fn bench_metrics(c: &mut Criterion) {
    let a = random_pixels(5, 128, 128);
    let b2 = random_pixels(6, 128, 128);
    c.bench_function("ssim 128x128", |b| b.iter(|| ssim(&a, &b2).unwrap()));
}

fn bench_semantics(c: &mut Criterion) {
    let seg = StubSegmenter::default();
    let img = random_pixels(7, 128, 128);
    c.bench_function("stub segmenter 128x128", |b| b.iter(|| seg.segment(&img).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let la = Array2::from_shape_fn((128, 128), |_| rng.gen_range(0u32..4));
    let lb = Array2::from_shape_fn((128, 128), |_| rng.gen_range(0u32..4));
    let a = SegMask::new(la, 4).unwrap();
    let b2 = SegMask::new(lb, 4).unwrap();
    c.bench_function("miou 4 classes 128x128", |b| b.iter(|| miou(&a, &b2).unwrap()));

    let enc = StandInEncoder::new(0);
    let img64 = random_pixels(9, 64, 64);
    c.bench_function("stand-in encoder 64x64", |b| b.iter(|| enc.encode(&img64).unwrap()));
}

criterion_group!(
    benches,
    bench_conv,
    bench_generator,
    bench_discriminator,
    bench_tonemap,
    bench_equalize,
    bench_metrics,
    bench_semantics
);
criterion_main!(benches);
