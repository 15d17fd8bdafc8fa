//! Criterion benchmarks for the hot paths: convolution, generator
//! forward/backward, rendering, and a full discriminator phase.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shapeswap_core::generator::{Generator, GeneratorConfig, SwapGrads, Variant};
use shapeswap_core::losses::discriminator_phase;
use shapeswap_core::nn::zeroed;
use shapeswap_core::discriminator::Discriminator;
use shapeswap_core::ops;
use shapeswap_core::world::{build_world, WorldSpec};

fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0f32))
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand4(&mut rng, (8, 32, 16, 16));
    let w = rand4(&mut rng, (32, 32, 3, 3));
    let b = ndarray::Array1::zeros(32);
    c.bench_function("conv2d_32x16x16_b8", |bench| {
        bench.iter(|| ops::conv2d(&x, &w, &b, 1, 1))
    });
}

fn bench_generator(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = Generator::new(
        &mut rng,
        GeneratorConfig {
            image_size: 64,
            base_channels: 8,
            sid_dim: 62,
            upsample_stages: 2,
            variant: Variant::Full,
        },
    )
    .unwrap();
    let i_t = rand4(&mut rng, (8, 3, 64, 64));
    let sid = Array2::from_shape_simple_fn((8, 62), || rng.gen_range(-1.0..1.0f32));

    c.bench_function("generator_forward_b8_64", |bench| {
        bench.iter(|| gen.forward(&i_t, &sid).unwrap())
    });

    let cache = gen.forward(&i_t, &sid).unwrap();
    let ext = SwapGrads {
        d_i_r: rand4(&mut rng, (8, 3, 64, 64)),
        d_i_low: rand4(&mut rng, (8, 3, 16, 16)),
        d_m_low: rand4(&mut rng, (8, 1, 16, 16)),
        d_m_r: rand4(&mut rng, (8, 1, 64, 64)),
    };
    c.bench_function("generator_backward_b8_64", |bench| {
        bench.iter(|| {
            let mut grads = zeroed(&gen);
            gen.backward(&cache, &ext, &mut grads)
        })
    });
}

fn bench_discriminator_phase(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = Discriminator::new(&mut rng, 64);
    let real = rand4(&mut rng, (8, 3, 64, 64));
    let fake = rand4(&mut rng, (8, 3, 64, 64));
    c.bench_function("discriminator_phase_b8_64", |bench| {
        bench.iter(|| discriminator_phase(&d.stack, &real, &fake, 1.0).unwrap())
    });
}

fn bench_render(c: &mut Criterion) {
    let world = build_world(&WorldSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("render_sample_64", |bench| {
        bench.iter(|| world.sample_with_identity(7, &mut rng))
    });
}

criterion_group!(
    benches,
    bench_conv,
    bench_generator,
    bench_discriminator_phase,
    bench_render
);
criterion_main!(benches);
