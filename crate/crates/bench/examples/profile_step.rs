//! Rough wall-clock breakdown of one training-step-equivalent of work.

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use shapeswap_core::discriminator::Discriminator;
use shapeswap_core::generator::{Generator, GeneratorConfig, SwapGrads, Variant};
use shapeswap_core::losses::discriminator_phase;
use shapeswap_core::nn::zeroed;
use shapeswap_core::ops;

fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0f32))
}

fn time<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) {
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!("{label:38} {:8.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for base in [8usize, 12, 16] {
        println!("--- base_channels = {base}");
        let gen = Generator::new(
            &mut rng,
            GeneratorConfig {
                image_size: 64,
                base_channels: base,
                sid_dim: 62,
                upsample_stages: 2,
                variant: Variant::Full,
            },
        )
        .unwrap();
        let i_t = rand4(&mut rng, (8, 3, 64, 64));
        let sid = Array2::from_shape_simple_fn((8, 62), || rng.gen_range(-1.0..1.0f32));
        time("gen forward", 5, || gen.forward(&i_t, &sid).unwrap());
        let cache = gen.forward(&i_t, &sid).unwrap();
        let ext = SwapGrads {
            d_i_r: rand4(&mut rng, (8, 3, 64, 64)),
            d_i_low: rand4(&mut rng, (8, 3, 16, 16)),
            d_m_low: rand4(&mut rng, (8, 1, 16, 16)),
            d_m_r: rand4(&mut rng, (8, 1, 64, 64)),
        };
        time("gen backward", 5, || {
            let mut grads = zeroed(&gen);
            gen.backward(&cache, &ext, &mut grads)
        });
    }

    println!("--- pieces at base 8");
    let x = rand4(&mut rng, (8, 8, 64, 64));
    let w = rand4(&mut rng, (8, 8, 3, 3));
    let b = Array1::<f32>::zeros(8);
    time("conv 8ch@64 fwd", 20, || ops::conv2d(&x, &w, &b, 1, 1));
    let dy = rand4(&mut rng, (8, 8, 64, 64));
    time("conv 8ch@64 bwd_w", 20, || {
        ops::conv2d_backward_weights(&x, &dy, 3, 3, 1, 1)
    });
    time("conv 8ch@64 bwd_d", 20, || {
        ops::conv2d_backward_data(&w, &dy, (64, 64), 1, 1)
    });
    time("instance_norm fwd", 20, || ops::instance_norm(&x, 1e-5f32));
    let cache = ops::instance_norm(&x, 1e-5f32);
    time("instance_norm bwd", 20, || {
        ops::instance_norm_backward(&cache, &dy)
    });
    time("lrelu fwd", 20, || ops::leaky_relu(&x, 0.2));
    time("upsample x2", 20, || ops::upsample_nearest(&x, 2));

    let mut drng = ChaCha8Rng::seed_from_u64(2);
    let d = Discriminator::new(&mut drng, 64);
    let real = rand4(&mut rng, (8, 3, 64, 64));
    let fake = rand4(&mut rng, (8, 3, 64, 64));
    time("disc phase (w=16..128)", 5, || {
        discriminator_phase(&d.stack, &real, &fake, 1.0).unwrap()
    });
}
