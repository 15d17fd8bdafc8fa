//! Discriminator phase breakdown.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use shapeswap_core::discriminator::Discriminator;

fn time<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) {
    for _ in 0..2 {
        std::hint::black_box(f());
    }
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!("{label:30} {:8.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = Discriminator::new(&mut rng, 64);
    let real = Array4::from_shape_simple_fn((8, 3, 64, 64), || rng.gen_range(-1.0..1.0f32));
    time("forward", 10, || d.stack.forward(&real));
    let (logits, cache) = d.stack.forward(&real);
    let dl = logits.mapv(|_| 1.0f32);
    time("backward", 10, || {
        let mut g = d.stack.zero_grads();
        d.stack.backward(&cache, &dl, &mut g)
    });
    time("input_gradient", 10, || d.stack.input_gradient(&cache));
    let (g, tape) = d.stack.input_gradient(&cache);
    time("r1_backward", 10, || {
        let mut grads = d.stack.zero_grads();
        d.stack.r1_backward(&cache, &tape, &g, 1.0, &mut grads)
    });
}
