//! Raw GEMM formulation comparison for the conv backward shapes.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn time<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) {
    // warm up
    for _ in 0..3 {
        std::hint::black_box(f());
    }
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!("{label:44} {:8.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 8 * 64 * 64; // batch-8 at 64x64
    let ck = 72; // 8 channels * 3x3
    let cout = 8;
    let cols = Array2::from_shape_simple_fn((ck, n), || rng.gen_range(-1.0..1.0f32));
    let dymat = Array2::from_shape_simple_fn((cout, n), || rng.gen_range(-1.0..1.0f32));
    let wmat = Array2::from_shape_simple_fn((cout, ck), || rng.gen_range(-1.0..1.0f32));

    time("fwd: (Cout,CK).(CK,N)", 30, || wmat.dot(&cols));
    time("bwd_w A: (Cout,N).(N,CK) via cols.t()", 30, || dymat.dot(&cols.t()));
    time("bwd_w B: (CK,N).(N,Cout) via dymat.t()", 30, || cols.dot(&dymat.t()));
    time("bwd_d: (CK,Cout).(Cout,N) via wmat.t()", 30, || wmat.t().dot(&dymat));
    let wt = wmat.t().as_standard_layout().into_owned();
    time("bwd_d owned wt: (CK,Cout).(Cout,N)", 30, || wt.dot(&dymat));
    // quarter-res shapes: 32ch
    let n2 = 8 * 16 * 16;
    let ck2 = 288;
    let cout2 = 32;
    let cols2 = Array2::from_shape_simple_fn((ck2, n2), || rng.gen_range(-1.0..1.0f32));
    let dymat2 = Array2::from_shape_simple_fn((cout2, n2), || rng.gen_range(-1.0..1.0f32));
    time("q fwd (32,288).(288,2048)", 30, || {
        Array2::from_shape_simple_fn((cout2, ck2), || 0.1f32).dot(&cols2)
    });
    time("q bwd_w A (32,2048).(2048,288)", 30, || dymat2.dot(&cols2.t()));
    time("q bwd_w B (288,2048).(2048,32)", 30, || cols2.dot(&dymat2.t()));
}
