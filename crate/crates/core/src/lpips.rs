//! Perceptual feature distance over a fixed, randomly initialized
//! convolutional pyramid.
//!
//! Features are tapped after each stage, unit-normalized across channels at
//! every spatial location, and compared by mean squared distance, summed
//! over stages. The weights are drawn once from the experiment seed and
//! frozen; they are stored in checkpoints so runs remain reproducible.

use ndarray::{Array1, Array4, NdFloat};
use rand_chacha::ChaCha8Rng;

use crate::nn::{nested_names, Conv2d, Module};
use crate::ops;

/// Stage widths of the pyramid (input is RGB).
pub const STAGE_WIDTHS: [usize; 4] = [8, 16, 32, 64];
const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-10;

/// Normalize feature vectors across channels at each location.
fn channel_normalize<F: NdFloat>(x: &Array4<F>) -> (Array4<F>, Array4<F>) {
    let (b, c, h, w) = x.dim();
    let eps = F::from(NORM_EPS).unwrap();
    let mut out = x.clone();
    let mut norms = Array4::<F>::zeros((b, 1, h, w));
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let mut s = F::zero();
                for ci in 0..c {
                    let v = x[(bi, ci, y, xx)];
                    s += v * v;
                }
            let n = (s + eps).sqrt();
                norms[(bi, 0, y, xx)] = n;
                for ci in 0..c {
                    out[(bi, ci, y, xx)] = x[(bi, ci, y, xx)] / n;
                }
            }
        }
    }
    (out, norms)
}

/// Forward distance plus everything needed for the backward pass.
struct StageTapes<F: NdFloat> {
    pre_a: Vec<Array4<F>>,
    taps_a: Vec<Array4<F>>,
    hat_a: Vec<Array4<F>>,
    norms_a: Vec<Array4<F>>,
    hat_b: Vec<Array4<F>>,
    inputs_a: Vec<Array4<F>>,
}

fn run<F: NdFloat>(
    weights: &[Array4<F>],
    biases: &[Array1<F>],
    a: &Array4<F>,
    b: &Array4<F>,
) -> (F, StageTapes<F>) {
    let slope = F::from(SLOPE).unwrap();
    let mut tapes = StageTapes {
        pre_a: Vec::new(),
        taps_a: Vec::new(),
        hat_a: Vec::new(),
        norms_a: Vec::new(),
        hat_b: Vec::new(),
        inputs_a: Vec::new(),
    };
    let mut total = F::zero();
    let mut xa = a.clone();
    let mut xb = b.clone();
    for (w, bias) in weights.iter().zip(biases) {
        tapes.inputs_a.push(xa.clone());
        let za = ops::conv2d(&xa, w, bias, 2, 1);
        let zb = ops::conv2d(&xb, w, bias, 2, 1);
        let ta = ops::leaky_relu(&za, slope);
        let tb = ops::leaky_relu(&zb, slope);
        let (ha, na) = channel_normalize(&ta);
        let (hb, _) = channel_normalize(&tb);
        let diff = &ha - &hb;
        let n = F::from(diff.len()).unwrap();
        total += diff.iter().fold(F::zero(), |acc, &v| acc + v * v) / n;
        tapes.pre_a.push(za);
        tapes.taps_a.push(ta);
        tapes.hat_a.push(ha);
        tapes.norms_a.push(na);
        tapes.hat_b.push(hb);
        xa = tapes.taps_a.last().unwrap().clone();
        xb = tb;
    }
    (total, tapes)
}

/// Distance only.
pub fn lpips_forward<F: NdFloat>(
    weights: &[Array4<F>],
    biases: &[Array1<F>],
    a: &Array4<F>,
    b: &Array4<F>,
) -> F {
    run(weights, biases, a, b).0
}

/// Distance and its gradient with respect to the first image.
pub fn lpips_with_grad<F: NdFloat>(
    weights: &[Array4<F>],
    biases: &[Array1<F>],
    a: &Array4<F>,
    b: &Array4<F>,
) -> (F, Array4<F>) {
    let slope = F::from(SLOPE).unwrap();
    let (total, tapes) = run(weights, biases, a, b);
    let stages = weights.len();
    let two = F::from(2.0).unwrap();

    // gradient of the per-stage distance w.r.t. the normalized tap of `a`
    let mut d_running: Option<Array4<F>> = None;
    for l in (0..stages).rev() {
        let hat_a = &tapes.hat_a[l];
        let hat_b = &tapes.hat_b[l];
        let n = F::from(hat_a.len()).unwrap();
        let d_hat = (hat_a - hat_b).mapv(|v| two * v / n);

        // through the channel normalization: df = (g - hat (hat . g)) / n
        let (bdim, c, h, w) = hat_a.dim();
        let mut d_tap = Array4::<F>::zeros(hat_a.raw_dim());
        for bi in 0..bdim {
            for y in 0..h {
                for xx in 0..w {
                    let mut dot = F::zero();
                    for ci in 0..c {
                        dot += hat_a[(bi, ci, y, xx)] * d_hat[(bi, ci, y, xx)];
                    }
                    let norm = tapes.norms_a[l][(bi, 0, y, xx)];
                    for ci in 0..c {
                        d_tap[(bi, ci, y, xx)] =
                            (d_hat[(bi, ci, y, xx)] - hat_a[(bi, ci, y, xx)] * dot) / norm;
                    }
                }
            }
        }
        if let Some(prev) = d_running.take() {
            d_tap += &prev;
        }
        let d_pre = ops::leaky_relu_backward(&tapes.pre_a[l], &d_tap, slope);
        let (_, _, ih, iw) = tapes.inputs_a[l].dim();
        d_running = Some(ops::conv2d_backward_data(&weights[l], &d_pre, (ih, iw), 2, 1));
    }
    (total, d_running.unwrap())
}

/// Frozen f32 pyramid used during training.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    pub convs: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for &cout in &STAGE_WIDTHS {
            convs.push(Conv2d::new(rng, cin, cout, 3, 2, 1));
            cin = cout;
        }
        PerceptualNet { convs }
    }

    fn weights(&self) -> (Vec<Array4<f32>>, Vec<Array1<f32>>) {
        (
            self.convs.iter().map(|c| c.w.clone()).collect(),
            self.convs.iter().map(|c| c.b.clone()).collect(),
        )
    }

    pub fn distance(&self, a: &Array4<f32>, b: &Array4<f32>) -> f32 {
        let (w, bias) = self.weights();
        lpips_forward(&w, &bias, a, b)
    }

    pub fn distance_with_grad(&self, a: &Array4<f32>, b: &Array4<f32>) -> (f32, Array4<f32>) {
        let (w, bias) = self.weights();
        lpips_with_grad(&w, &bias, a, b)
    }
}

impl Module for PerceptualNet {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            names.extend(nested_names(&format!("conv{i}"), c));
        }
        names
    }
    fn param_views(&self) -> Vec<ndarray::ArrayViewD<'_, f32>> {
        self.convs.iter().flat_map(|c| c.param_views()).collect()
    }
    fn param_views_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f32>> {
        self.convs.iter_mut().flat_map(|c| c.param_views_mut()).collect()
    }
}

/// f64 copies of frozen weights, for gradient checks.
pub fn weights_f64(net: &PerceptualNet) -> (Vec<Array4<f64>>, Vec<Array1<f64>>) {
    (
        net.convs.iter().map(|c| c.w.mapv(|v| v as f64)).collect(),
        net.convs.iter().map(|c| c.b.mapv(|v| v as f64)).collect(),
    )
}
