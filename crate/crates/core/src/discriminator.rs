//! Piecewise-linear convolutional critic with an R1 gradient penalty.
//!
//! The stack is strided convolutions with leaky-relu activations and no
//! normalization, so the network is piecewise linear in its input. That
//! structure makes the R1 penalty differentiable with the activation masks
//! held fixed: the input gradient is a chain of transposed convolutions
//! through constant masks, and the penalty's parameter gradient is the
//! mirrored chain of masked forward convolutions. Almost everywhere this
//! equals the exact second-derivative computation.

use ndarray::{Array1, Array4, NdFloat};
use rand_chacha::ChaCha8Rng;

use crate::nn::{nested_names, Conv2d, Module};
use crate::ops;

/// Generic conv stack: every layer but the last is followed by leaky relu;
/// the last produces one logit per sample.
#[derive(Debug, Clone)]
pub struct DiscStack<F> {
    pub ws: Vec<Array4<F>>,
    pub bs: Vec<Array1<F>>,
    pub strides: Vec<usize>,
    pub pads: Vec<usize>,
    pub slope: F,
}

pub struct DiscCache<F> {
    /// Input of each conv layer.
    inputs: Vec<Array4<F>>,
    /// Pre-activation of each non-final layer.
    pre: Vec<Array4<F>>,
    pub logits: Array1<F>,
}

/// Parameter gradients of the stack, same shapes as the parameters.
pub struct DiscGrads<F> {
    pub dws: Vec<Array4<F>>,
    pub dbs: Vec<Array1<F>>,
}

impl<F: NdFloat> DiscStack<F> {
    pub fn zero_grads(&self) -> DiscGrads<F> {
        DiscGrads {
            dws: self.ws.iter().map(|w| Array4::zeros(w.raw_dim())).collect(),
            dbs: self.bs.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array1<F>, DiscCache<F>) {
        let layers = self.ws.len();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers - 1);
        let mut cur = x.clone();
        for l in 0..layers {
            inputs.push(cur.clone());
            let z = ops::conv2d(&cur, &self.ws[l], &self.bs[l], self.strides[l], self.pads[l]);
            if l + 1 == layers {
                let (b, c, h, w) = z.dim();
                assert_eq!((c, h, w), (1, 1, 1), "final layer must reduce to one logit");
                let logits = Array1::from_iter((0..b).map(|bi| z[(bi, 0, 0, 0)]));
                return (
                    logits.clone(),
                    DiscCache {
                        inputs,
                        pre,
                        logits,
                    },
                );
            }
            pre.push(z.clone());
            cur = ops::leaky_relu(&z, self.slope);
        }
        unreachable!("stack must contain at least one layer")
    }

    /// Standard backward from per-sample logit gradients. Returns the input
    /// gradient and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &DiscCache<F>,
        d_logits: &Array1<F>,
        grads: &mut DiscGrads<F>,
    ) -> Array4<F> {
        let layers = self.ws.len();
        let b = d_logits.len();
        let mut d_cur = Array4::<F>::zeros((b, 1, 1, 1));
        for bi in 0..b {
            d_cur[(bi, 0, 0, 0)] = d_logits[bi];
        }
        for l in (0..layers).rev() {
            let d_z = if l + 1 == layers {
                d_cur
            } else {
                ops::leaky_relu_backward(&cache.pre[l], &d_cur, self.slope)
            };
            let (_, _, kh, kw) = self.ws[l].dim();
            let (dw, db) =
                ops::conv2d_backward_weights(&cache.inputs[l], &d_z, kh, kw, self.strides[l], self.pads[l]);
            grads.dws[l] += &dw;
            grads.dbs[l] += &db;
            let (_, _, ih, iw) = cache.inputs[l].dim();
            d_cur = ops::conv2d_backward_data(&self.ws[l], &d_z, (ih, iw), self.strides[l], self.pads[l]);
        }
        d_cur
    }

    /// Activation-derivative mask of non-final layer `l`.
    fn mask(&self, cache: &DiscCache<F>, l: usize) -> Array4<F> {
        ops::leaky_relu_mask(&cache.pre[l], self.slope)
    }

    /// Per-sample gradient of the logit with respect to the input, plus the
    /// tape of intermediate adjoints needed by [`Self::r1_backward`].
    pub fn input_gradient(&self, cache: &DiscCache<F>) -> (Array4<F>, R1Tape<F>) {
        let layers = self.ws.len();
        let b = cache.logits.len();
        let mut p = Array4::<F>::from_elem((b, 1, 1, 1), F::one());
        let mut tape = Vec::with_capacity(layers);
        for l in (0..layers).rev() {
            tape.push(p.clone()); // adjoint entering layer l (output side)
            let (_, _, ih, iw) = cache.inputs[l].dim();
            let q = ops::conv2d_backward_data(&self.ws[l], &p, (ih, iw), self.strides[l], self.pads[l]);
            p = if l > 0 {
                &self.mask(cache, l - 1) * &q
            } else {
                q
            };
        }
        tape.reverse(); // tape[l] = adjoint at layer l's output
        (p, R1Tape { p: tape })
    }

    /// Accumulate `d/dw` of `penalty = gamma/2 * mean_b sum_pix g^2` given
    /// the input gradient `g`, re-using the adjoint tape. Returns the
    /// penalty value. Biases get no gradient: the input gradient does not
    /// depend on them.
    pub fn r1_backward(
        &self,
        cache: &DiscCache<F>,
        tape: &R1Tape<F>,
        g: &Array4<F>,
        gamma: F,
        grads: &mut DiscGrads<F>,
    ) -> F {
        let layers = self.ws.len();
        let b = F::from(g.dim().0).unwrap();
        let half = F::from(0.5).unwrap();
        let penalty = gamma * half * g.iter().fold(F::zero(), |acc, &v| acc + v * v) / b;

        // s starts as dP/dg and climbs the network through masked forward convs
        let mut s = g.mapv(|v| gamma * v / b);
        for l in 0..layers {
            let (_, _, kh, kw) = self.ws[l].dim();
            let (dw, _) =
                ops::conv2d_backward_weights(&s, &tape.p[l], kh, kw, self.strides[l], self.pads[l]);
            grads.dws[l] += &dw;
            if l + 1 < layers {
                let zero_bias = Array1::<F>::zeros(self.ws[l].dim().0);
                let fwd = ops::conv2d(&s, &self.ws[l], &zero_bias, self.strides[l], self.pads[l]);
                s = &self.mask(cache, l) * &fwd;
            }
        }
        penalty
    }
}

/// Adjoint tape from [`DiscStack::input_gradient`].
pub struct R1Tape<F> {
    p: Vec<Array4<F>>,
}

/// f32 training discriminator for a given image size.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub stack: DiscStack<f32>,
    pub image_size: usize,
}

impl Discriminator {
    /// Strided stack ending in a full-extent valid convolution producing
    /// one logit. Every convolution downsamples, so no feature map is ever
    /// wider than half the image.
    pub fn new(rng: &mut ChaCha8Rng, image_size: usize) -> Self {
        assert!(image_size % 16 == 0, "discriminator expects size divisible by 16");
        let widths = [8usize, 16, 32, 64];
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        let mut strides = Vec::new();
        let mut pads = Vec::new();
        let mut cin = 3;
        for &cout in &widths {
            let conv = Conv2d::new(rng, cin, cout, 3, 2, 1);
            ws.push(conv.w);
            bs.push(conv.b);
            strides.push(2);
            pads.push(1);
            cin = cout;
        }
        let final_k = image_size / 16;
        let conv = Conv2d::new(rng, cin, 1, final_k, 1, 0);
        ws.push(conv.w);
        bs.push(conv.b);
        strides.push(1);
        pads.push(0);
        Discriminator {
            stack: DiscStack {
                ws,
                bs,
                strides,
                pads,
                slope: 0.2,
            },
            image_size,
        }
    }
}

impl Module for Discriminator {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.stack.ws.len() {
            let conv = Conv2d {
                w: self.stack.ws[i].clone(),
                b: self.stack.bs[i].clone(),
                stride: self.stack.strides[i],
                pad: self.stack.pads[i],
            };
            names.extend(nested_names(&format!("conv{i}"), &conv));
        }
        names
    }
    fn param_views(&self) -> Vec<ndarray::ArrayViewD<'_, f32>> {
        let mut v: Vec<ndarray::ArrayViewD<'_, f32>> = Vec::new();
        for i in 0..self.stack.ws.len() {
            v.push(self.stack.ws[i].view().into_dyn());
            v.push(self.stack.bs[i].view().into_dyn());
        }
        v
    }
    fn param_views_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f32>> {
        let mut v: Vec<ndarray::ArrayViewMutD<'_, f32>> = Vec::new();
        for (w, b) in self.stack.ws.iter_mut().zip(self.stack.bs.iter_mut()) {
            v.push(w.view_mut().into_dyn());
            v.push(b.view_mut().into_dyn());
        }
        v
    }
}

/// Apply accumulated stack gradients onto a module-shaped gradient holder.
pub fn fold_disc_grads(grads: &DiscGrads<f32>, holder: &mut Discriminator) {
    for (i, (dw, db)) in grads.dws.iter().zip(grads.dbs.iter()).enumerate() {
        holder.stack.ws[i] += dw;
        holder.stack.bs[i] += db;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;

    /// Tiny f64 stack for finite-difference checks: 8x8 input, three layers.
    fn tiny_stack(seed: u64) -> DiscStack<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mk = |rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            Array4::from_shape_simple_fn((cout, cin, k, k), || randn(rng) * std)
        };
        DiscStack {
            ws: vec![mk(&mut rng, 2, 4, 3), mk(&mut rng, 4, 6, 3), mk(&mut rng, 6, 1, 2)],
            bs: vec![
                Array1::from_shape_simple_fn(4, || randn(&mut rng) * 0.1),
                Array1::from_shape_simple_fn(6, || randn(&mut rng) * 0.1),
                Array1::from_shape_simple_fn(1, || randn(&mut rng) * 0.1),
            ],
            strides: vec![2, 2, 1],
            pads: vec![1, 1, 0],
            slope: 0.2,
        }
    }

    fn tiny_input(seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((2, 2, 8, 8), || randn(&mut rng) * 0.7)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let stack = tiny_stack(1);
        let x = tiny_input(2);
        let (logits, cache) = stack.forward(&x);
        assert_eq!(logits.len(), 2);
        let d_logits = ndarray::arr1(&[1.0, -0.5]);
        let mut grads = stack.zero_grads();
        let dx = stack.backward(&cache, &d_logits, &mut grads);

        let f = |stack: &DiscStack<f64>, x: &Array4<f64>| {
            let (l, _) = stack.forward(x);
            l[0] - 0.5 * l[1]
        };
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 7, 3)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&stack, &xp) - f(&stack, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "dx at {idx:?}");
        }
        for (l, idx) in [(0usize, (2, 1, 1, 1)), (1, (3, 2, 0, 2)), (2, (0, 4, 1, 0))] {
            let mut sp = stack.clone();
            sp.ws[l][idx] += h;
            let mut sm = stack.clone();
            sm.ws[l][idx] -= h;
            let fd = (f(&sp, &x) - f(&sm, &x)) / (2.0 * h);
            assert!(
                (fd - grads.dws[l][idx]).abs() < 1e-6,
                "dw layer {l} at {idx:?}: {fd} vs {}",
                grads.dws[l][idx]
            );
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let stack = tiny_stack(3);
        let x = tiny_input(4);
        let (_, cache) = stack.forward(&x);
        let (g, _) = stack.input_gradient(&cache);
        let h = 1e-6;
        for idx in [(0, 0, 2, 5), (1, 1, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let bi = idx.0;
            let fp = stack.forward(&xp).0[bi];
            let fm = stack.forward(&xm).0[bi];
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "g at {idx:?}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn constant_discriminator_has_zero_r1() {
        let mut stack = tiny_stack(5);
        for w in &mut stack.ws {
            w.fill(0.0);
        }
        let x = tiny_input(6);
        let (_, cache) = stack.forward(&x);
        let (g, tape) = stack.input_gradient(&cache);
        let mut grads = stack.zero_grads();
        let penalty = stack.r1_backward(&cache, &tape, &g, 1.0, &mut grads);
        assert_eq!(penalty, 0.0);
    }

    #[test]
    fn r1_parameter_gradient_matches_finite_differences() {
        let stack = tiny_stack(7);
        let x = tiny_input(8);

        let penalty_of = |stack: &DiscStack<f64>| -> f64 {
            let (_, cache) = stack.forward(&x);
            let (g, _) = stack.input_gradient(&cache);
            let b = g.dim().0 as f64;
            0.5 * g.iter().map(|v| v * v).sum::<f64>() / b
        };

        let (_, cache) = stack.forward(&x);
        let (g, tape) = stack.input_gradient(&cache);
        let mut grads = stack.zero_grads();
        let penalty = stack.r1_backward(&cache, &tape, &g, 1.0, &mut grads);
        assert!((penalty - penalty_of(&stack)).abs() < 1e-12);

        let h = 1e-6;
        for (l, idx) in [
            (0usize, (1, 0, 2, 2)),
            (0, (3, 1, 0, 1)),
            (1, (2, 3, 1, 1)),
            (2, (0, 5, 0, 0)),
        ] {
            let mut sp = stack.clone();
            sp.ws[l][idx] += h;
            let mut sm = stack.clone();
            sm.ws[l][idx] -= h;
            let fd = (penalty_of(&sp) - penalty_of(&sm)) / (2.0 * h);
            let analytic = grads.dws[l][idx];
            assert!(
                (fd - analytic).abs() < 1e-5 * fd.abs().max(1.0),
                "layer {l} at {idx:?}: fd {fd} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn training_discriminator_emits_one_logit_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Discriminator::new(&mut rng, 64);
        let x = Array4::from_shape_simple_fn((3, 3, 64, 64), || randn(&mut rng) as f32 * 0.5);
        let (logits, _) = d.stack.forward(&x);
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|v| v.is_finite()));
    }
}
