//! The complete training objective, term by term.
//!
//! Every term is a generic free function so the f32 training path and the
//! f64 oracle / finite-difference checks share one implementation. All L1
//! norms are means over elements, so the loss weights transfer across
//! resolutions. Gradients of L1 terms use the sign subgradient with zero at
//! ties.
//!
//! The shape-identity total is `lambda_shape * shape + lambda_id * id`; the
//! realism total is `adv_g + l0 * seg + l1 * rec + l2 * cyc + l3 * lpips`;
//! the full objective is their sum.

use ndarray::{Array1, Array2, Array4, NdFloat};
use serde::{Deserialize, Serialize};

use crate::discriminator::{DiscGrads, DiscStack};
use crate::error::{Error, Result};
use crate::ops;

/// Loss weights with the published defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_shape: f64,
    pub lambda_id: f64,
    pub lambda0_seg: f64,
    pub lambda1_rec: f64,
    pub lambda2_cyc: f64,
    pub lambda3_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_shape: 0.5,
            lambda_id: 5.0,
            lambda0_seg: 100.0,
            lambda1_rec: 20.0,
            lambda2_cyc: 1.0,
            lambda3_lpips: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_shape", self.lambda_shape),
            ("lambda_id", self.lambda_id),
            ("lambda0_seg", self.lambda0_seg),
            ("lambda1_rec", self.lambda1_rec),
            ("lambda2_cyc", self.lambda2_cyc),
            ("lambda3_lpips", self.lambda3_lpips),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Named scalar per loss term, plus the weighted totals.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub shape: f64,
    pub id: f64,
    pub seg: f64,
    pub rec: f64,
    pub cyc: f64,
    pub lpips: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub r1: f64,
    pub total_sid: f64,
    pub total_real: f64,
    pub total: f64,
}

impl LossReport {
    /// Fill the weighted totals from the stored components.
    pub fn finalize(mut self, w: &LossWeights) -> LossReport {
        self.total_sid = w.lambda_shape * self.shape + w.lambda_id * self.id;
        self.total_real = self.adv_g
            + w.lambda0_seg * self.seg
            + w.lambda1_rec * self.rec
            + w.lambda2_cyc * self.cyc
            + w.lambda3_lpips * self.lpips;
        self.total = self.total_sid + self.total_real;
        self
    }

    pub fn all_finite(&self) -> bool {
        [
            self.shape, self.id, self.seg, self.rec, self.cyc, self.lpips, self.adv_g,
            self.adv_d, self.r1, self.total_sid, self.total_real, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn sign<F: NdFloat>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

/// Mean absolute difference over all elements.
fn l1_mean<F: NdFloat, D: ndarray::Dimension>(
    a: &ndarray::Array<F, D>,
    b: &ndarray::Array<F, D>,
) -> F {
    let n = F::from(a.len()).unwrap();
    a.iter()
        .zip(b.iter())
        .fold(F::zero(), |acc, (&x, &y)| acc + (x - y).abs())
        / n
}

/// `d/da` of [`l1_mean`].
fn l1_mean_grad<F: NdFloat, D: ndarray::Dimension>(
    a: &ndarray::Array<F, D>,
    b: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let n = F::from(a.len()).unwrap();
    let mut g = a.clone();
    ndarray::Zip::from(&mut g).and(b).for_each(|x, &y| {
        *x = sign(*x - y) / n;
    });
    g
}

// ---------------------------------------------------------------------------
// Shape loss
// ---------------------------------------------------------------------------

/// Mean over landmarks of the L1 distance from the fused-geometry landmarks
/// to the result and auxiliary landmarks:
/// `(1/N) sum_n (|q_fuse_n - q_r_n|_1 + |q_fuse_n - q_low_n|_1)`.
pub fn shape_loss<F: NdFloat>(
    q_fuse: &Array2<F>,
    q_r: &Array2<F>,
    q_low: &Array2<F>,
) -> Result<F> {
    if q_fuse.dim() != q_r.dim() || q_fuse.dim() != q_low.dim() {
        return Err(Error::DimensionMismatch(format!(
            "landmark sets {:?} / {:?} / {:?}",
            q_fuse.dim(),
            q_r.dim(),
            q_low.dim()
        )));
    }
    let n = F::from(q_fuse.nrows()).unwrap();
    let mut total = F::zero();
    for ((f, r), l) in q_fuse.rows().into_iter().zip(q_r.rows()).zip(q_low.rows()) {
        total += (f[0] - r[0]).abs() + (f[1] - r[1]).abs();
        total += (f[0] - l[0]).abs() + (f[1] - l[1]).abs();
    }
    Ok(total / n)
}

/// Value plus subgradients with respect to `q_r` and `q_low`.
pub fn shape_loss_grads<F: NdFloat>(
    q_fuse: &Array2<F>,
    q_r: &Array2<F>,
    q_low: &Array2<F>,
) -> Result<(F, Array2<F>, Array2<F>)> {
    let value = shape_loss(q_fuse, q_r, q_low)?;
    let n = F::from(q_fuse.nrows()).unwrap();
    let mut d_r = Array2::<F>::zeros(q_r.raw_dim());
    let mut d_low = Array2::<F>::zeros(q_low.raw_dim());
    for i in 0..q_fuse.nrows() {
        for ax in 0..2 {
            d_r[(i, ax)] = -sign(q_fuse[(i, ax)] - q_r[(i, ax)]) / n;
            d_low[(i, ax)] = -sign(q_fuse[(i, ax)] - q_low[(i, ax)]) / n;
        }
    }
    Ok((value, d_r, d_low))
}

// ---------------------------------------------------------------------------
// Identity loss
// ---------------------------------------------------------------------------

fn cosine<F: NdFloat>(a: &Array1<F>, b: &Array1<F>) -> Result<F> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(Error::InvalidConfig("zero-norm vector in cosine".into()));
    }
    Ok(a.dot(b) / (na * nb))
}

/// `(1 - cos(v_s, v_r)) + (1 - cos(v_s, v_low))`.
pub fn id_loss<F: NdFloat>(v_s: &Array1<F>, v_r: &Array1<F>, v_low: &Array1<F>) -> Result<F> {
    Ok((F::one() - cosine(v_s, v_r)?) + (F::one() - cosine(v_s, v_low)?))
}

/// `d/db` of `1 - cos(a, b)`.
fn neg_cos_grad<F: NdFloat>(a: &Array1<F>, b: &Array1<F>) -> Result<Array1<F>> {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(Error::InvalidConfig("zero-norm vector in cosine".into()));
    }
    let cos = a.dot(b) / (na * nb);
    let mut g = Array1::<F>::zeros(b.raw_dim());
    for i in 0..b.len() {
        g[i] = -(a[i] / (na * nb) - cos * b[i] / (nb * nb));
    }
    Ok(g)
}

/// Value plus gradients with respect to the generated-image embeddings.
pub fn id_loss_grads<F: NdFloat>(
    v_s: &Array1<F>,
    v_r: &Array1<F>,
    v_low: &Array1<F>,
) -> Result<(F, Array1<F>, Array1<F>)> {
    let value = id_loss(v_s, v_r, v_low)?;
    Ok((value, neg_cos_grad(v_s, v_r)?, neg_cos_grad(v_s, v_low)?))
}

// ---------------------------------------------------------------------------
// Segmentation loss
// ---------------------------------------------------------------------------

/// `|R(M_tar) - M_low|_1 + |M_tar - M_r|_1` where `R` is the 4x
/// area-average downsample and both norms are means over pixels.
pub fn seg_loss<F: NdFloat>(
    m_tar: &Array4<F>,
    m_low: &Array4<F>,
    m_r: &Array4<F>,
) -> Result<F> {
    if m_tar.dim() != m_r.dim() {
        return Err(Error::DimensionMismatch(format!(
            "M_tar {:?} vs M_r {:?}",
            m_tar.dim(),
            m_r.dim()
        )));
    }
    let resized = ops::avg_pool(m_tar, 4);
    if resized.dim() != m_low.dim() {
        return Err(Error::DimensionMismatch(format!(
            "R(M_tar) {:?} vs M_low {:?}",
            resized.dim(),
            m_low.dim()
        )));
    }
    Ok(l1_mean(&resized, m_low) + l1_mean(m_tar, m_r))
}

pub fn seg_loss_grads<F: NdFloat>(
    m_tar: &Array4<F>,
    m_low: &Array4<F>,
    m_r: &Array4<F>,
) -> Result<(F, Array4<F>, Array4<F>)> {
    let value = seg_loss(m_tar, m_low, m_r)?;
    let resized = ops::avg_pool(m_tar, 4);
    // d/d m_low of |R - m_low| flips the sign of the usual first-arg grad
    let d_low = l1_mean_grad(m_low, &resized);
    let d_r = l1_mean_grad(m_r, m_tar);
    Ok((value, d_low, d_r))
}

// ---------------------------------------------------------------------------
// Reconstruction loss
// ---------------------------------------------------------------------------

/// Pixel supervision on same-identity pairs:
/// `|I_r - I_t|_1 + |I_low - R(I_t)|_1`, zero for cross-identity pairs.
pub fn rec_loss<F: NdFloat>(
    i_r: &Array4<F>,
    i_low: &Array4<F>,
    i_t: &Array4<F>,
    same_identity: bool,
) -> F {
    if !same_identity {
        return F::zero();
    }
    let resized = ops::avg_pool(i_t, 4);
    l1_mean(i_r, i_t) + l1_mean(i_low, &resized)
}

pub fn rec_loss_grads<F: NdFloat>(
    i_r: &Array4<F>,
    i_low: &Array4<F>,
    i_t: &Array4<F>,
    same_identity: bool,
) -> (F, Array4<F>, Array4<F>) {
    if !same_identity {
        return (
            F::zero(),
            Array4::zeros(i_r.raw_dim()),
            Array4::zeros(i_low.raw_dim()),
        );
    }
    let resized = ops::avg_pool(i_t, 4);
    let value = l1_mean(i_r, i_t) + l1_mean(i_low, &resized);
    (value, l1_mean_grad(i_r, i_t), l1_mean_grad(i_low, &resized))
}

// ---------------------------------------------------------------------------
// Cycle loss
// ---------------------------------------------------------------------------

/// `|I_t - I_cycled|_1`, mean over pixels.
pub fn cycle_loss<F: NdFloat>(i_t: &Array4<F>, i_cycled: &Array4<F>) -> F {
    l1_mean(i_t, i_cycled)
}

pub fn cycle_loss_grads<F: NdFloat>(
    i_t: &Array4<F>,
    i_cycled: &Array4<F>,
) -> (F, Array4<F>) {
    (l1_mean(i_t, i_cycled), l1_mean_grad(i_cycled, i_t))
}

// ---------------------------------------------------------------------------
// Perceptual loss
// ---------------------------------------------------------------------------

/// Thin named wrapper over the frozen-pyramid distance.
pub fn perceptual_loss<F: NdFloat>(
    weights: &[Array4<F>],
    biases: &[Array1<F>],
    i_a: &Array4<F>,
    i_b: &Array4<F>,
) -> F {
    crate::lpips::lpips_forward(weights, biases, i_a, i_b)
}

// ---------------------------------------------------------------------------
// Adversarial losses
// ---------------------------------------------------------------------------

fn stable_softplus<F: NdFloat>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    let zero = F::zero();
    let m = if x > zero { x } else { zero };
    m + (F::one() + (-x.abs()).exp()).ln()
}

fn sigmoid_s<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn check_finite<F: NdFloat>(logits: &Array1<F>, side: &str) -> Result<()> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step: 0,
            term: format!("discriminator logits ({side})"),
        });
    }
    Ok(())
}

/// Non-saturating logistic losses plus the R1 penalty value.
///
/// `adv_d = mean softplus(-D(real)) + mean softplus(D(fake))`,
/// `adv_g = mean softplus(-D(fake))`,
/// `r1 = gamma/2 * mean_b |grad_x D(real)|^2`.
pub fn adversarial_losses<F: NdFloat>(
    disc: &DiscStack<F>,
    real: &Array4<F>,
    fake: &Array4<F>,
    gamma: F,
) -> Result<(F, F, F)> {
    let (real_logits, real_cache) = disc.forward(real);
    let (fake_logits, _) = disc.forward(fake);
    check_finite(&real_logits, "real")?;
    check_finite(&fake_logits, "fake")?;
    let bn = F::from(real_logits.len()).unwrap();
    let bf = F::from(fake_logits.len()).unwrap();
    let adv_d = real_logits.iter().fold(F::zero(), |a, &l| a + stable_softplus(-l)) / bn
        + fake_logits.iter().fold(F::zero(), |a, &l| a + stable_softplus(l)) / bf;
    let adv_g = fake_logits.iter().fold(F::zero(), |a, &l| a + stable_softplus(-l)) / bf;
    let (g, _) = disc.input_gradient(&real_cache);
    let half = F::from(0.5).unwrap();
    let r1 = gamma * half * g.iter().fold(F::zero(), |a, &v| a + v * v) / bn;
    Ok((adv_g, adv_d, r1))
}

/// Discriminator phase: loss values and parameter gradients for
/// `adv_d + r1` on a real batch and a detached fake batch.
pub fn discriminator_phase<F: NdFloat>(
    disc: &DiscStack<F>,
    real: &Array4<F>,
    fake: &Array4<F>,
    gamma: F,
) -> Result<(F, F, DiscGrads<F>)> {
    let mut grads = disc.zero_grads();
    let (real_logits, real_cache) = disc.forward(real);
    let (fake_logits, fake_cache) = disc.forward(fake);
    check_finite(&real_logits, "real")?;
    check_finite(&fake_logits, "fake")?;
    let bn = F::from(real_logits.len()).unwrap();
    let bf = F::from(fake_logits.len()).unwrap();

    let adv_d = real_logits.iter().fold(F::zero(), |a, &l| a + stable_softplus(-l)) / bn
        + fake_logits.iter().fold(F::zero(), |a, &l| a + stable_softplus(l)) / bf;

    let d_real = real_logits.mapv(|l| -sigmoid_s(-l) / bn);
    let d_fake = fake_logits.mapv(|l| sigmoid_s(l) / bf);
    disc.backward(&real_cache, &d_real, &mut grads);
    disc.backward(&fake_cache, &d_fake, &mut grads);

    let (g, tape) = disc.input_gradient(&real_cache);
    let r1 = disc.r1_backward(&real_cache, &tape, &g, gamma, &mut grads);
    Ok((adv_d, r1, grads))
}

/// Generator phase: `adv_g` on the fake batch plus the gradient flowing
/// into the fake images. Discriminator parameters receive nothing.
pub fn generator_adv_phase<F: NdFloat>(
    disc: &DiscStack<F>,
    fake: &Array4<F>,
) -> Result<(F, Array4<F>)> {
    let (fake_logits, cache) = disc.forward(fake);
    check_finite(&fake_logits, "fake")?;
    let bf = F::from(fake_logits.len()).unwrap();
    let adv_g = fake_logits.iter().fold(F::zero(), |a, &l| a + stable_softplus(-l)) / bf;
    let d_logits = fake_logits.mapv(|l| -sigmoid_s(-l) / bf);
    let mut sink = disc.zero_grads();
    let d_fake = disc.backward(&cache, &d_logits, &mut sink);
    Ok((adv_g, d_fake))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_loss_zero_at_coincident_landmarks() {
        let q = arr2(&[[1.0, 2.0], [3.0, -1.0]]);
        assert_eq!(shape_loss(&q, &q, &q).unwrap(), 0.0);
    }

    #[test]
    fn shape_loss_hand_example() {
        // N=2, one landmark off by (1,1) in q_r only: (1/2) * (2 + 0) = 1
        let q_fuse = arr2(&[[0.0, 0.0], [0.0, 0.0]]);
        let q_r = arr2(&[[1.0, 1.0], [0.0, 0.0]]);
        let q_low = q_fuse.clone();
        assert_eq!(shape_loss(&q_fuse, &q_r, &q_low).unwrap(), 1.0);
    }

    #[test]
    fn shape_loss_is_positively_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q_fuse = Array2::from_shape_simple_fn((5, 2), || rng.gen_range(-4.0..4.0));
        let q_r = Array2::from_shape_simple_fn((5, 2), || rng.gen_range(-4.0..4.0));
        let q_low = Array2::from_shape_simple_fn((5, 2), || rng.gen_range(-4.0..4.0));
        let base: f64 = shape_loss(&q_fuse, &q_r, &q_low).unwrap();
        let doubled = shape_loss(
            &(&q_fuse * 2.0),
            &(&q_r * 2.0),
            &(&q_low * 2.0),
        )
        .unwrap();
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn shape_loss_rejects_mismatched_n() {
        let a = Array2::<f64>::zeros((3, 2));
        let b = Array2::<f64>::zeros((4, 2));
        assert!(shape_loss(&a, &b, &a).is_err());
    }

    #[test]
    fn id_loss_fixed_points() {
        let v = arr1(&[1.0f64, 0.0, 0.0]);
        assert!(id_loss(&v, &v, &v).unwrap().abs() < 1e-12);

        let orth = arr1(&[0.0, 1.0, 0.0]);
        let l: f64 = id_loss(&v, &orth, &orth).unwrap();
        assert!((l - 2.0).abs() < 1e-12);

        let neg = arr1(&[-1.0, 0.0, 0.0]);
        let l: f64 = id_loss(&v, &neg, &v).unwrap();
        assert!((l - 2.0).abs() < 1e-12);

        let zero = arr1(&[0.0, 0.0, 0.0]);
        assert!(id_loss(&v, &zero, &v).is_err());
    }

    #[test]
    fn seg_loss_fixed_points_and_hand_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m_tar = Array4::from_shape_simple_fn((1, 1, 8, 8), || rng.gen_range(0.0..1.0));
        let m_low = ops::avg_pool(&m_tar, 4);
        let v: f64 = seg_loss(&m_tar, &m_low, &m_tar).unwrap();
        assert!(v.abs() < 1e-12);

        let ones = Array4::<f64>::from_elem((1, 1, 8, 8), 1.0);
        let zeros_r = Array4::<f64>::zeros((1, 1, 8, 8));
        let low = ops::avg_pool(&ones, 4);
        let v: f64 = seg_loss(&ones, &low, &zeros_r).unwrap();
        assert!((v - 1.0).abs() < 1e-12);

        // resize preserves constants
        let c = Array4::<f64>::from_elem((1, 1, 8, 8), 0.37);
        assert!(ops::avg_pool(&c, 4).iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn rec_loss_gating_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let i_t = rand4(&mut rng, (1, 3, 8, 8));
        let i_low = ops::avg_pool(&i_t, 4);
        assert_eq!(rec_loss(&i_t, &i_low, &i_t, true), 0.0);

        // cross-identity pairs contribute nothing regardless of inputs
        let junk = rand4(&mut rng, (1, 3, 8, 8));
        let junk_low = rand4(&mut rng, (1, 3, 2, 2));
        assert_eq!(rec_loss(&junk, &junk_low, &i_t, false), 0.0);
        let (v, d_ir, d_ilow) = rec_loss_grads(&junk, &junk_low, &i_t, false);
        assert_eq!(v, 0.0);
        assert!(d_ir.iter().all(|&g| g == 0.0));
        assert!(d_ilow.iter().all(|&g| g == 0.0));

        // constant offset of 0.5 in I_r only
        let shifted = &i_t + 0.5;
        let v = rec_loss(&shifted, &i_low, &i_t, true);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_values_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let i_t = rand4(&mut rng, (1, 3, 8, 8));
        assert_eq!(cycle_loss(&i_t, &i_t), 0.0);
        let shifted = &i_t + 0.25;
        assert!((cycle_loss(&i_t, &shifted) - 0.25).abs() < 1e-12);
        let other = rand4(&mut rng, (1, 3, 8, 8));
        assert!((cycle_loss(&i_t, &other) - cycle_loss(&other, &i_t)).abs() < 1e-12);
    }

    #[test]
    fn totals_follow_published_weights() {
        let w = LossWeights::default();
        // lambda_shape * 2 + lambda_id * 1 = 0.5*2 + 5*1 = 6
        let r = LossReport {
            shape: 2.0,
            id: 1.0,
            ..Default::default()
        }
        .finalize(&w);
        assert!((r.total_sid - 6.0).abs() < 1e-12);

        // adv 0.5 + 100*0.01 + 20*0.1 + 1*1 + 5*0.2 = 5.5
        let r = LossReport {
            seg: 0.01,
            rec: 0.1,
            cyc: 1.0,
            lpips: 0.2,
            adv_g: 0.5,
            ..Default::default()
        }
        .finalize(&w);
        assert!((r.total_real - 5.5).abs() < 1e-12);
        assert!((r.total - (r.total_sid + r.total_real)).abs() < 1e-12);

        // zero weights kill the sid total regardless of inputs
        let wz = LossWeights {
            lambda_shape: 0.0,
            lambda_id: 0.0,
            ..w
        };
        let r = LossReport {
            shape: 123.0,
            id: 9.0,
            ..Default::default()
        }
        .finalize(&wz);
        assert_eq!(r.total_sid, 0.0);

        // finalize is idempotent given the same components
        let a = LossReport {
            shape: 0.3,
            id: 0.7,
            seg: 0.2,
            adv_g: 0.1,
            ..Default::default()
        }
        .finalize(&w);
        let b = a.clone().finalize(&w);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn weight_scaling_is_linear_per_term() {
        let w = LossWeights::default();
        let base = LossReport {
            cyc: 0.8,
            ..Default::default()
        }
        .finalize(&w);
        let scaled_w = LossWeights {
            lambda2_cyc: w.lambda2_cyc * 3.0,
            ..w
        };
        let scaled = LossReport {
            cyc: 0.8,
            ..Default::default()
        }
        .finalize(&scaled_w);
        assert!((scaled.total_real - 3.0 * base.total_real).abs() < 1e-12);
    }

    #[test]
    fn adversarial_losses_at_zero_logit() {
        // weights all zero -> logits identically zero
        let stack = DiscStack::<f64> {
            ws: vec![Array4::zeros((1, 3, 4, 4))],
            bs: vec![Array1::zeros(1)],
            strides: vec![1],
            pads: vec![0],
            slope: 0.2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = rand4(&mut rng, (2, 3, 4, 4));
        let fake = rand4(&mut rng, (2, 3, 4, 4));
        let (adv_g, adv_d, r1) = adversarial_losses(&stack, &real, &fake, 1.0).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((adv_d - 2.0 * ln2).abs() < 1e-12);
        assert!((adv_g - ln2).abs() < 1e-12);
        assert!(r1.abs() < 1e-24, "constant discriminator has zero input gradient");
    }

    #[test]
    fn adv_g_decreases_as_fake_logits_increase() {
        // bias-only discriminator: logit == bias value
        let mk = |bias: f64| DiscStack::<f64> {
            ws: vec![Array4::zeros((1, 3, 4, 4))],
            bs: vec![arr1(&[bias])],
            strides: vec![1],
            pads: vec![0],
            slope: 0.2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let imgs = rand4(&mut rng, (2, 3, 4, 4));
        let mut last = f64::INFINITY;
        for bias in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let (adv_g, _) = generator_adv_phase(&mk(bias), &imgs).unwrap();
            assert!(adv_g < last, "adv_g must decrease as logits rise");
            last = adv_g;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-6;

        // shape loss wrt q_r and q_low (points away from ties)
        let q_fuse = Array2::from_shape_simple_fn((4, 2), || rng.gen_range(-2.0f64..2.0));
        let q_r = Array2::from_shape_simple_fn((4, 2), || rng.gen_range(-2.0..2.0));
        let q_low = Array2::from_shape_simple_fn((4, 2), || rng.gen_range(-2.0..2.0));
        let (_, d_r, d_low) = shape_loss_grads(&q_fuse, &q_r, &q_low).unwrap();
        for idx in [(0, 0), (2, 1), (3, 0)] {
            let mut p = q_r.clone();
            p[idx] += h;
            let mut m = q_r.clone();
            m[idx] -= h;
            let fd = (shape_loss(&q_fuse, &p, &q_low).unwrap()
                - shape_loss(&q_fuse, &m, &q_low).unwrap())
                / (2.0 * h);
            assert!((fd - d_r[idx]).abs() < 1e-9, "q_r at {idx:?}");
            let mut p = q_low.clone();
            p[idx] += h;
            let mut m = q_low.clone();
            m[idx] -= h;
            let fd = (shape_loss(&q_fuse, &q_r, &p).unwrap()
                - shape_loss(&q_fuse, &q_r, &m).unwrap())
                / (2.0 * h);
            assert!((fd - d_low[idx]).abs() < 1e-9, "q_low at {idx:?}");
        }

        // id loss wrt v_r, v_low
        let unit = |rng: &mut ChaCha8Rng| {
            let v = Array1::from_shape_simple_fn(6, || rng.gen_range(-1.0f64..1.0));
            let n = v.dot(&v).sqrt();
            v / n
        };
        let v_s = unit(&mut rng);
        let v_r = unit(&mut rng);
        let v_low = unit(&mut rng);
        let (_, d_r, d_low) = id_loss_grads(&v_s, &v_r, &v_low).unwrap();
        for i in [0usize, 3, 5] {
            let mut p = v_r.clone();
            p[i] += h;
            let mut m = v_r.clone();
            m[i] -= h;
            let fd = (id_loss(&v_s, &p, &v_low).unwrap() - id_loss(&v_s, &m, &v_low).unwrap())
                / (2.0 * h);
            assert!(
                (fd - d_r[i]).abs() < 1e-7 * fd.abs().max(1.0),
                "v_r at {i}: {fd} vs {}",
                d_r[i]
            );
            let mut p = v_low.clone();
            p[i] += h;
            let mut m = v_low.clone();
            m[i] -= h;
            let fd = (id_loss(&v_s, &v_r, &p).unwrap() - id_loss(&v_s, &v_r, &m).unwrap())
                / (2.0 * h);
            assert!((fd - d_low[i]).abs() < 1e-7 * fd.abs().max(1.0), "v_low at {i}");
        }
    }

    #[test]
    fn discriminator_phase_gradients_match_fd() {
        use crate::nn::randn;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            Array4::from_shape_simple_fn((cout, cin, k, k), || randn(rng) * std)
        };
        let stack = DiscStack::<f64> {
            ws: vec![mk(&mut rng, 3, 4, 3), mk(&mut rng, 4, 1, 4)],
            bs: vec![
                Array1::from_shape_simple_fn(4, || randn(&mut rng) * 0.1),
                Array1::from_shape_simple_fn(1, || randn(&mut rng) * 0.1),
            ],
            strides: vec![2, 1],
            pads: vec![1, 0],
            slope: 0.2,
        };
        let real = rand4(&mut rng, (2, 3, 8, 8));
        let fake = rand4(&mut rng, (2, 3, 8, 8));
        let gamma = 1.3;
        let (_, _, grads) = discriminator_phase(&stack, &real, &fake, gamma).unwrap();

        let objective = |s: &DiscStack<f64>| -> f64 {
            let (adv_g, adv_d, r1) = adversarial_losses(s, &real, &fake, gamma).unwrap();
            let _ = adv_g;
            adv_d + r1
        };
        let h = 1e-6;
        for (l, idx) in [(0usize, (1, 2, 0, 1)), (1, (0, 3, 2, 2))] {
            let mut sp = stack.clone();
            sp.ws[l][idx] += h;
            let mut sm = stack.clone();
            sm.ws[l][idx] -= h;
            let fd = (objective(&sp) - objective(&sm)) / (2.0 * h);
            assert!(
                (fd - grads.dws[l][idx]).abs() < 1e-5 * fd.abs().max(1.0),
                "layer {l} {idx:?}: fd {fd} vs {}",
                grads.dws[l][idx]
            );
        }
        // bias of the final layer: R1 contributes nothing, adversarial does
        let mut sp = stack.clone();
        sp.bs[1][0] += h;
        let mut sm = stack.clone();
        sm.bs[1][0] -= h;
        let fd = (objective(&sp) - objective(&sm)) / (2.0 * h);
        assert!((fd - grads.dbs[1][0]).abs() < 1e-6 * fd.abs().max(1.0));
    }
}
