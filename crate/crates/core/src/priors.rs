//! Trainable stand-ins for the three pretrained networks: the coefficient
//! regressor, the identity embedder, and the (oracle-backed) face
//! segmenter, plus assembly of the shape-aware identity vector.
//!
//! Both networks are small strided conv stacks with global average pooling,
//! so they accept any input resolution. The regressor predicts
//! resolution-normalized pose (translation and scale as fractions of the
//! input size) and is trained on full- and quarter-resolution renders
//! jointly; feeding it a quarter-resolution image therefore yields
//! quarter-frame pixel coordinates directly. Once trained the networks are
//! frozen: generator training never touches their parameters, though
//! loss-side gradients do flow through them into generated images.

use ndarray::{s, Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphable::{
    flatten_coefficients, recombine_coefficients, unflatten_coefficients, Coefficients,
};
use crate::nn::{nested_names, zeroed, Adam, Conv2d, Linear, Module};
use crate::ops;
use crate::seeds;
use crate::world::{stack_images, FaceSample, World};

/// Default identity embedding width.
pub const DEFAULT_EMB_DIM: usize = 32;

/// Unit-norm identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    pub v: Array1<f32>,
}

impl IdentityEmbedding {
    pub fn cosine(&self, other: &IdentityEmbedding) -> f32 {
        self.v.dot(&other.v)
    }
}

/// Shape-aware identity vector: `[flatten(c_fuse) | v_id]`.
#[derive(Debug, Clone)]
pub struct SidVector {
    pub values: Array1<f32>,
    pub id_dim: usize,
    pub exp_dim: usize,
    pub emb_dim: usize,
}

impl SidVector {
    pub fn coeff_len(&self) -> usize {
        self.id_dim + self.exp_dim + 6
    }

    pub fn coefficient_half(&self) -> ndarray::ArrayView1<'_, f32> {
        self.values.slice(s![..self.coeff_len()])
    }

    pub fn embedding_half(&self) -> ndarray::ArrayView1<'_, f32> {
        self.values.slice(s![self.coeff_len()..])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Morphological dilation with a disk structuring element.
pub fn dilate_mask(mask: &ndarray::Array2<f32>, radius: usize) -> ndarray::Array2<f32> {
    if radius == 0 {
        return mask.clone();
    }
    let (h, w) = mask.dim();
    let r = radius as isize;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    let mut out = ndarray::Array2::<f32>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            if mask[(y as usize, x as usize)] <= 0.0 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[(ny as usize, nx as usize)] = 1.0;
                }
            }
        }
    }
    out
}

/// Default dilation radius: 5% of the image size, rounded up.
pub fn default_dilation_radius(image_size: usize) -> usize {
    (image_size as f64 * 0.05).ceil() as usize
}

/// Dilated ground-truth face mask of a sample.
pub fn target_mask(sample: &FaceSample, dilation_radius: usize) -> ndarray::Array2<f32> {
    dilate_mask(&sample.mask, dilation_radius)
}

/// Append normalized x/y coordinate channels so a pooled head can still
/// regress position at any resolution.
fn with_coords(images: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = images.dim();
    let mut out = Array4::<f32>::zeros((b, c + 2, h, w));
    out.slice_mut(s![.., ..c, .., ..]).assign(images);
    for bi in 0..b {
        for py in 0..h {
            for px in 0..w {
                out[(bi, c, py, px)] = 2.0 * (px as f32 + 0.5) / w as f32 - 1.0;
                out[(bi, c + 1, py, px)] = 2.0 * (py as f32 + 0.5) / h as f32 - 1.0;
            }
        }
    }
    out
}

fn leaky_vec(x: &Array2<f32>, slope: f32) -> Array2<f32> {
    x.mapv(|v| if v >= 0.0 { v } else { v * slope })
}

fn leaky_vec_backward(x: &Array2<f32>, dy: &Array2<f32>, slope: f32) -> Array2<f32> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v < 0.0 {
            *d *= slope;
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// Coefficient regressor
// ---------------------------------------------------------------------------

/// Strided conv stack + pooled linear head that regresses shape-model
/// coefficients from an image. Translation and scale come out in the pixel
/// frame of whatever resolution went in.
#[derive(Debug, Clone)]
pub struct CoeffRegressor {
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub id_dim: usize,
    pub exp_dim: usize,
    pub trained: bool,
}

pub struct RegressorCache {
    input: Array4<f32>,
    pre: Vec<Array4<f32>>,
    pooled_hw: (usize, usize),
    pooled: Array2<f32>,
    fc1_out: Array2<f32>,
    raw: Array2<f32>,
    size: f32,
}

const SCALE_SOFTPLUS_GAIN: f32 = 0.25;

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

impl CoeffRegressor {
    pub fn new(rng: &mut ChaCha8Rng, id_dim: usize, exp_dim: usize) -> Self {
        let widths = [16usize, 32, 64, 96];
        let mut convs = Vec::new();
        let mut cin = 5; // rgb + coordinate channels
        for &cout in &widths {
            convs.push(Conv2d::new(rng, cin, cout, 3, 2, 1));
            cin = cout;
        }
        let out_dim = id_dim + exp_dim + 6;
        CoeffRegressor {
            convs,
            fc1: Linear::new(rng, cin, 128),
            fc2: Linear::new(rng, 128, out_dim),
            id_dim,
            exp_dim,
            trained: false,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.id_dim + self.exp_dim + 6
    }

    /// Per-slot factors that turn normalized outputs into the input pixel
    /// frame: identity for coefficients and rotation, image size for
    /// translation and scale.
    pub fn frame_scales(&self, size: f32) -> Array1<f32> {
        let mut v = Array1::<f32>::ones(self.out_dim());
        let base = self.id_dim + self.exp_dim + 3;
        v[base] = size;
        v[base + 1] = size;
        v[base + 2] = size;
        v
    }

    /// Regress final coefficients `(B, id+exp+6)` in the input pixel frame.
    pub fn forward(&self, images: &Array4<f32>) -> (Array2<f32>, RegressorCache) {
        let (_, _, h, _) = images.dim();
        let size = h as f32;
        let x = with_coords(images);
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let a = conv.forward(&cur);
            pre.push(a.clone());
            cur = ops::leaky_relu(&a, 0.2);
        }
        let (_, _, ph, pw) = cur.dim();
        let pooled = ops::global_avg_pool(&cur);
        let fc1_out = self.fc1.forward(&pooled);
        let hid = leaky_vec(&fc1_out, 0.2);
        let raw = self.fc2.forward(&hid);

        // normalized outputs: softplus keeps scale positive
        let scale_slot = self.id_dim + self.exp_dim + 5;
        let mut norm = raw.clone();
        for mut row in norm.rows_mut() {
            row[scale_slot] = SCALE_SOFTPLUS_GAIN * softplus(row[scale_slot]) + 1e-4;
        }
        let frame = self.frame_scales(size);
        let mut out = norm;
        for mut row in out.rows_mut() {
            row *= &frame;
        }
        (
            out,
            RegressorCache {
                input: x,
                pre,
                pooled_hw: (ph, pw),
                pooled,
                fc1_out,
                raw,
                size,
            },
        )
    }

    /// Backward from final-frame coefficient gradients to the input image.
    /// Pass `grads` to also accumulate parameter gradients; `None` treats
    /// the network as frozen (loss-side use).
    pub fn backward(
        &self,
        cache: &RegressorCache,
        d_out: &Array2<f32>,
        mut grads: Option<&mut CoeffRegressor>,
    ) -> Array4<f32> {
        let frame = self.frame_scales(cache.size);
        let scale_slot = self.id_dim + self.exp_dim + 5;
        let mut d_raw = d_out.clone();
        for (mut drow, rrow) in d_raw.rows_mut().into_iter().zip(cache.raw.rows()) {
            drow *= &frame;
            let r = rrow[scale_slot];
            let sig = 1.0 / (1.0 + (-r).exp());
            drow[scale_slot] *= SCALE_SOFTPLUS_GAIN * sig;
        }

        let hid = leaky_vec(&cache.fc1_out, 0.2);
        let d_hid = match grads.as_deref_mut() {
            Some(g) => self.fc2.backward(&hid, &d_raw, &mut g.fc2),
            None => {
                let mut sink = zeroed(&self.fc2);
                self.fc2.backward(&hid, &d_raw, &mut sink)
            }
        };
        let d_fc1 = leaky_vec_backward(&cache.fc1_out, &d_hid, 0.2);
        let d_pooled = match grads.as_deref_mut() {
            Some(g) => self.fc1.backward(&cache.pooled, &d_fc1, &mut g.fc1),
            None => {
                let mut sink = zeroed(&self.fc1);
                self.fc1.backward(&cache.pooled, &d_fc1, &mut sink)
            }
        };
        let mut d_cur =
            ops::global_avg_pool_backward(&d_pooled, cache.pooled_hw.0, cache.pooled_hw.1);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let d_act = ops::leaky_relu_backward(&cache.pre[i], &d_cur, 0.2);
            let input_owned;
            let input_ref = if i == 0 {
                &cache.input
            } else {
                input_owned = ops::leaky_relu(&cache.pre[i - 1], 0.2);
                &input_owned
            };
            d_cur = match grads.as_deref_mut() {
                Some(g) => conv.backward(input_ref, &d_act, &mut g.convs[i]),
                None => {
                    let mut sink = zeroed(conv);
                    conv.backward(input_ref, &d_act, &mut sink)
                }
            };
        }
        // drop the coordinate channels
        d_cur.slice(s![.., ..3, .., ..]).to_owned()
    }

    /// Typed coefficients for one batch row.
    pub fn coefficients(&self, out: &Array2<f32>, row: usize) -> Coefficients {
        let flat = out.row(row).mapv(|v| v as f64);
        unflatten_coefficients(&flat, self.id_dim, self.exp_dim)
            .expect("regressor output layout is fixed")
    }

    /// Convenience single-image regression. Errors if untrained.
    pub fn regress(&self, image: &ndarray::Array3<f32>) -> Result<Coefficients> {
        if !self.trained {
            return Err(Error::Untrained("coefficient regressor".into()));
        }
        let batch = image.clone().insert_axis(Axis(0));
        let (out, _) = self.forward(&batch);
        Ok(self.coefficients(&out, 0))
    }
}

impl Module for CoeffRegressor {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            names.extend(nested_names(&format!("conv{i}"), c));
        }
        names.extend(nested_names("fc1", &self.fc1));
        names.extend(nested_names("fc2", &self.fc2));
        names
    }
    fn param_views(&self) -> Vec<ArrayViewD<'_, f32>> {
        let mut v: Vec<ArrayViewD<'_, f32>> = Vec::new();
        for c in &self.convs {
            v.extend(c.param_views());
        }
        v.extend(self.fc1.param_views());
        v.extend(self.fc2.param_views());
        v
    }
    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f32>> {
        let mut v: Vec<ArrayViewMutD<'_, f32>> = Vec::new();
        for c in &mut self.convs {
            v.extend(c.param_views_mut());
        }
        v.extend(self.fc1.param_views_mut());
        v.extend(self.fc2.param_views_mut());
        v
    }
}

// ---------------------------------------------------------------------------
// Identity embedder
// ---------------------------------------------------------------------------

/// Conv stack + pooled head emitting a unit-norm embedding; trained as an
/// identity classifier with the normalized penultimate layer as the
/// embedding.
#[derive(Debug, Clone)]
pub struct IdentityEmbedder {
    pub convs: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc_embed: Linear,
    pub classifier: Linear,
    pub emb_dim: usize,
    pub trained: bool,
}

pub struct EmbedderCache {
    input: Array4<f32>,
    pre: Vec<Array4<f32>>,
    pooled_hw: (usize, usize),
    pooled: Array2<f32>,
    fc1_out: Array2<f32>,
    norms: Array1<f32>,
    pub embedding: Array2<f32>,
}

impl IdentityEmbedder {
    pub fn new(rng: &mut ChaCha8Rng, emb_dim: usize, identity_count: usize) -> Self {
        let widths = [16usize, 32, 64, 96];
        let mut convs = Vec::new();
        let mut cin = 3;
        for &cout in &widths {
            convs.push(Conv2d::new(rng, cin, cout, 3, 2, 1));
            cin = cout;
        }
        IdentityEmbedder {
            convs,
            fc1: Linear::new(rng, cin, 64),
            fc_embed: Linear::new(rng, 64, emb_dim),
            classifier: Linear::new(rng, emb_dim, identity_count),
            emb_dim,
            trained: false,
        }
    }

    /// Unit-norm embeddings `(B, emb_dim)`.
    pub fn forward(&self, images: &Array4<f32>) -> (Array2<f32>, EmbedderCache) {
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut cur = images.clone();
        for conv in &self.convs {
            let a = conv.forward(&cur);
            pre.push(a.clone());
            cur = ops::leaky_relu(&a, 0.2);
        }
        let (_, _, ph, pw) = cur.dim();
        let pooled = ops::global_avg_pool(&cur);
        let fc1_out = self.fc1.forward(&pooled);
        let hid = leaky_vec(&fc1_out, 0.2);
        let raw_embed = self.fc_embed.forward(&hid);
        let mut norms = Array1::<f32>::zeros(raw_embed.nrows());
        let mut embedding = raw_embed;
        for (i, mut row) in embedding.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt().max(1e-12);
            norms[i] = n;
            row.mapv_inplace(|v| v / n);
        }
        (
            embedding.clone(),
            EmbedderCache {
                input: images.clone(),
                pre,
                pooled_hw: (ph, pw),
                pooled,
                fc1_out,
                norms,
                embedding,
            },
        )
    }

    pub fn logits(&self, embedding: &Array2<f32>) -> Array2<f32> {
        self.classifier.forward(embedding)
    }

    /// Backward from embedding gradients to the input image, through the
    /// normalization. `d_logits` optionally adds the classifier path.
    pub fn backward(
        &self,
        cache: &EmbedderCache,
        d_embedding: &Array2<f32>,
        d_logits: Option<&Array2<f32>>,
        mut grads: Option<&mut IdentityEmbedder>,
    ) -> Array4<f32> {
        let mut d_emb = d_embedding.clone();
        if let Some(dl) = d_logits {
            let d_from_cls = match grads.as_deref_mut() {
                Some(g) => self
                    .classifier
                    .backward(&cache.embedding, dl, &mut g.classifier),
                None => {
                    let mut sink = zeroed(&self.classifier);
                    self.classifier.backward(&cache.embedding, dl, &mut sink)
                }
            };
            d_emb += &d_from_cls;
        }
        // through row normalization: dv = (d - v_hat (v_hat . d)) / ||v||
        let mut d_raw = d_emb.clone();
        for i in 0..d_raw.nrows() {
            let vhat = cache.embedding.row(i);
            let d = d_emb.row(i);
            let dot = vhat.dot(&d);
            let n = cache.norms[i];
            let mut out = d_raw.row_mut(i);
            for j in 0..out.len() {
                out[j] = (d[j] - vhat[j] * dot) / n;
            }
        }
        let hid = leaky_vec(&cache.fc1_out, 0.2);
        let d_hid = match grads.as_deref_mut() {
            Some(g) => self.fc_embed.backward(&hid, &d_raw, &mut g.fc_embed),
            None => {
                let mut sink = zeroed(&self.fc_embed);
                self.fc_embed.backward(&hid, &d_raw, &mut sink)
            }
        };
        let d_fc1 = leaky_vec_backward(&cache.fc1_out, &d_hid, 0.2);
        let d_pooled = match grads.as_deref_mut() {
            Some(g) => self.fc1.backward(&cache.pooled, &d_fc1, &mut g.fc1),
            None => {
                let mut sink = zeroed(&self.fc1);
                self.fc1.backward(&cache.pooled, &d_fc1, &mut sink)
            }
        };
        let mut d_cur =
            ops::global_avg_pool_backward(&d_pooled, cache.pooled_hw.0, cache.pooled_hw.1);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let d_act = ops::leaky_relu_backward(&cache.pre[i], &d_cur, 0.2);
            let input_owned;
            let input_ref = if i == 0 {
                &cache.input
            } else {
                input_owned = ops::leaky_relu(&cache.pre[i - 1], 0.2);
                &input_owned
            };
            d_cur = match grads.as_deref_mut() {
                Some(g) => conv.backward(input_ref, &d_act, &mut g.convs[i]),
                None => {
                    let mut sink = zeroed(conv);
                    conv.backward(input_ref, &d_act, &mut sink)
                }
            };
        }
        d_cur
    }

    /// Convenience single-image embedding. Errors if untrained.
    pub fn embed(&self, image: &ndarray::Array3<f32>) -> Result<IdentityEmbedding> {
        if !self.trained {
            return Err(Error::Untrained("identity embedder".into()));
        }
        let batch = image.clone().insert_axis(Axis(0));
        let (emb, _) = self.forward(&batch);
        Ok(IdentityEmbedding {
            v: emb.row(0).to_owned(),
        })
    }
}

impl Module for IdentityEmbedder {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            names.extend(nested_names(&format!("conv{i}"), c));
        }
        names.extend(nested_names("fc1", &self.fc1));
        names.extend(nested_names("fc_embed", &self.fc_embed));
        names.extend(nested_names("classifier", &self.classifier));
        names
    }
    fn param_views(&self) -> Vec<ArrayViewD<'_, f32>> {
        let mut v: Vec<ArrayViewD<'_, f32>> = Vec::new();
        for c in &self.convs {
            v.extend(c.param_views());
        }
        v.extend(self.fc1.param_views());
        v.extend(self.fc_embed.param_views());
        v.extend(self.classifier.param_views());
        v
    }
    fn param_views_mut(&mut self) -> Vec<ArrayViewMutD<'_, f32>> {
        let mut v: Vec<ArrayViewMutD<'_, f32>> = Vec::new();
        for c in &mut self.convs {
            v.extend(c.param_views_mut());
        }
        v.extend(self.fc1.param_views_mut());
        v.extend(self.fc_embed.param_views_mut());
        v.extend(self.classifier.param_views_mut());
        v
    }
}

// ---------------------------------------------------------------------------
// SID assembly
// ---------------------------------------------------------------------------

/// Frozen priors used for conditioning and loss supervision.
#[derive(Debug, Clone)]
pub struct PriorsBundle {
    pub f3d: CoeffRegressor,
    pub fid: IdentityEmbedder,
}

impl PriorsBundle {
    /// `[flatten(recombine(f3d(I_s), f3d(I_t))) | fid(I_s)]` for one pair.
    pub fn extract_sid(
        &self,
        source: &ndarray::Array3<f32>,
        target: &ndarray::Array3<f32>,
    ) -> Result<SidVector> {
        let c_s = self.f3d.regress(source)?;
        let c_t = self.f3d.regress(target)?;
        let v_id = self.fid.embed(source)?;
        let c_fuse = recombine_coefficients(&c_s, &c_t)?;
        Ok(build_sid(&c_fuse, &v_id.v, self.f3d.id_dim, self.f3d.exp_dim))
    }

    /// Batched conditioning matrix `(B, sid_len)` for paired image batches.
    pub fn extract_sid_batch(
        &self,
        sources: &Array4<f32>,
        targets: &Array4<f32>,
    ) -> Result<Array2<f32>> {
        if !self.f3d.trained || !self.fid.trained {
            return Err(Error::Untrained("priors".into()));
        }
        let (c_s, _) = self.f3d.forward(sources);
        let (c_t, _) = self.f3d.forward(targets);
        let (v_id, _) = self.fid.forward(sources);
        let b = sources.dim().0;
        let sid_len = self.f3d.out_dim() + self.fid.emb_dim;
        let mut out = Array2::<f32>::zeros((b, sid_len));
        for i in 0..b {
            let cs = self.f3d.coefficients(&c_s, i);
            let ct = self.f3d.coefficients(&c_t, i);
            let fuse = recombine_coefficients(&cs, &ct)?;
            let flat = flatten_coefficients(&fuse);
            for (j, v) in flat.iter().enumerate() {
                out[(i, j)] = *v as f32;
            }
            for j in 0..self.fid.emb_dim {
                out[(i, self.f3d.out_dim() + j)] = v_id[(i, j)];
            }
        }
        Ok(out)
    }

    pub fn sid_len(&self) -> usize {
        self.f3d.out_dim() + self.fid.emb_dim
    }
}

/// Assemble a SID vector from typed parts.
pub fn build_sid(
    c_fuse: &Coefficients,
    v_id: &Array1<f32>,
    id_dim: usize,
    exp_dim: usize,
) -> SidVector {
    let flat = flatten_coefficients(c_fuse);
    let mut values = Vec::with_capacity(flat.len() + v_id.len());
    values.extend(flat.iter().map(|&v| v as f32));
    values.extend(v_id.iter().copied());
    SidVector {
        values: Array1::from_vec(values),
        id_dim,
        exp_dim,
        emb_dim: v_id.len(),
    }
}

// ---------------------------------------------------------------------------
// Prior training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub emb_dim: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            steps: 1200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            emb_dim: DEFAULT_EMB_DIM,
        }
    }
}

/// Validation numbers reported after prior training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorReport {
    /// Mean L2 error of regressed alpha on held-out renders.
    pub alpha_error: f64,
    /// Mean pairwise L2 distance between identity-bank entries.
    pub inter_identity_distance: f64,
    /// Top-1 identity classification accuracy on held-out renders.
    pub id_top1: f64,
    /// Mean same-identity cosine minus mean cross-identity cosine.
    pub cosine_margin: f64,
}

pub fn render_batch(
    world: &World,
    seed: u64,
    tag: &str,
    step: u64,
    count: usize,
) -> Vec<FaceSample> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds::stream(seed, tag, step, i as u64);
            let label = world.random_identity(&mut rng);
            world.sample_with_identity(label, &mut rng)
        })
        .collect()
}

/// Normalized regression targets: `[alpha | beta | rot | t/size | s/size]`.
fn normalized_targets(samples: &[FaceSample], size: f64) -> Array2<f32> {
    let d = flatten_coefficients(&samples[0].coefficients).len();
    let mut out = Array2::<f32>::zeros((samples.len(), d));
    for (i, s) in samples.iter().enumerate() {
        let flat = flatten_coefficients(&s.coefficients);
        for (j, v) in flat.iter().enumerate() {
            let scale = if j >= d - 3 { size } else { 1.0 };
            out[(i, j)] = (*v / scale) as f32;
        }
    }
    out
}

/// Train both priors by direct supervision on the face world, then freeze.
pub fn train_priors(world: &World, config: &PriorConfig) -> Result<(PriorsBundle, PriorReport)> {
    let mut init_rng = seeds::stream(config.seed, "prior-init", 0, 0);
    let mut f3d = CoeffRegressor::new(&mut init_rng, world.spec.id_dim, world.spec.exp_dim);
    let mut fid = IdentityEmbedder::new(&mut init_rng, config.emb_dim, world.spec.identity_count);
    let mut opt_f3d = Adam::new(&f3d, config.learning_rate, 0.9, 0.999);
    let mut opt_fid = Adam::new(&fid, config.learning_rate, 0.9, 0.999);
    let size = world.image_size() as f64;

    for step in 0..config.steps {
        let samples = render_batch(world, config.seed, "prior-train", step, config.batch_size);
        let refs: Vec<&FaceSample> = samples.iter().collect();
        let images = stack_images(&refs);
        let images_low = ops::avg_pool(&images, 4);
        let targets = normalized_targets(&samples, size);

        // coefficient regressor: joint full- and quarter-resolution pass
        let mut grads = zeroed(&f3d);
        let mut reg_loss = 0.0f32;
        for imgs in [&images, &images_low] {
            let (out, cache) = f3d.forward(imgs);
            let frame = f3d.frame_scales(imgs.dim().2 as f32);
            // compare in normalized units
            let mut diff = out.clone();
            for (mut row, trow) in diff.rows_mut().into_iter().zip(targets.rows()) {
                for j in 0..row.len() {
                    row[j] = row[j] / frame[j] - trow[j];
                }
            }
            let n = (diff.nrows() * diff.ncols()) as f32;
            reg_loss += diff.iter().map(|v| v * v).sum::<f32>() / n;
            // d(final) = d(norm)/frame
            let mut d_out = diff;
            for mut row in d_out.rows_mut() {
                for j in 0..row.len() {
                    row[j] = 2.0 * row[j] / n / frame[j];
                }
            }
            f3d.backward(&cache, &d_out, Some(&mut grads));
        }
        if !reg_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                term: "prior regression".into(),
            });
        }
        opt_f3d.step(&mut f3d, &grads, Some(10.0));

        // identity embedder: cross-entropy at both resolutions
        let mut grads = zeroed(&fid);
        let mut cls_loss = 0.0f32;
        for imgs in [&images, &images_low] {
            let (emb, cache) = fid.forward(imgs);
            let logits = fid.logits(&emb);
            let b = logits.nrows();
            let mut d_logits = Array2::<f32>::zeros(logits.dim());
            for i in 0..b {
                let row = logits.row(i);
                let maxv = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                let exps: Vec<f32> = row.iter().map(|&v| (v - maxv).exp()).collect();
                let sum: f32 = exps.iter().sum();
                let label = samples[i].identity_label;
                cls_loss += -(exps[label] / sum).ln() / b as f32;
                for j in 0..row.len() {
                    let p = exps[j] / sum;
                    d_logits[(i, j)] = (p - if j == label { 1.0 } else { 0.0 }) / b as f32;
                }
            }
            let d_emb = Array2::<f32>::zeros(emb.dim());
            fid.backward(&cache, &d_emb, Some(&d_logits), Some(&mut grads));
        }
        if !cls_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                term: "prior classification".into(),
            });
        }
        opt_fid.step(&mut fid, &grads, Some(10.0));
    }

    f3d.trained = true;
    fid.trained = true;
    let bundle = PriorsBundle { f3d, fid };
    let report = validate_priors(world, &bundle, config.seed)?;
    Ok((bundle, report))
}

/// Held-out validation of frozen priors.
pub fn validate_priors(world: &World, bundle: &PriorsBundle, seed: u64) -> Result<PriorReport> {
    let val_count = 200;
    let samples = render_batch(world, seed, "prior-val", 0, val_count);
    let refs: Vec<&FaceSample> = samples.iter().collect();
    let images = stack_images(&refs);

    let (coeffs, _) = bundle.f3d.forward(&images);
    let mut alpha_error = 0.0f64;
    for (i, s) in samples.iter().enumerate() {
        let pred = bundle.f3d.coefficients(&coeffs, i);
        alpha_error += (&pred.alpha - &s.coefficients.alpha)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
    }
    alpha_error /= val_count as f64;

    let bank = &world.identity_bank;
    let k = bank.nrows();
    let mut dist_sum = 0.0f64;
    let mut dist_n = 0usize;
    for i in 0..k {
        for j in (i + 1)..k {
            let d: f64 = (&bank.row(i) - &bank.row(j)).iter().map(|v| v * v).sum();
            dist_sum += d.sqrt();
            dist_n += 1;
        }
    }
    let inter_identity_distance = dist_sum / dist_n as f64;

    let (emb, _) = bundle.fid.forward(&images);
    let logits = bundle.fid.logits(&emb);
    let mut correct = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == s.identity_label {
            correct += 1;
        }
    }
    let id_top1 = correct as f64 / val_count as f64;

    // cosine margin on 100 held-out pairs of each kind
    let mut same_cos = 0.0f64;
    let mut cross_cos = 0.0f64;
    let pair_count = 100;
    let mut same_sources = Vec::new();
    let mut same_targets = Vec::new();
    let mut cross_sources = Vec::new();
    let mut cross_targets = Vec::new();
    for i in 0..pair_count {
        let mut rng = seeds::stream(seed, "prior-val-pairs", 1, i as u64);
        let (s, t) = crate::world::sample_pair(world, true, &mut rng);
        same_sources.push(s);
        same_targets.push(t);
        let (s, t) = crate::world::sample_pair(world, false, &mut rng);
        cross_sources.push(s);
        cross_targets.push(t);
    }
    let embed_all = |samples: &[FaceSample]| -> Array2<f32> {
        let refs: Vec<&FaceSample> = samples.iter().collect();
        bundle.fid.forward(&stack_images(&refs)).0
    };
    let (es, et) = (embed_all(&same_sources), embed_all(&same_targets));
    for i in 0..pair_count {
        same_cos += es.row(i).dot(&et.row(i)) as f64;
    }
    let (es, et) = (embed_all(&cross_sources), embed_all(&cross_targets));
    for i in 0..pair_count {
        cross_cos += es.row(i).dot(&et.row(i)) as f64;
    }
    Ok(PriorReport {
        alpha_error,
        inter_identity_distance,
        id_top1,
        cosine_margin: (same_cos - cross_cos) / pair_count as f64,
    })
}
