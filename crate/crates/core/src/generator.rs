//! The swap generator: an instance-normalized encoder over the target
//! image, a decoder whose residual blocks are modulated by the shape-aware
//! identity vector through adaptive instance normalization, and the
//! semantic facial fusion stage.
//!
//! Fusion happens twice. At quarter resolution the decoder feature is
//! blended with a res-block of the low-level encoder feature under a
//! predicted mask (`z_fuse = M_low .* z_dec + (1 - M_low) .* sigma(z_enc)`),
//! and at full resolution the generated image is blended into the target
//! under a second predicted mask (`I_r = M_r .* I_out + (1 - M_r) .* I_t`).
//! Both equations are implemented as the exact elementwise identities the
//! tests check against loop oracles.
//!
//! The conditioning vector is treated as a constant input during
//! backpropagation: gradients reach generator parameters through the
//! adaptive normalization affine maps, never through the priors that
//! produced the vector.

use ndarray::{s, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    nested_names, Conv2d, Module, ResBlockAdaIn, ResBlockAdaInCache, ResBlockIn, ResBlockInCache,
};
use crate::ops;
use crate::priors::PriorsBundle;

/// Which fusion pathway the generator is wired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Feature-level and image-level fusion.
    Full,
    /// No feature-level fusion, no image-level blend.
    Bare,
    /// Image-level blend only.
    Blend,
    /// Encoder feature concatenated channelwise instead of masked fusion.
    Concat,
    /// Conditioning carries only the recognition embedding.
    N3d,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "bare" => Ok(Variant::Bare),
            "blend" => Ok(Variant::Blend),
            "concat" => Ok(Variant::Concat),
            "n3d" => Ok(Variant::N3d),
            other => Err(Error::InvalidConfig(format!("unknown ablation variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Full => "full",
            Variant::Bare => "bare",
            Variant::Blend => "blend",
            Variant::Concat => "concat",
            Variant::N3d => "n3d",
        };
        write!(f, "{name}")
    }
}

impl Variant {
    /// Bare removes the image-level blend entirely.
    pub fn has_image_blend(&self) -> bool {
        !matches!(self, Variant::Bare)
    }

    /// Whether the quarter-resolution fusion uses the masked combination.
    pub fn has_feature_fusion(&self) -> bool {
        matches!(self, Variant::Full | Variant::N3d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Channel width at full resolution; doubles per downsampling.
    pub base_channels: usize,
    /// Conditioning vector length (depends on the variant).
    pub sid_dim: usize,
    /// Number of 2x stages in the upsample head (2 restores 1/4 -> 1).
    pub upsample_stages: usize,
    pub variant: Variant,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.base_channels == 0 || self.sid_dim == 0 || self.upsample_stages == 0 {
            return Err(Error::InvalidConfig("generator dims must be positive".into()));
        }
        Ok(())
    }

    /// Channel widths at 1/2, 1/4, and 1/8 resolution. The stem
    /// downsamples immediately; full-resolution work is limited to the
    /// final head, where narrow convolutions dominate wall-clock cost.
    fn widths(&self) -> [usize; 3] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c]
    }
}

/// One generator pass: final blend, raw image, auxiliary quarter-resolution
/// image and mask, and the full-resolution blend mask.
#[derive(Debug, Clone)]
pub struct SwapOutput {
    pub i_r: Array4<f32>,
    pub i_out: Array4<f32>,
    pub i_low: Array4<f32>,
    pub m_low: Array4<f32>,
    pub m_r: Array4<f32>,
}

/// External gradients flowing into one generator pass.
pub struct SwapGrads {
    pub d_i_r: Array4<f32>,
    pub d_i_low: Array4<f32>,
    pub d_m_low: Array4<f32>,
    pub d_m_r: Array4<f32>,
}

impl SwapGrads {
    pub fn zeros_like(out: &SwapOutput) -> Self {
        SwapGrads {
            d_i_r: Array4::zeros(out.i_r.raw_dim()),
            d_i_low: Array4::zeros(out.i_low.raw_dim()),
            d_m_low: Array4::zeros(out.m_low.raw_dim()),
            d_m_r: Array4::zeros(out.m_r.raw_dim()),
        }
    }
}

// ---------------------------------------------------------------------------
// The two fusion equations, as standalone functions
// ---------------------------------------------------------------------------

/// Feature-level fusion: `M .* a + (1 - M) .* b` with a one-channel mask
/// broadcast across feature channels.
pub fn sff_fuse(z_dec: &Array4<f32>, sigma_enc: &Array4<f32>, m_low: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = z_dec.dim();
    assert_eq!(sigma_enc.dim(), (b, c, h, w), "fusion operands must agree");
    assert_eq!(m_low.dim(), (b, 1, h, w), "mask must be single-channel");
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let m = m_low[(bi, 0, y, x)];
                    out[(bi, ci, y, x)] =
                        m * z_dec[(bi, ci, y, x)] + (1.0 - m) * sigma_enc[(bi, ci, y, x)];
                }
            }
        }
    }
    out
}

/// Image-level blend: `M .* I_out + (1 - M) .* I_t`.
pub fn blend_images(i_out: &Array4<f32>, m_r: &Array4<f32>, i_t: &Array4<f32>) -> Array4<f32> {
    let (b, c, h, w) = i_out.dim();
    assert_eq!(i_t.dim(), (b, c, h, w), "blend operands must agree");
    assert_eq!(m_r.dim(), (b, 1, h, w), "mask must be single-channel");
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let m = m_r[(bi, 0, y, x)];
                    out[(bi, ci, y, x)] =
                        m * i_out[(bi, ci, y, x)] + (1.0 - m) * i_t[(bi, ci, y, x)];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Upsample head
// ---------------------------------------------------------------------------

/// `2x` stages of nearest upsampling and a channel-halving convolution.
/// Every stage except the last carries two residual blocks; the last stage
/// stays light because full-resolution convolutions dominate wall-clock
/// cost. Ends in a projection to image + mask channels.
#[derive(Debug, Clone)]
pub struct UpsampleHead {
    pub stages: Vec<UpStage>,
    pub out_head: Conv2d,
    emits_mask: bool,
}

#[derive(Debug, Clone)]
pub struct UpStage {
    pub conv: Conv2d,
    pub blocks: Vec<ResBlockIn>,
}

pub struct UpStageCache {
    up: Array4<f32>,
    blocks: Vec<ResBlockInCache>,
}

pub struct UpsampleHeadCache {
    stages: Vec<UpStageCache>,
    last: Array4<f32>,
    raw: Array4<f32>,
    pub i_out: Array4<f32>,
    pub m_r: Option<Array4<f32>>,
}

impl UpsampleHead {
    pub fn new(rng: &mut ChaCha8Rng, input_channels: usize, stages: usize, emits_mask: bool) -> Self {
        let mut stage_layers = Vec::with_capacity(stages);
        let mut cin = input_channels;
        for i in 0..stages {
            let cout = (cin / 2).max(4);
            let block_count = if i + 1 == stages { 0 } else { 2 };
            let blocks = (0..block_count).map(|_| ResBlockIn::new(rng, cout)).collect();
            stage_layers.push(UpStage {
                conv: Conv2d::new(rng, cin, cout, 3, 1, 1),
                blocks,
            });
            cin = cout;
        }
        let out_channels = if emits_mask { 4 } else { 3 };
        UpsampleHead {
            stages: stage_layers,
            out_head: Conv2d::new(rng, cin, out_channels, 3, 1, 1),
            emits_mask,
        }
    }

    pub fn forward(&self, z_fuse: &Array4<f32>) -> UpsampleHeadCache {
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut cur = z_fuse.clone();
        for stage in &self.stages {
            let up = ops::upsample_nearest(&cur, 2);
            cur = stage.conv.forward(&up);
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (r, cache) = block.forward(&cur);
                blocks.push(cache);
                cur = r;
            }
            stages.push(UpStageCache { up, blocks });
        }
        let raw = self.out_head.forward(&cur);
        let i_out = ops::tanh(&raw.slice(s![.., 0..3, .., ..]).to_owned());
        let m_r = if self.emits_mask {
            Some(ops::sigmoid(&raw.slice(s![.., 3..4, .., ..]).to_owned()))
        } else {
            None
        };
        UpsampleHeadCache {
            stages,
            last: cur,
            raw,
            i_out,
            m_r,
        }
    }

    pub fn backward(
        &self,
        cache: &UpsampleHeadCache,
        d_i_out: &Array4<f32>,
        d_m_r: Option<&Array4<f32>>,
        grad: &mut UpsampleHead,
    ) -> Array4<f32> {
        let (b, _, h, w) = cache.raw.dim();
        let channels = if self.emits_mask { 4 } else { 3 };
        let mut d_raw = Array4::<f32>::zeros((b, channels, h, w));
        let d_img = ops::tanh_backward(&cache.i_out, d_i_out);
        d_raw.slice_mut(s![.., 0..3, .., ..]).assign(&d_img);
        if let (Some(m_r), Some(dm)) = (&cache.m_r, d_m_r) {
            let d_mask = ops::sigmoid_backward(m_r, dm);
            d_raw.slice_mut(s![.., 3..4, .., ..]).assign(&d_mask);
        }
        let mut d_cur = self.out_head.backward(&cache.last, &d_raw, &mut grad.out_head);
        for (i, stage) in self.stages.iter().enumerate().rev() {
            let scache = &cache.stages[i];
            let gstage = &mut grad.stages[i];
            for (j, block) in stage.blocks.iter().enumerate().rev() {
                d_cur = block.backward(&scache.blocks[j], &d_cur, &mut gstage.blocks[j]);
            }
            let d_up = stage.conv.backward(&scache.up, &d_cur, &mut gstage.conv);
            d_cur = ops::upsample_nearest_backward(&d_up, 2);
        }
        d_cur
    }
}

impl Module for UpsampleHead {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            names.extend(nested_names(&format!("stage{i}.conv"), &stage.conv));
            for (j, block) in stage.blocks.iter().enumerate() {
                names.extend(nested_names(&format!("stage{i}.block{j}"), block));
            }
        }
        names.extend(nested_names("out_head", &self.out_head));
        names
    }
    fn param_views(&self) -> Vec<ndarray::ArrayViewD<'_, f32>> {
        let mut v: Vec<ndarray::ArrayViewD<'_, f32>> = Vec::new();
        for stage in &self.stages {
            v.extend(stage.conv.param_views());
            for block in &stage.blocks {
                v.extend(block.param_views());
            }
        }
        v.extend(self.out_head.param_views());
        v
    }
    fn param_views_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f32>> {
        let mut v: Vec<ndarray::ArrayViewMutD<'_, f32>> = Vec::new();
        for stage in &mut self.stages {
            v.extend(stage.conv.param_views_mut());
            for block in &mut stage.blocks {
                v.extend(block.param_views_mut());
            }
        }
        v.extend(self.out_head.param_views_mut());
        v
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    // encoder: the stem downsamples to 1/2 immediately
    stem: Conv2d,
    enc_block1: ResBlockIn,
    down2: Conv2d,
    enc_block2: ResBlockIn,
    down3: Conv2d,
    enc_block3: ResBlockIn,
    // decoder
    dec_block0: ResBlockAdaIn,
    dec_conv: Conv2d,
    dec_block1: ResBlockAdaIn,
    // heads and fusion
    low_head: Conv2d,
    sigma: Option<ResBlockIn>,
    concat_reduce: Option<Conv2d>,
    pub upsample: UpsampleHead,
}

pub struct GenCache {
    input: Array4<f32>,
    e1: ResBlockInCache,
    e1_out: Array4<f32>,
    e2: ResBlockInCache,
    z_enc: Array4<f32>,
    e3: ResBlockInCache,
    g0: ResBlockAdaInCache,
    u0: Array4<f32>,
    g1: ResBlockAdaInCache,
    z_dec: Array4<f32>,
    low_raw: Array4<f32>,
    sigma_cache: Option<ResBlockInCache>,
    sigma_out: Option<Array4<f32>>,
    concat_in: Option<Array4<f32>>,
    head: UpsampleHeadCache,
    pub output: SwapOutput,
}

impl Generator {
    pub fn new(rng: &mut ChaCha8Rng, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let [c_half, c_quarter, c_eighth] = config.widths();
        let sid = config.sid_dim;
        let sigma = if config.variant.has_feature_fusion() {
            Some(ResBlockIn::new(rng, c_quarter))
        } else {
            None
        };
        let concat_reduce = if config.variant == Variant::Concat {
            Some(Conv2d::new(rng, 2 * c_quarter, c_quarter, 1, 1, 0))
        } else {
            None
        };
        let emits_mask = config.variant.has_image_blend();
        Ok(Generator {
            stem: Conv2d::new(rng, 3, c_half, 3, 2, 1),
            enc_block1: ResBlockIn::new(rng, c_half),
            down2: Conv2d::new(rng, c_half, c_quarter, 3, 2, 1),
            enc_block2: ResBlockIn::new(rng, c_quarter),
            down3: Conv2d::new(rng, c_quarter, c_eighth, 3, 2, 1),
            enc_block3: ResBlockIn::new(rng, c_eighth),
            dec_block0: ResBlockAdaIn::new(rng, sid, c_eighth),
            dec_conv: Conv2d::new(rng, c_eighth, c_quarter, 3, 1, 1),
            dec_block1: ResBlockAdaIn::new(rng, sid, c_quarter),
            low_head: Conv2d::new(rng, c_quarter, 4, 3, 1, 1),
            sigma,
            concat_reduce,
            upsample: UpsampleHead::new(rng, c_quarter, config.upsample_stages, emits_mask),
            config,
        })
    }

    /// Encoder only: quarter-resolution feature and bottleneck.
    pub fn encode(&self, i_t: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let s0 = self.stem.forward(i_t);
        let (e1, _) = self.enc_block1.forward(&s0);
        let d2 = self.down2.forward(&e1);
        let (z_enc, _) = self.enc_block2.forward(&d2);
        let d3 = self.down3.forward(&z_enc);
        let (bottleneck, _) = self.enc_block3.forward(&d3);
        (z_enc, bottleneck)
    }

    /// Decoder only: bottleneck + conditioning to the quarter-res feature.
    pub fn decode(&self, bottleneck: &Array4<f32>, sid: &Array2<f32>) -> Array4<f32> {
        let (g0, _) = self.dec_block0.forward(bottleneck, sid);
        let u0 = ops::upsample_nearest(&g0, 2);
        let dc0 = self.dec_conv.forward(&u0);
        let (z_dec, _) = self.dec_block1.forward(&dc0, sid);
        z_dec
    }

    /// Quarter-resolution projection head: mask and auxiliary image.
    pub fn predict_low(&self, z_dec: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let raw = self.low_head.forward(z_dec);
        let m_low = ops::sigmoid(&raw.slice(s![.., 0..1, .., ..]).to_owned());
        let i_low = ops::tanh(&raw.slice(s![.., 1..4, .., ..]).to_owned());
        (m_low, i_low)
    }

    /// Full forward pass conditioned on a per-sample SID matrix `(B, sid)`.
    pub fn forward(&self, i_t: &Array4<f32>, sid: &Array2<f32>) -> Result<GenCache> {
        let (b, c, h, w) = i_t.dim();
        if c != 3 || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::DimensionMismatch(format!(
                "target image {:?} vs configured size {}",
                i_t.dim(),
                self.config.image_size
            )));
        }
        if sid.dim() != (b, self.config.sid_dim) {
            return Err(Error::DimensionMismatch(format!(
                "sid {:?} vs (batch {}, sid_dim {})",
                sid.dim(),
                b,
                self.config.sid_dim
            )));
        }

        // encoder
        let s0 = self.stem.forward(i_t);
        let (e1_out, e1) = self.enc_block1.forward(&s0);
        let d2 = self.down2.forward(&e1_out);
        let (z_enc, e2) = self.enc_block2.forward(&d2);
        let d3 = self.down3.forward(&z_enc);
        let (bottleneck, e3) = self.enc_block3.forward(&d3);

        // decoder
        let (g0_out, g0) = self.dec_block0.forward(&bottleneck, sid);
        let u0 = ops::upsample_nearest(&g0_out, 2);
        let dc0 = self.dec_conv.forward(&u0);
        let (z_dec, g1) = self.dec_block1.forward(&dc0, sid);

        // low head
        let low_raw = self.low_head.forward(&z_dec);
        let m_low = ops::sigmoid(&low_raw.slice(s![.., 0..1, .., ..]).to_owned());
        let i_low = ops::tanh(&low_raw.slice(s![.., 1..4, .., ..]).to_owned());

        // feature fusion
        let mut sigma_cache = None;
        let mut sigma_out = None;
        let mut concat_in = None;
        let z_fuse = match self.config.variant {
            Variant::Full | Variant::N3d => {
                let (sg, cache) = self.sigma.as_ref().unwrap().forward(&z_enc);
                let fused = sff_fuse(&z_dec, &sg, &m_low);
                sigma_cache = Some(cache);
                sigma_out = Some(sg);
                fused
            }
            Variant::Concat => {
                let cc = ops::concat_channels(&z_dec, &z_enc);
                let fused = self.concat_reduce.as_ref().unwrap().forward(&cc);
                concat_in = Some(cc);
                fused
            }
            Variant::Blend | Variant::Bare => z_dec.clone(),
        };

        // upsample head and blend
        let head = self.upsample.forward(&z_fuse);
        let i_out = head.i_out.clone();
        let (i_r, m_r) = if self.config.variant.has_image_blend() {
            let m_r = head.m_r.clone().unwrap();
            (blend_images(&i_out, &m_r, i_t), m_r)
        } else {
            (i_out.clone(), Array4::<f32>::ones((b, 1, h, w)))
        };

        Ok(GenCache {
            input: i_t.clone(),
            e1,
            e1_out,
            e2,
            z_enc,
            e3,
            g0,
            u0,
            g1,
            z_dec,
            low_raw,
            sigma_cache,
            sigma_out,
            concat_in,
            head,
            output: SwapOutput {
                i_r,
                i_out,
                i_low,
                m_low,
                m_r,
            },
        })
    }

    /// Backward pass. Accumulates parameter gradients into `grads` and
    /// returns the gradient with respect to the target image (both the
    /// blend skip and the encoder path), which the cycle pass chains
    /// through.
    pub fn backward(&self, cache: &GenCache, ext: &SwapGrads, grads: &mut Generator) -> Array4<f32> {
        let out = &cache.output;
        let (b, c, h, w) = out.i_out.dim();

        // image-level blend
        let mut d_i_out = Array4::<f32>::zeros((b, c, h, w));
        let mut d_m_r = Array4::<f32>::zeros((b, 1, h, w));
        let mut d_i_t_blend = Array4::<f32>::zeros((b, c, h, w));
        if self.config.variant.has_image_blend() {
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let m = out.m_r[(bi, 0, y, x)];
                        let mut dm = 0.0f32;
                        for ci in 0..c {
                            let g = ext.d_i_r[(bi, ci, y, x)];
                            d_i_out[(bi, ci, y, x)] = m * g;
                            d_i_t_blend[(bi, ci, y, x)] = (1.0 - m) * g;
                            dm += g * (out.i_out[(bi, ci, y, x)] - cache.input[(bi, ci, y, x)]);
                        }
                        d_m_r[(bi, 0, y, x)] = dm + ext.d_m_r[(bi, 0, y, x)];
                    }
                }
            }
        } else {
            d_i_out += &ext.d_i_r;
        }

        // upsample head
        let d_m_r_opt = if self.config.variant.has_image_blend() {
            Some(&d_m_r)
        } else {
            None
        };
        let d_z_fuse =
            self.upsample
                .backward(&cache.head, &d_i_out, d_m_r_opt, &mut grads.upsample);

        // feature fusion
        let (qb, qc, qh, qw) = cache.z_dec.dim();
        let mut d_z_dec;
        let mut d_z_enc = Array4::<f32>::zeros(cache.z_enc.raw_dim());
        let mut d_m_low_fusion = Array4::<f32>::zeros((qb, 1, qh, qw));
        match self.config.variant {
            Variant::Full | Variant::N3d => {
                let sg = cache.sigma_out.as_ref().unwrap();
                d_z_dec = Array4::<f32>::zeros(cache.z_dec.raw_dim());
                let mut d_sg = Array4::<f32>::zeros(sg.raw_dim());
                for bi in 0..qb {
                    for y in 0..qh {
                        for x in 0..qw {
                            let m = out.m_low[(bi, 0, y, x)];
                            let mut dm = 0.0f32;
                            for ci in 0..qc {
                                let g = d_z_fuse[(bi, ci, y, x)];
                                d_z_dec[(bi, ci, y, x)] = m * g;
                                d_sg[(bi, ci, y, x)] = (1.0 - m) * g;
                                dm += g
                                    * (cache.z_dec[(bi, ci, y, x)] - sg[(bi, ci, y, x)]);
                            }
                            d_m_low_fusion[(bi, 0, y, x)] = dm;
                        }
                    }
                }
                let gsigma = grads.sigma.as_mut().unwrap();
                d_z_enc += &self.sigma.as_ref().unwrap().backward(
                    cache.sigma_cache.as_ref().unwrap(),
                    &d_sg,
                    gsigma,
                );
            }
            Variant::Concat => {
                let d_cc = self.concat_reduce.as_ref().unwrap().backward(
                    cache.concat_in.as_ref().unwrap(),
                    &d_z_fuse,
                    grads.concat_reduce.as_mut().unwrap(),
                );
                d_z_dec = d_cc.slice(s![.., ..qc, .., ..]).to_owned();
                d_z_enc += &d_cc.slice(s![.., qc.., .., ..]).to_owned();
            }
            Variant::Blend | Variant::Bare => {
                d_z_dec = d_z_fuse;
            }
        }

        // low head: external mask/image gradients plus the fusion mask path
        let d_m_low_total = &d_m_low_fusion + &ext.d_m_low;
        let mut d_low_raw = Array4::<f32>::zeros(cache.low_raw.raw_dim());
        let d_mask = ops::sigmoid_backward(&out.m_low, &d_m_low_total);
        d_low_raw.slice_mut(s![.., 0..1, .., ..]).assign(&d_mask);
        let d_img = ops::tanh_backward(&out.i_low, &ext.d_i_low);
        d_low_raw.slice_mut(s![.., 1..4, .., ..]).assign(&d_img);
        d_z_dec += &self
            .low_head
            .backward(&cache.z_dec, &d_low_raw, &mut grads.low_head);

        // decoder
        let d_dc0 = self
            .dec_block1
            .backward(&cache.g1, &d_z_dec, &mut grads.dec_block1);
        let d_u0 = self.dec_conv.backward(&cache.u0, &d_dc0, &mut grads.dec_conv);
        let d_g0 = ops::upsample_nearest_backward(&d_u0, 2);
        let d_bottleneck = self
            .dec_block0
            .backward(&cache.g0, &d_g0, &mut grads.dec_block0);

        // encoder (z_enc receives both the fusion path and the deeper path)
        let d_d3 = self
            .enc_block3
            .backward(&cache.e3, &d_bottleneck, &mut grads.enc_block3);
        d_z_enc += &self.down3.backward(&cache.z_enc, &d_d3, &mut grads.down3);
        let d_d2 = self.enc_block2.backward(&cache.e2, &d_z_enc, &mut grads.enc_block2);
        let d_e1 = self.down2.backward(&cache.e1_out, &d_d2, &mut grads.down2);
        let d_s0 = self.enc_block1.backward(&cache.e1, &d_e1, &mut grads.enc_block1);
        let d_i_t_enc = self.stem.backward(&cache.input, &d_s0, &mut grads.stem);

        d_i_t_blend + d_i_t_enc
    }

    /// Swap a single source/target pair using frozen priors for
    /// conditioning.
    pub fn swap(
        &self,
        priors: &PriorsBundle,
        i_s: &ndarray::Array3<f32>,
        i_t: &ndarray::Array3<f32>,
    ) -> Result<SwapOutput> {
        let sid = priors.extract_sid(i_s, i_t)?;
        self.swap_with_sid(&sid.values, i_t)
    }

    /// Run the generator on one target image with an explicit conditioning
    /// vector (used by swapping and by conditioning interpolation alike).
    pub fn swap_with_sid(
        &self,
        sid: &ndarray::Array1<f32>,
        i_t: &ndarray::Array3<f32>,
    ) -> Result<SwapOutput> {
        let sid_row = sid.clone().insert_axis(Axis(0));
        let batch = i_t.clone().insert_axis(Axis(0));
        let cache = self.forward(&batch, &sid_row)?;
        Ok(cache.output)
    }
}

impl Module for Generator {
    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend(nested_names("stem", &self.stem));
        names.extend(nested_names("enc_block1", &self.enc_block1));
        names.extend(nested_names("down2", &self.down2));
        names.extend(nested_names("enc_block2", &self.enc_block2));
        names.extend(nested_names("down3", &self.down3));
        names.extend(nested_names("enc_block3", &self.enc_block3));
        names.extend(nested_names("dec_block0", &self.dec_block0));
        names.extend(nested_names("dec_conv", &self.dec_conv));
        names.extend(nested_names("dec_block1", &self.dec_block1));
        names.extend(nested_names("low_head", &self.low_head));
        if let Some(sg) = &self.sigma {
            names.extend(nested_names("sigma", sg));
        }
        if let Some(cr) = &self.concat_reduce {
            names.extend(nested_names("concat_reduce", cr));
        }
        names.extend(nested_names("upsample", &self.upsample));
        names
    }
    fn param_views(&self) -> Vec<ndarray::ArrayViewD<'_, f32>> {
        let mut v: Vec<ndarray::ArrayViewD<'_, f32>> = Vec::new();
        v.extend(self.stem.param_views());
        v.extend(self.enc_block1.param_views());
        v.extend(self.down2.param_views());
        v.extend(self.enc_block2.param_views());
        v.extend(self.down3.param_views());
        v.extend(self.enc_block3.param_views());
        v.extend(self.dec_block0.param_views());
        v.extend(self.dec_conv.param_views());
        v.extend(self.dec_block1.param_views());
        v.extend(self.low_head.param_views());
        if let Some(sg) = &self.sigma {
            v.extend(sg.param_views());
        }
        if let Some(cr) = &self.concat_reduce {
            v.extend(cr.param_views());
        }
        v.extend(self.upsample.param_views());
        v
    }
    fn param_views_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f32>> {
        let mut v: Vec<ndarray::ArrayViewMutD<'_, f32>> = Vec::new();
        v.extend(self.stem.param_views_mut());
        v.extend(self.enc_block1.param_views_mut());
        v.extend(self.down2.param_views_mut());
        v.extend(self.enc_block2.param_views_mut());
        v.extend(self.down3.param_views_mut());
        v.extend(self.enc_block3.param_views_mut());
        v.extend(self.dec_block0.param_views_mut());
        v.extend(self.dec_conv.param_views_mut());
        v.extend(self.dec_block1.param_views_mut());
        v.extend(self.low_head.param_views_mut());
        if let Some(sg) = &mut self.sigma {
            v.extend(sg.param_views_mut());
        }
        if let Some(cr) = &mut self.concat_reduce {
            v.extend(cr.param_views_mut());
        }
        v.extend(self.upsample.param_views_mut());
        v
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, zeroed};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tiny_config(variant: Variant, sid_dim: usize) -> GeneratorConfig {
        GeneratorConfig {
            image_size: 16,
            base_channels: 4,
            sid_dim,
            upsample_stages: 2,
            variant,
        }
    }

    fn tiny_generator(seed: u64, variant: Variant, sid_dim: usize) -> Generator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Generator::new(&mut rng, tiny_config(variant, sid_dim)).unwrap()
    }

    fn rand_image(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Array4<f32> {
        Array4::from_shape_simple_fn((b, 3, size, size), || (randn(rng) * 0.5).tanh() as f32)
    }

    fn rand_sid(rng: &mut ChaCha8Rng, b: usize, dim: usize) -> Array2<f32> {
        Array2::from_shape_simple_fn((b, dim), || randn(rng) as f32)
    }

    #[test]
    fn fusion_equation_at_mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z_dec = Array4::from_shape_simple_fn((1, 3, 4, 4), || randn(&mut rng) as f32);
        let sg = Array4::from_shape_simple_fn((1, 3, 4, 4), || randn(&mut rng) as f32);
        let ones = Array4::<f32>::ones((1, 1, 4, 4));
        let zeros = Array4::<f32>::zeros((1, 1, 4, 4));
        assert_eq!(sff_fuse(&z_dec, &sg, &ones), z_dec);
        assert_eq!(sff_fuse(&z_dec, &sg, &zeros), sg);

        let half = Array4::<f32>::from_elem((1, 1, 4, 4), 0.5);
        let mid = sff_fuse(&z_dec, &sg, &half);
        for ((a, b), m) in z_dec.iter().zip(sg.iter()).zip(mid.iter()) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-6);
        }
    }

    #[test]
    fn blend_equation_at_mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let i_out = Array4::from_shape_simple_fn((1, 3, 4, 4), || randn(&mut rng) as f32);
        let i_t = Array4::from_shape_simple_fn((1, 3, 4, 4), || randn(&mut rng) as f32);
        let ones = Array4::<f32>::ones((1, 1, 4, 4));
        let zeros = Array4::<f32>::zeros((1, 1, 4, 4));
        assert_eq!(blend_images(&i_out, &zeros, &i_t), i_t);
        assert_eq!(blend_images(&i_out, &ones, &i_t), i_out);

        // checkerboard selection
        let mut m = Array4::<f32>::zeros((1, 1, 4, 4));
        for y in 0..4 {
            for x in 0..4 {
                m[(0, 0, y, x)] = ((x + y) % 2) as f32;
            }
        }
        let blended = blend_images(&i_out, &m, &i_t);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let expected = if (x + y) % 2 == 1 {
                        i_out[(0, c, y, x)]
                    } else {
                        i_t[(0, c, y, x)]
                    };
                    assert_eq!(blended[(0, c, y, x)], expected);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn fusion_and_blend_match_loop_oracles(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z_dec = Array4::from_shape_simple_fn((1, 2, 4, 4), || randn(&mut rng) as f32);
            let sg = Array4::from_shape_simple_fn((1, 2, 4, 4), || randn(&mut rng) as f32);
            let m = Array4::from_shape_simple_fn((1, 1, 4, 4), || {
                (randn(&mut rng).tanh() * 0.5 + 0.5) as f32
            });
            let fused = sff_fuse(&z_dec, &sg, &m);
            for c in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        let mm = m[(0, 0, y, x)];
                        let oracle = mm * z_dec[(0, c, y, x)] + (1.0 - mm) * sg[(0, c, y, x)];
                        prop_assert!((fused[(0, c, y, x)] - oracle).abs() < 1e-6);
                    }
                }
            }
            let i_t = Array4::from_shape_simple_fn((1, 2, 4, 4), || randn(&mut rng) as f32);
            let blended = blend_images(&z_dec, &m, &i_t);
            for c in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        let mm = m[(0, 0, y, x)];
                        let oracle = mm * z_dec[(0, c, y, x)] + (1.0 - mm) * i_t[(0, c, y, x)];
                        prop_assert!((blended[(0, c, y, x)] - oracle).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn encoder_emits_documented_resolutions() {
        let gen = tiny_generator(3, Variant::Full, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = rand_image(&mut rng, 2, 16);
        let (z_enc, bottleneck) = gen.encode(&img);
        assert_eq!(z_enc.dim(), (2, 8, 4, 4)); // 1/4 resolution
        assert_eq!(bottleneck.dim(), (2, 16, 2, 2)); // one further halving

        // determinism and finiteness on the zero image
        let zero = Array4::<f32>::zeros((1, 3, 16, 16));
        let (a1, b1) = gen.encode(&zero);
        let (a2, b2) = gen.encode(&zero);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert!(a1.iter().all(|v| v.is_finite()));
        assert!(b1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn conditioning_reaches_the_decoder_output() {
        let gen = tiny_generator(5, Variant::Full, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_image(&mut rng, 1, 16);
        let (_, bottleneck) = gen.encode(&img);
        let sid_a = rand_sid(&mut rng, 1, 10);
        let sid_b = rand_sid(&mut rng, 1, 10);
        let za = gen.decode(&bottleneck, &sid_a);
        let zb = gen.decode(&bottleneck, &sid_b);
        let max_diff = (&za - &zb).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max_diff > 0.0, "different conditioning must change z_dec");
        let za2 = gen.decode(&bottleneck, &sid_a);
        assert_eq!(za, za2);
    }

    #[test]
    fn low_head_outputs_are_bounded_and_reached_by_gradients() {
        let gen = tiny_generator(7, Variant::Full, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = rand_image(&mut rng, 1, 16);
        let (_, bottleneck) = gen.encode(&img);
        let sid = rand_sid(&mut rng, 1, 10);
        let z_dec = gen.decode(&bottleneck, &sid);
        let (m_low, i_low) = gen.predict_low(&z_dec);
        assert!(m_low.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(i_low.iter().all(|&v| (-1.0..=1.0).contains(&v)));

        // nudging one z_dec coordinate changes the head outputs
        let mut z2 = z_dec.clone();
        z2[(0, 3, 1, 2)] += 0.5;
        let (m2, i2) = gen.predict_low(&z2);
        let changed = m_low
            .iter()
            .zip(m2.iter())
            .chain(i_low.iter().zip(i2.iter()))
            .any(|(a, b)| a != b);
        assert!(changed);
    }

    #[test]
    fn upsample_head_restores_and_extends_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head4 = UpsampleHead::new(&mut rng, 8, 2, true);
        let z = Array4::from_shape_simple_fn((1, 8, 4, 4), || randn(&mut rng) as f32);
        let cache = head4.forward(&z);
        assert_eq!(cache.i_out.dim(), (1, 3, 16, 16));
        assert_eq!(cache.m_r.as_ref().unwrap().dim(), (1, 1, 16, 16));
        assert!(cache.i_out.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(cache.m_r.as_ref().unwrap().iter().all(|&v| (0.0..=1.0).contains(&v)));

        // one extra stage gives 8x upsampling
        let head8 = UpsampleHead::new(&mut rng, 8, 3, true);
        let cache = head8.forward(&z);
        assert_eq!(cache.i_out.dim(), (1, 3, 32, 32));
    }

    #[test]
    fn swap_output_satisfies_blend_identity() {
        let gen = tiny_generator(10, Variant::Full, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let i_t = rand_image(&mut rng, 2, 16);
        let sid = rand_sid(&mut rng, 2, 10);
        let cache = gen.forward(&i_t, &sid).unwrap();
        let out = &cache.output;
        let recomputed = blend_images(&out.i_out, &out.m_r, &i_t);
        assert_eq!(recomputed, out.i_r);

        // where the mask is nearly zero the target shows through
        for bi in 0..2 {
            for y in 0..16 {
                for x in 0..16 {
                    if out.m_r[(bi, 0, y, x)] < 0.01 {
                        for c in 0..3 {
                            assert!(
                                (out.i_r[(bi, c, y, x)] - i_t[(bi, c, y, x)]).abs() < 0.02,
                                "background must survive the blend"
                            );
                        }
                    }
                }
            }
        }

        // inference determinism
        let cache2 = gen.forward(&i_t, &sid).unwrap();
        assert_eq!(cache2.output.i_r, out.i_r);
    }

    #[test]
    fn ablation_variants_change_wiring() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let i_t = rand_image(&mut rng, 1, 16);
        let sid = rand_sid(&mut rng, 1, 10);

        let bare = tiny_generator(13, Variant::Bare, 10);
        let cache = bare.forward(&i_t, &sid).unwrap();
        assert_eq!(cache.output.i_r, cache.output.i_out, "bare has no image blend");
        assert!(cache.output.m_r.iter().all(|&v| v == 1.0));

        let concat = tiny_generator(14, Variant::Concat, 10);
        assert!(concat.concat_reduce.is_some());
        assert!(concat.sigma.is_none());
        let cache = concat.forward(&i_t, &sid).unwrap();
        assert!(cache.output.i_r.iter().all(|v| v.is_finite()));

        let blendv = tiny_generator(15, Variant::Blend, 10);
        assert!(blendv.sigma.is_none());
        let cache = blendv.forward(&i_t, &sid).unwrap();
        let recomputed = blend_images(&cache.output.i_out, &cache.output.m_r, &i_t);
        assert_eq!(recomputed, cache.output.i_r);

        // n3d conditions on the embedding alone: sid dim is the embedding dim
        let n3d = tiny_generator(16, Variant::N3d, 6);
        assert_eq!(n3d.config.sid_dim, 6);
        let sid6 = rand_sid(&mut rng, 1, 6);
        assert!(n3d.forward(&i_t, &sid6).is_ok());
        assert!(n3d.forward(&i_t, &sid).is_err(), "wrong sid width is rejected");

        assert!("nope".parse::<Variant>().is_err());
        assert_eq!("concat".parse::<Variant>().unwrap(), Variant::Concat);
    }

    #[test]
    fn resolution_contract_holds_for_all_outputs() {
        for size in [16usize, 32] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let gen = Generator::new(
                &mut rng,
                GeneratorConfig {
                    image_size: size,
                    base_channels: 4,
                    sid_dim: 8,
                    upsample_stages: 2,
                    variant: Variant::Full,
                },
            )
            .unwrap();
            let i_t = rand_image(&mut rng, 1, size);
            let sid = rand_sid(&mut rng, 1, 8);
            let out = gen.forward(&i_t, &sid).unwrap().output;
            assert_eq!(out.i_r.dim(), (1, 3, size, size));
            assert_eq!(out.i_out.dim(), (1, 3, size, size));
            assert_eq!(out.m_r.dim(), (1, 1, size, size));
            assert_eq!(out.i_low.dim(), (1, 3, size / 4, size / 4));
            assert_eq!(out.m_low.dim(), (1, 1, size / 4, size / 4));
        }
    }

    /// Make every leaky relu an identity. Instance normalization centers
    /// pre-activations exactly at the kink, so finite differences across
    /// the real activation are dominated by mask flips; the mask mechanics
    /// are verified at layer level, and with slope one the remaining
    /// composition is smooth and must match tightly.
    fn set_slopes(gen: &mut Generator, slope: f32) {
        for block in [
            &mut gen.enc_block1,
            &mut gen.enc_block2,
            &mut gen.enc_block3,
        ] {
            block.slope = slope;
        }
        gen.dec_block0.slope = slope;
        gen.dec_block1.slope = slope;
        if let Some(sg) = &mut gen.sigma {
            sg.slope = slope;
        }
        for stage in &mut gen.upsample.stages {
            for block in &mut stage.blocks {
                block.slope = slope;
            }
        }
    }

    /// Directional finite-difference check of the full generator backward:
    /// perturb all parameters along a random direction and compare the
    /// objective's directional derivative with the accumulated gradients.
    #[test]
    fn generator_backward_matches_directional_fd() {
        for variant in [Variant::Full, Variant::Concat, Variant::Blend, Variant::Bare] {
            let mut gen = tiny_generator(18, variant, 10);
            set_slopes(&mut gen, 1.0);
            let gen = gen;
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let i_t = rand_image(&mut rng, 1, 16);
            let sid = rand_sid(&mut rng, 1, 10);

            // random but fixed loss weights on all four outputs
            let mut wrng = ChaCha8Rng::seed_from_u64(20);
            let cache = gen.forward(&i_t, &sid).unwrap();
            let w_ir = Array4::from_shape_simple_fn(cache.output.i_r.raw_dim(), || {
                randn(&mut wrng) as f32
            });
            let w_ilow = Array4::from_shape_simple_fn(cache.output.i_low.raw_dim(), || {
                randn(&mut wrng) as f32
            });
            let w_mlow = Array4::from_shape_simple_fn(cache.output.m_low.raw_dim(), || {
                randn(&mut wrng) as f32
            });
            let w_mr = Array4::from_shape_simple_fn(cache.output.m_r.raw_dim(), || {
                randn(&mut wrng) as f32
            });

            let objective = |g: &Generator| -> f32 {
                let cache = g.forward(&i_t, &sid).unwrap();
                (&cache.output.i_r * &w_ir).sum()
                    + (&cache.output.i_low * &w_ilow).sum()
                    + (&cache.output.m_low * &w_mlow).sum()
                    + (&cache.output.m_r * &w_mr).sum()
            };

            let ext = SwapGrads {
                d_i_r: w_ir.clone(),
                d_i_low: w_ilow.clone(),
                d_m_low: w_mlow.clone(),
                d_m_r: if variant.has_image_blend() {
                    w_mr.clone()
                } else {
                    Array4::zeros(cache.output.m_r.raw_dim())
                },
            };
            let mut grads = zeroed(&gen);
            gen.backward(&cache, &ext, &mut grads);

            // random parameter direction
            let mut drng = ChaCha8Rng::seed_from_u64(21);
            let dir: Vec<ndarray::ArrayD<f32>> = gen
                .param_views()
                .iter()
                .map(|p| ndarray::ArrayD::from_shape_simple_fn(p.raw_dim(), || randn(&mut drng) as f32))
                .collect();
            let h = 1e-4f32;
            let mut gp = gen.clone();
            for (mut view, d) in gp.param_views_mut().into_iter().zip(dir.iter()) {
                ndarray::Zip::from(&mut view).and(d).for_each(|v, &dd| *v += h * dd);
            }
            let mut gm = gen.clone();
            for (mut view, d) in gm.param_views_mut().into_iter().zip(dir.iter()) {
                ndarray::Zip::from(&mut view).and(d).for_each(|v, &dd| *v -= h * dd);
            }
            let fd = (objective(&gp) - objective(&gm)) / (2.0 * h);
            let analytic: f32 = grads
                .param_views()
                .iter()
                .zip(dir.iter())
                .map(|(g, d)| {
                    g.iter().zip(d.iter()).map(|(a, b)| a * b).sum::<f32>()
                })
                .sum();
            // the composition is steeply curved along full-parameter
            // directions (instance norm renormalizes under perturbation),
            // so the step must stay small; wiring bugs shift the analytic
            // value by entire path contributions, far above this tolerance
            let rel = (fd - analytic).abs() / analytic.abs().max(1.0);
            assert!(
                rel < 2e-2,
                "variant {variant}: fd {fd} vs analytic {analytic} (rel {rel})"
            );
        }
    }

    /// The target-image gradient of the pass must match finite differences;
    /// the cycle pass depends on it.
    #[test]
    fn target_image_gradient_matches_directional_fd() {
        let mut gen = tiny_generator(22, Variant::Full, 10);
        set_slopes(&mut gen, 1.0);
        let gen = gen;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let i_t = rand_image(&mut rng, 1, 16);
        let sid = rand_sid(&mut rng, 1, 10);
        let cache = gen.forward(&i_t, &sid).unwrap();
        let w_ir = Array4::from_shape_simple_fn(cache.output.i_r.raw_dim(), || randn(&mut rng) as f32);

        let ext = SwapGrads {
            d_i_r: w_ir.clone(),
            d_i_low: Array4::zeros(cache.output.i_low.raw_dim()),
            d_m_low: Array4::zeros(cache.output.m_low.raw_dim()),
            d_m_r: Array4::zeros(cache.output.m_r.raw_dim()),
        };
        let mut grads = zeroed(&gen);
        let d_target = gen.backward(&cache, &ext, &mut grads);

        let dir = Array4::from_shape_simple_fn(i_t.raw_dim(), || randn(&mut rng) as f32 * 0.3);
        let h = 1e-3f32;
        let f = |img: &Array4<f32>| (&gen.forward(img, &sid).unwrap().output.i_r * &w_ir).sum();
        let fd = (f(&(&i_t + &(&dir * h))) - f(&(&i_t - &(&dir * h)))) / (2.0 * h);
        let analytic = (&d_target * &dir).sum();
        let rel = (fd - analytic).abs() / analytic.abs().max(1.0);
        assert!(rel < 1e-2, "fd {fd} vs analytic {analytic}");
    }
}
