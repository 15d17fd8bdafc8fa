//! Procedural face-image oracle.
//!
//! Replaces real datasets: every image is rendered from known shape-model
//! parameters, so each sample carries exact ground truth for coefficients,
//! landmarks, the face mask, and the identity label. Rendering is a pure
//! function of `(world, coefficients, background_seed, occlusion)`; nothing
//! reads ambient randomness.
//!
//! The render style is a flat-shaded head silhouette (filled convex hull of
//! the projected mesh) with eye/nose/mouth features attached to designated
//! landmark vertices, a directional lighting field derived from the
//! background seed, and a smooth procedural background texture. Skin tint is
//! a fixed linear function of the identity coefficients, so identity is
//! carried jointly by geometry and color and remains fully determined by
//! alpha.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphable::{
    project_landmarks, reconstruct_shape, Coefficients, LandmarkSet, Pose, ShapeBasis,
};
use crate::nn::randn;

/// Sampling ranges for per-sample draws, in model units / radians / pixels
/// (translation and scale ranges are stated as fractions of image size).
pub mod ranges {
    /// Expression coefficients: uniform in `[-BETA, BETA]`.
    pub const BETA: f64 = 0.7;
    /// Out-of-plane tilt (x and y Euler angles), radians.
    pub const TILT: f64 = 0.25;
    /// In-plane rotation (z Euler angle), radians.
    pub const ROLL: f64 = 0.30;
    /// Translation offset from image center, as a fraction of image size.
    pub const TRANSLATION_FRAC: f64 = 1.0 / 16.0;
    /// Weak-perspective scale, as a fraction of image size.
    pub const SCALE_FRAC: (f64, f64) = (0.14, 0.20);
    /// Identity bank ball radius.
    pub const ALPHA_RADIUS: f64 = 2.5;
    /// Probability that a sample carries an occluding rectangle.
    pub const OCCLUSION_PROB: f64 = 0.2;
}

/// Ellipsoid radii of the mean head, model units.
const HEAD_RADII: [f64; 3] = [1.4, 1.8, 1.2];
/// Base skin color in `[-1, 1]` RGB.
const SKIN_BASE: [f64; 3] = [0.40, 0.05, -0.20];
/// Gain of the identity-to-tint linear map.
const TINT_GAIN: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub vertex_count: usize,
    pub id_dim: usize,
    pub exp_dim: usize,
    pub image_size: usize,
    pub identity_count: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            vertex_count: 64,
            id_dim: 16,
            exp_dim: 8,
            image_size: 64,
            identity_count: 100,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vertex_count == 0 || self.identity_count == 0 {
            return Err(Error::InvalidConfig("counts must be positive".into()));
        }
        if self.id_dim == 0 || self.id_dim >= 3 * self.vertex_count {
            return Err(Error::InvalidConfig(format!(
                "id_dim {} must be in [1, 3*vertex_count) = [1, {})",
                self.id_dim,
                3 * self.vertex_count
            )));
        }
        if self.exp_dim == 0 || self.exp_dim >= 3 * self.vertex_count {
            return Err(Error::InvalidConfig(format!(
                "exp_dim {} must be in [1, 3*vertex_count) = [1, {})",
                self.exp_dim,
                3 * self.vertex_count
            )));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Axis-aligned occluding rectangle, pixel bounds half-open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub color: [f32; 3],
}

impl OcclusionRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// One synthetic-world record with exact ground truth.
#[derive(Debug, Clone)]
pub struct FaceSample {
    /// `(3, H, W)`, values in `[-1, 1]`.
    pub image: Array3<f32>,
    pub coefficients: Coefficients,
    /// Raw projected positions; may fall outside image bounds.
    pub landmarks: LandmarkSet,
    /// `(H, W)`, values in `{0, 1}`: rendered face pixels minus occluder.
    pub mask: Array2<f32>,
    pub identity_label: usize,
}

/// Designated feature vertices on the mean shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureVertices {
    pub left_eye: usize,
    pub right_eye: usize,
    pub nose: usize,
    pub mouth: usize,
}

/// Shape basis plus the fixed identity bank and rendering constants.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub basis: ShapeBasis,
    /// `(identity_count, id_dim)` fixed identity coefficient vectors.
    pub identity_bank: Array2<f64>,
    /// `(3, id_dim)` linear map from alpha to skin tint.
    pub tint_map: Array2<f64>,
    pub features: FeatureVertices,
}

/// Deterministic golden-spiral points on the head ellipsoid.
fn mean_head(vertex_count: usize) -> Array2<f64> {
    let golden = std::f64::consts::PI * (1.0 + 5.0f64.sqrt());
    let mut mesh = Array2::<f64>::zeros((vertex_count, 3));
    for i in 0..vertex_count {
        let t = (i as f64 + 0.5) / vertex_count as f64;
        let lat = (1.0 - 2.0 * t).acos();
        let lon = golden * i as f64;
        mesh[(i, 0)] = lat.sin() * lon.cos() * HEAD_RADII[0];
        mesh[(i, 1)] = (1.0 - 2.0 * t) * HEAD_RADII[1];
        mesh[(i, 2)] = lat.sin() * lon.sin() * HEAD_RADII[2];
    }
    mesh
}

/// Orthonormalize columns of a random Gaussian matrix (modified
/// Gram-Schmidt with one re-orthogonalization pass).
fn orthonormal_basis(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((rows, cols), || randn(rng));
    for j in 0..cols {
        for _ in 0..2 {
            for k in 0..j {
                let proj = m.column(j).dot(&m.column(k));
                let col_k = m.column(k).to_owned();
                let mut col_j = m.column_mut(j);
                col_j.zip_mut_with(&col_k, |a, &b| *a -= proj * b);
            }
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        m.column_mut(j).mapv_inplace(|v| v / norm);
    }
    m
}

fn nearest_vertex(mesh: &Array2<f64>, target: [f64; 3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for vi in 0..mesh.nrows() {
        if mesh[(vi, 2)] <= 0.0 {
            continue; // front hemisphere only
        }
        let d = (0..3).map(|ax| (mesh[(vi, ax)] - target[ax]).powi(2)).sum::<f64>();
        if d < best_d {
            best_d = d;
            best = vi;
        }
    }
    best
}

/// Build the world: basis, identity bank, tint map, feature vertices.
/// Bitwise deterministic in the spec.
pub fn build_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mean_shape = mean_head(spec.vertex_count);
    let b_id = orthonormal_basis(&mut rng, 3 * spec.vertex_count, spec.id_dim);
    let b_exp = orthonormal_basis(&mut rng, 3 * spec.vertex_count, spec.exp_dim);

    let mut identity_bank = Array2::<f64>::zeros((spec.identity_count, spec.id_dim));
    for mut row in identity_bank.rows_mut() {
        let mut v: Vec<f64> = (0..spec.id_dim).map(|_| randn(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let u: f64 = rng.gen_range(0.0..1.0f64);
        let radius = ranges::ALPHA_RADIUS * u.powf(1.0 / spec.id_dim as f64);
        for x in &mut v {
            *x = *x / norm * radius;
        }
        row.assign(&Array1::from_vec(v));
    }

    let mut tint_map = Array2::<f64>::zeros((3, spec.id_dim));
    for mut row in tint_map.rows_mut() {
        let mut v: Vec<f64> = (0..spec.id_dim).map(|_| randn(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x = *x / norm * TINT_GAIN;
        }
        row.assign(&Array1::from_vec(v));
    }

    let features = FeatureVertices {
        left_eye: nearest_vertex(&mean_shape, [-0.70, -0.70, 0.80]),
        right_eye: nearest_vertex(&mean_shape, [0.70, -0.70, 0.80]),
        nose: nearest_vertex(&mean_shape, [0.0, 0.15, 1.15]),
        mouth: nearest_vertex(&mean_shape, [0.0, 0.95, 0.75]),
    };

    let basis = ShapeBasis {
        mean_shape,
        b_id,
        b_exp,
        landmark_indices: (0..spec.vertex_count).collect(),
    };
    basis.validate()?;
    Ok(World {
        spec: spec.clone(),
        basis,
        identity_bank,
        tint_map,
        features,
    })
}

/// Convex hull via monotone chain.
fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let n = pts.len();
    if n < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Scanline fill of a convex polygon into a boolean grid, pixel centers at
/// integer + 0.5.
fn fill_convex(poly: &[(f64, f64)], size: usize) -> Vec<bool> {
    let mut grid = vec![false; size * size];
    if poly.len() < 3 {
        return grid;
    }
    for py in 0..size {
        let yc = py as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::with_capacity(4);
        for i in 0..poly.len() {
            let (x1, y1) = poly[i];
            let (x2, y2) = poly[(i + 1) % poly.len()];
            if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                xs.push(x1 + (yc - y1) * (x2 - x1) / (y2 - y1));
            }
        }
        if xs.len() < 2 {
            continue;
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (lo, hi) = (xs[0], xs[xs.len() - 1]);
        let px0 = (lo - 0.5).ceil().max(0.0) as usize;
        let px1 = (hi - 0.5).floor().min(size as f64 - 1.0);
        if px1 < 0.0 {
            continue;
        }
        for px in px0..=(px1 as usize) {
            grid[py * size + px] = true;
        }
    }
    grid
}

/// Fill a rotated ellipse into an RGB image, modulated by the light field.
#[allow(clippy::too_many_arguments)]
fn fill_ellipse(
    image: &mut Array3<f32>,
    center: (f64, f64),
    rx: f64,
    ry: f64,
    angle: f64,
    color: [f64; 3],
    light: &dyn Fn(f64, f64) -> f64,
    size: usize,
) {
    if rx <= 0.0 || ry <= 0.0 {
        return;
    }
    let (sa, ca) = angle.sin_cos();
    let reach = rx.max(ry) + 1.0;
    let y_lo = ((center.1 - reach).floor().max(0.0)).min(size as f64 - 1.0) as usize;
    let y_hi = ((center.1 + reach).ceil().max(0.0)).min(size as f64 - 1.0) as usize;
    let x_lo = ((center.0 - reach).floor().max(0.0)).min(size as f64 - 1.0) as usize;
    let x_hi = ((center.0 + reach).ceil().max(0.0)).min(size as f64 - 1.0) as usize;
    for py in y_lo..=y_hi {
        for px in x_lo..=x_hi {
            let dx = px as f64 + 0.5 - center.0;
            let dy = py as f64 + 0.5 - center.1;
            let u = ca * dx + sa * dy;
            let v = -sa * dx + ca * dy;
            if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                let l = light(px as f64 + 0.5, py as f64 + 0.5);
                for ch in 0..3 {
                    image[(ch, py, px)] = shade(color[ch], l);
                }
            }
        }
    }
}

/// Apply a lighting factor in display space: `[-1,1] -> [0,1] -> scale -> back`.
fn shade(color: f64, light: f64) -> f32 {
    let c01 = (color + 1.0) * 0.5;
    ((c01 * light) * 2.0 - 1.0).clamp(-1.0, 1.0) as f32
}

impl World {
    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    pub fn identity_count(&self) -> usize {
        self.spec.identity_count
    }

    /// Nearest identity-bank row by Euclidean distance on alpha.
    pub fn nearest_identity(&self, alpha: &Array1<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, row) in self.identity_bank.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(alpha.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Render one sample. Pure function of all arguments.
    pub fn render(
        &self,
        coefficients: &Coefficients,
        background_seed: u64,
        occlusion: Option<&OcclusionRect>,
    ) -> FaceSample {
        let size = self.spec.image_size;
        let mut env = ChaCha8Rng::seed_from_u64(background_seed);

        // background texture
        let mut image = Array3::<f32>::zeros((3, size, size));
        for ch in 0..3 {
            let k1x: f64 = env.gen_range(0.06..0.35);
            let k1y: f64 = env.gen_range(0.06..0.35);
            let p1: f64 = env.gen_range(0.0..std::f64::consts::TAU);
            let k2x: f64 = env.gen_range(0.06..0.35);
            let k2y: f64 = env.gen_range(0.06..0.35);
            let p2: f64 = env.gen_range(0.0..std::f64::consts::TAU);
            for py in 0..size {
                for px in 0..size {
                    let (x, y) = (px as f64, py as f64);
                    let v = 0.30 * (k1x * x + k1y * y + p1).sin()
                        + 0.22 * (k2x * x - k2y * y + p2).sin();
                    image[(ch, py, px)] = v as f32;
                }
            }
        }

        // directional light field, also derived from the background seed
        let l0: f64 = env.gen_range(0.72..0.95);
        let l1: f64 = env.gen_range(0.05..0.22);
        let phi: f64 = env.gen_range(0.0..std::f64::consts::TAU);
        let half = size as f64 / 2.0;
        let light = move |x: f64, y: f64| -> f64 {
            (l0 + l1 * ((x - half) * phi.cos() + (y - half) * phi.sin()) / half)
                .clamp(0.45, 1.10)
        };

        // geometry
        let mesh = reconstruct_shape(&self.basis, &coefficients.alpha, &coefficients.beta)
            .expect("world coefficients must match basis dims");
        let landmarks =
            project_landmarks(&mesh, &coefficients.pose, &self.basis.landmark_indices)
                .expect("pose must be valid");
        let pts: Vec<(f64, f64)> = landmarks
            .points
            .rows()
            .into_iter()
            .map(|r| (r[0], r[1]))
            .collect();
        let hull = convex_hull(&pts);
        let face = fill_convex(&hull, size);

        // skin, tinted by identity coefficients
        let tint = self.tint_map.dot(&coefficients.alpha);
        let skin = [
            (SKIN_BASE[0] + tint[0]).clamp(-0.85, 0.85),
            (SKIN_BASE[1] + tint[1]).clamp(-0.85, 0.85),
            (SKIN_BASE[2] + tint[2]).clamp(-0.85, 0.85),
        ];
        for py in 0..size {
            for px in 0..size {
                if face[py * size + px] {
                    let l = light(px as f64 + 0.5, py as f64 + 0.5);
                    for ch in 0..3 {
                        image[(ch, py, px)] = shade(skin[ch], l);
                    }
                }
            }
        }

        // features at their landmark positions, rotating in-plane with pose
        let s = coefficients.pose.scale;
        let roll = coefficients.pose.rotation[2];
        let at = |vi: usize| -> (f64, f64) {
            (landmarks.points[(vi, 0)], landmarks.points[(vi, 1)])
        };
        let eye_open = 1.0 + 0.5 * coefficients.beta.get(1).copied().unwrap_or(0.0).tanh();
        let mouth_open = 1.0 + 0.6 * coefficients.beta.first().copied().unwrap_or(0.0).tanh();
        let eye_color = [-0.75, -0.75, -0.55];
        let nose_color = [
            skin[0] * 0.85 - 0.08,
            skin[1] * 0.85 - 0.08,
            skin[2] * 0.85 - 0.08,
        ];
        let mouth_color = [-0.10, -0.65, -0.55];
        fill_ellipse(
            &mut image,
            at(self.features.left_eye),
            0.16 * s,
            0.10 * s * eye_open,
            roll,
            eye_color,
            &light,
            size,
        );
        fill_ellipse(
            &mut image,
            at(self.features.right_eye),
            0.16 * s,
            0.10 * s * eye_open,
            roll,
            eye_color,
            &light,
            size,
        );
        fill_ellipse(
            &mut image,
            at(self.features.nose),
            0.09 * s,
            0.15 * s,
            roll,
            nose_color,
            &light,
            size,
        );
        fill_ellipse(
            &mut image,
            at(self.features.mouth),
            0.34 * s,
            0.10 * s * mouth_open,
            roll,
            mouth_color,
            &light,
            size,
        );

        // mask: face region minus occluder pixels
        let mut mask = Array2::<f32>::zeros((size, size));
        for py in 0..size {
            for px in 0..size {
                if face[py * size + px] {
                    mask[(py, px)] = 1.0;
                }
            }
        }
        if let Some(rect) = occlusion {
            for py in rect.y0..rect.y1.min(size) {
                for px in rect.x0..rect.x1.min(size) {
                    for ch in 0..3 {
                        image[(ch, py, px)] = rect.color[ch];
                    }
                    mask[(py, px)] = 0.0;
                }
            }
        }

        let identity_label = self.nearest_identity(&coefficients.alpha);
        FaceSample {
            image,
            coefficients: coefficients.clone(),
            landmarks,
            mask,
            identity_label,
        }
    }

    /// Draw per-sample expression, pose, background, and occlusion for a
    /// fixed identity, then render.
    pub fn sample_with_identity(&self, label: usize, rng: &mut ChaCha8Rng) -> FaceSample {
        assert!(label < self.spec.identity_count, "identity label out of range");
        let size = self.spec.image_size as f64;
        let alpha = self.identity_bank.row(label).to_owned();
        let beta = Array1::from_shape_simple_fn(self.spec.exp_dim, || {
            rng.gen_range(-ranges::BETA..ranges::BETA)
        });
        let t = size * ranges::TRANSLATION_FRAC;
        let pose = Pose {
            rotation: [
                rng.gen_range(-ranges::TILT..ranges::TILT),
                rng.gen_range(-ranges::TILT..ranges::TILT),
                rng.gen_range(-ranges::ROLL..ranges::ROLL),
            ],
            translation: [
                size / 2.0 + rng.gen_range(-t..t),
                size / 2.0 + rng.gen_range(-t..t),
            ],
            scale: rng.gen_range(size * ranges::SCALE_FRAC.0..size * ranges::SCALE_FRAC.1),
        };
        let background_seed: u64 = rng.gen();
        let occlusion = if rng.gen_bool(ranges::OCCLUSION_PROB) {
            Some(self.draw_occluder(&pose, rng))
        } else {
            None
        };
        let coefficients = Coefficients { alpha, beta, pose };
        let mut sample = self.render(&coefficients, background_seed, occlusion.as_ref());
        sample.identity_label = label;
        sample
    }

    /// Random occluding rectangle over the lower face.
    pub fn draw_occluder(&self, pose: &Pose, rng: &mut ChaCha8Rng) -> OcclusionRect {
        let unit = self.spec.image_size as f64 / 64.0;
        let cx = pose.translation[0] + rng.gen_range(-6.0 * unit..6.0 * unit);
        let cy = pose.translation[1] + rng.gen_range(2.0 * unit..10.0 * unit);
        let hw = rng.gen_range(4.0 * unit..10.0 * unit);
        let hh = rng.gen_range(3.0 * unit..7.0 * unit);
        let size = self.spec.image_size as f64;
        let x0 = (cx - hw).clamp(0.0, size - 1.0) as usize;
        let x1 = (cx + hw).clamp(1.0, size) as usize;
        let y0 = (cy - hh).clamp(0.0, size - 1.0) as usize;
        let y1 = (cy + hh).clamp(1.0, size) as usize;
        OcclusionRect {
            x0,
            y0,
            x1: x1.max(x0 + 1),
            y1: y1.max(y0 + 1),
            color: [
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            ],
        }
    }

    /// Draw a random identity label.
    pub fn random_identity(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(0..self.spec.identity_count)
    }
}

/// Shared same-identity schedule used by the trainer and tests.
pub fn draw_same_identity(rng: &mut ChaCha8Rng, ratio: f64) -> bool {
    rng.gen_bool(ratio)
}

/// Sample a source/target pair. `same_identity` forces equal labels with
/// independent expression, pose, background, and occlusion draws.
pub fn sample_pair(
    world: &World,
    same_identity: bool,
    rng: &mut ChaCha8Rng,
) -> (FaceSample, FaceSample) {
    let source_label = world.random_identity(rng);
    let target_label = if same_identity {
        source_label
    } else {
        // rejection sample a distinct label
        loop {
            let l = world.random_identity(rng);
            if l != source_label || world.spec.identity_count == 1 {
                break l;
            }
        }
    };
    let source = world.sample_with_identity(source_label, rng);
    let target = world.sample_with_identity(target_label, rng);
    (source, target)
}

/// Stack sample images into a `(B, 3, H, W)` batch tensor.
pub fn stack_images(samples: &[&FaceSample]) -> ndarray::Array4<f32> {
    let (c, h, w) = samples[0].image.dim();
    let mut out = ndarray::Array4::<f32>::zeros((samples.len(), c, h, w));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
    }
    out
}

/// Stack sample masks into a `(B, 1, H, W)` batch tensor.
pub fn stack_masks(samples: &[&FaceSample]) -> ndarray::Array4<f32> {
    let (h, w) = samples[0].mask.dim();
    let mut out = ndarray::Array4::<f32>::zeros((samples.len(), 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        out.slice_mut(ndarray::s![i, 0, .., ..]).assign(&s.mask);
    }
    out
}

// ---------------------------------------------------------------------------
// Image quantization and dataset IO
// ---------------------------------------------------------------------------

/// `[-1,1]` to 8-bit with round-half-away-from-zero.
pub fn f32_to_u8(v: f32) -> u8 {
    let scaled = (v.clamp(-1.0, 1.0) + 1.0) * 127.5;
    let rounded = if scaled >= 0.0 { (scaled + 0.5).floor() } else { (scaled - 0.5).ceil() };
    rounded.clamp(0.0, 255.0) as u8
}

/// 8-bit to `[-1,1]`: `pixel / 127.5 - 1`.
pub fn u8_to_f32(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Encode a `(3,H,W)` image to RGB8 for lossless PNG storage.
pub fn image_to_rgb8(image: &Array3<f32>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            f32_to_u8(image[(0, y as usize, x as usize)]),
            f32_to_u8(image[(1, y as usize, x as usize)]),
            f32_to_u8(image[(2, y as usize, x as usize)]),
        ])
    })
}

pub fn rgb8_to_image(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[(ch, y as usize, x as usize)] = u8_to_f32(px.0[ch]);
        }
    }
    out
}

pub const DATASET_FORMAT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub world_spec: WorldSpec,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    pub sidecar: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub coefficients: Coefficients,
    pub landmarks: Vec<[f64; 2]>,
    pub mask: String,
    pub identity_label: usize,
}

/// Write a dataset directory: one PNG per sample plus a JSON sidecar, a
/// mask PNG, and a top-level manifest.
pub fn write_dataset(dir: &Path, spec: &WorldSpec, samples: &[FaceSample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::create_dir_all(dir.join("sidecars"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let image_rel = format!("images/{i:06}.png");
        let mask_rel = format!("masks/{i:06}.png");
        let sidecar_rel = format!("sidecars/{i:06}.json");
        image_to_rgb8(&sample.image).save(dir.join(&image_rel))?;
        let (h, w) = sample.mask.dim();
        let mask_img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if sample.mask[(y as usize, x as usize)] > 0.5 { 255 } else { 0 }])
        });
        mask_img.save(dir.join(&mask_rel))?;
        let sidecar = Sidecar {
            coefficients: sample.coefficients.clone(),
            landmarks: sample
                .landmarks
                .points
                .rows()
                .into_iter()
                .map(|r| [r[0], r[1]])
                .collect(),
            mask: mask_rel,
            identity_label: sample.identity_label,
        };
        std::fs::write(dir.join(&sidecar_rel), serde_json::to_vec_pretty(&sidecar)?)?;
        entries.push(ManifestEntry {
            index: i,
            image: image_rel,
            sidecar: sidecar_rel,
        });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION.to_string(),
        world_spec: spec.clone(),
        samples: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Read a dataset directory back. Images round-trip through the 8-bit
/// quantization; ground-truth coefficients and landmarks are exact.
pub fn read_dataset(dir: &Path) -> Result<(WorldSpec, Vec<FaceSample>)> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "unsupported dataset format version '{}'",
            manifest.format_version
        )));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let img = image::open(dir.join(&entry.image))?.to_rgb8();
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(dir.join(&entry.sidecar))?)?;
        let mask_img = image::open(dir.join(&sidecar.mask))?.to_luma8();
        let (w, h) = mask_img.dimensions();
        let mut mask = Array2::<f32>::zeros((h as usize, w as usize));
        for (x, y, px) in mask_img.enumerate_pixels() {
            mask[(y as usize, x as usize)] = if px.0[0] > 127 { 1.0 } else { 0.0 };
        }
        let n = sidecar.landmarks.len();
        let mut points = Array2::<f64>::zeros((n, 2));
        for (i, lm) in sidecar.landmarks.iter().enumerate() {
            points[(i, 0)] = lm[0];
            points[(i, 1)] = lm[1];
        }
        samples.push(FaceSample {
            image: rgb8_to_image(&img),
            coefficients: sidecar.coefficients,
            landmarks: LandmarkSet { points },
            mask,
            identity_label: sidecar.identity_label,
        });
    }
    Ok((manifest.world_spec, samples))
}
