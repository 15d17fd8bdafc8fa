//! Affine 3D face shape model, weak-perspective landmark projection, and
//! coefficient recombination.
//!
//! Geometry runs in f64 end to end. The shape model is
//! `S = mean + B_id * alpha + B_exp * beta`; projection applies Euler
//! rotation (X, then Y, then Z), drops depth, scales, and translates in the
//! image plane. The projected y axis increases downward, matching image row
//! order.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

pub const BASIS_FORMAT_VERSION: &str = "1";

/// Weak-perspective pose: Euler angles in radians, image-plane translation
/// in pixels, positive uniform scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [f64; 3],
    pub translation: [f64; 2],
    pub scale: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [0.0; 3],
            translation: [0.0; 2],
            scale: 1.0,
        }
    }
}

/// Identity, expression, and pose parameters for one face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
    pub pose: Pose,
}

impl Coefficients {
    pub fn zeros(id_dim: usize, exp_dim: usize) -> Self {
        Coefficients {
            alpha: Array1::zeros(id_dim),
            beta: Array1::zeros(exp_dim),
            pose: Pose::identity(),
        }
    }

    pub fn flat_len(id_dim: usize, exp_dim: usize) -> usize {
        id_dim + exp_dim + 6
    }
}

/// Projected 2D landmark positions, `(N, 2)` pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Array2<f64>,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }
}

/// Mean shape plus identity/expression PCA bases and landmark vertex ids.
#[derive(Debug, Clone)]
pub struct ShapeBasis {
    /// `(V, 3)` mean shape in model units.
    pub mean_shape: Array2<f64>,
    /// `(3V, id_dim)` identity basis, orthonormal columns.
    pub b_id: Array2<f64>,
    /// `(3V, exp_dim)` expression basis, orthonormal columns.
    pub b_exp: Array2<f64>,
    /// Distinct vertex indices projected as landmarks.
    pub landmark_indices: Vec<usize>,
}

impl ShapeBasis {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.nrows()
    }

    pub fn id_dim(&self) -> usize {
        self.b_id.ncols()
    }

    pub fn exp_dim(&self) -> usize {
        self.b_exp.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        if self.b_id.nrows() != 3 * v || self.b_exp.nrows() != 3 * v {
            return Err(Error::DimensionMismatch(format!(
                "basis rows {} / {} do not match 3*V = {}",
                self.b_id.nrows(),
                self.b_exp.nrows(),
                3 * v
            )));
        }
        let mut seen = vec![false; v];
        for &i in &self.landmark_indices {
            if i >= v {
                return Err(Error::InvalidConfig(format!(
                    "landmark index {i} out of range for {v} vertices"
                )));
            }
            if seen[i] {
                return Err(Error::InvalidConfig(format!("duplicate landmark index {i}")));
            }
            seen[i] = true;
        }
        for m in [&self.mean_shape, &self.b_id, &self.b_exp] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig("basis contains non-finite values".into()));
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(BASIS_FORMAT_VERSION);
        c.put_f64("mean_shape", self.mean_shape.clone().into_dyn());
        c.put_f64("b_id", self.b_id.clone().into_dyn());
        c.put_f64("b_exp", self.b_exp.clone().into_dyn());
        c.put_i64(
            "landmark_indices",
            self.landmark_indices.iter().map(|&i| i as i64).collect(),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.version() != BASIS_FORMAT_VERSION {
            return Err(Error::Container(format!(
                "unsupported basis format version '{}'",
                c.version()
            )));
        }
        let basis = ShapeBasis {
            mean_shape: c
                .f64("mean_shape")?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Container(e.to_string()))?,
            b_id: c
                .f64("b_id")?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Container(e.to_string()))?,
            b_exp: c
                .f64("b_exp")?
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Container(e.to_string()))?,
            landmark_indices: c.i64("landmark_indices")?.iter().map(|&i| i as usize).collect(),
        };
        basis.validate()?;
        Ok(basis)
    }
}

/// `S = mean + reshape(B_id * alpha) + reshape(B_exp * beta)`, `(V, 3)`,
/// vertex-major (each vertex contributes a consecutive x,y,z triple).
pub fn reconstruct_shape(
    basis: &ShapeBasis,
    alpha: &Array1<f64>,
    beta: &Array1<f64>,
) -> Result<Array2<f64>> {
    if alpha.len() != basis.id_dim() || beta.len() != basis.exp_dim() {
        return Err(Error::DimensionMismatch(format!(
            "coefficients ({}, {}) vs basis ({}, {})",
            alpha.len(),
            beta.len(),
            basis.id_dim(),
            basis.exp_dim()
        )));
    }
    let v = basis.vertex_count();
    let offset = basis.b_id.dot(alpha) + basis.b_exp.dot(beta);
    let mut mesh = basis.mean_shape.clone();
    for vi in 0..v {
        for ax in 0..3 {
            mesh[(vi, ax)] += offset[3 * vi + ax];
        }
    }
    Ok(mesh)
}

/// Euler rotation matrix, X applied first, then Y, then Z: `R = Rz Ry Rx`.
pub fn rotation_matrix(angles: &[f64; 3]) -> [[f64; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Partial derivatives of [`rotation_matrix`] with respect to each angle.
pub fn rotation_matrix_grads(angles: &[f64; 3]) -> [[[f64; 3]; 3]; 3] {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    // dR/dx
    let dx = [
        [0.0, cz * sy * cx + sz * sx, -cz * sy * sx + sz * cx],
        [0.0, sz * sy * cx - cz * sx, -sz * sy * sx - cz * cx],
        [0.0, cy * cx, -cy * sx],
    ];
    // dR/dy
    let dy = [
        [-cz * sy, cz * cy * sx, cz * cy * cx],
        [-sz * sy, sz * cy * sx, sz * cy * cx],
        [-cy, -sy * sx, -sy * cx],
    ];
    // dR/dz
    let dz = [
        [-sz * cy, -sz * sy * sx - cz * cx, -sz * sy * cx + cz * sx],
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [0.0, 0.0, 0.0],
    ];
    [dx, dy, dz]
}

fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Project selected mesh vertices: `q = scale * drop_z(R v) + translation`.
pub fn project_landmarks(
    mesh: &Array2<f64>,
    pose: &Pose,
    landmark_indices: &[usize],
) -> Result<LandmarkSet> {
    if pose.scale <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "pose scale must be positive, got {}",
            pose.scale
        )));
    }
    let v = mesh.nrows();
    let r = rotation_matrix(&pose.rotation);
    let mut points = Array2::<f64>::zeros((landmark_indices.len(), 2));
    for (row, &vi) in landmark_indices.iter().enumerate() {
        if vi >= v {
            return Err(Error::InvalidConfig(format!(
                "landmark index {vi} out of range for {v} vertices"
            )));
        }
        let p = rotate(&r, [mesh[(vi, 0)], mesh[(vi, 1)], mesh[(vi, 2)]]);
        points[(row, 0)] = pose.scale * p[0] + pose.translation[0];
        points[(row, 1)] = pose.scale * p[1] + pose.translation[1];
    }
    Ok(LandmarkSet { points })
}

/// Source identity with target expression and posture.
pub fn recombine_coefficients(source: &Coefficients, target: &Coefficients) -> Result<Coefficients> {
    if source.alpha.len() != target.alpha.len() || source.beta.len() != target.beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "source ({}, {}) vs target ({}, {})",
            source.alpha.len(),
            source.beta.len(),
            target.alpha.len(),
            target.beta.len()
        )));
    }
    Ok(Coefficients {
        alpha: source.alpha.clone(),
        beta: target.beta.clone(),
        pose: target.pose.clone(),
    })
}

/// Deterministic vector layout: `[alpha | beta | rotation | translation | scale]`.
pub fn flatten_coefficients(c: &Coefficients) -> Array1<f64> {
    let mut out = Vec::with_capacity(c.alpha.len() + c.beta.len() + 6);
    out.extend(c.alpha.iter());
    out.extend(c.beta.iter());
    out.extend_from_slice(&c.pose.rotation);
    out.extend_from_slice(&c.pose.translation);
    out.push(c.pose.scale);
    Array1::from_vec(out)
}

/// Inverse of [`flatten_coefficients`].
pub fn unflatten_coefficients(
    values: &Array1<f64>,
    id_dim: usize,
    exp_dim: usize,
) -> Result<Coefficients> {
    if values.len() != Coefficients::flat_len(id_dim, exp_dim) {
        return Err(Error::DimensionMismatch(format!(
            "flat length {} vs expected {}",
            values.len(),
            Coefficients::flat_len(id_dim, exp_dim)
        )));
    }
    let v = values.as_slice().unwrap();
    Ok(Coefficients {
        alpha: Array1::from_vec(v[..id_dim].to_vec()),
        beta: Array1::from_vec(v[id_dim..id_dim + exp_dim].to_vec()),
        pose: Pose {
            rotation: [v[id_dim + exp_dim], v[id_dim + exp_dim + 1], v[id_dim + exp_dim + 2]],
            translation: [v[id_dim + exp_dim + 3], v[id_dim + exp_dim + 4]],
            scale: v[id_dim + exp_dim + 5],
        },
    })
}

/// Gradient of projected landmarks with respect to all coefficients.
///
/// Given `dL/dq` for every landmark, returns the flat gradient in the
/// [`flatten_coefficients`] layout. Used by the shape loss to push landmark
/// error through the reconstruction-and-projection chain.
pub fn landmark_coefficient_vjp(
    basis: &ShapeBasis,
    coeffs: &Coefficients,
    dq: &Array2<f64>,
) -> Result<Array1<f64>> {
    let n = basis.landmark_indices.len();
    if dq.dim() != (n, 2) {
        return Err(Error::DimensionMismatch(format!(
            "dq shape {:?} vs ({n}, 2)",
            dq.dim()
        )));
    }
    let mesh = reconstruct_shape(basis, &coeffs.alpha, &coeffs.beta)?;
    let r = rotation_matrix(&coeffs.pose.rotation);
    let drs = rotation_matrix_grads(&coeffs.pose.rotation);
    let s = coeffs.pose.scale;

    let mut d_mesh = Array2::<f64>::zeros(mesh.dim());
    let mut d_rot = [0.0f64; 3];
    let mut d_trans = [0.0f64; 2];
    let mut d_scale = 0.0f64;

    for (row, &vi) in basis.landmark_indices.iter().enumerate() {
        let v = [mesh[(vi, 0)], mesh[(vi, 1)], mesh[(vi, 2)]];
        let rv = rotate(&r, v);
        let (gx, gy) = (dq[(row, 0)], dq[(row, 1)]);

        d_scale += gx * rv[0] + gy * rv[1];
        d_trans[0] += gx;
        d_trans[1] += gy;
        for (ai, dr) in drs.iter().enumerate() {
            let drv = rotate(dr, v);
            d_rot[ai] += s * (gx * drv[0] + gy * drv[1]);
        }
        // dL/dv = s * R^T * [gx, gy, 0]
        for ax in 0..3 {
            d_mesh[(vi, ax)] += s * (r[0][ax] * gx + r[1][ax] * gy);
        }
    }

    let flat_mesh = Array1::from_iter(d_mesh.iter().copied());
    let d_alpha = basis.b_id.t().dot(&flat_mesh);
    let d_beta = basis.b_exp.t().dot(&flat_mesh);

    let mut out = Vec::with_capacity(Coefficients::flat_len(basis.id_dim(), basis.exp_dim()));
    out.extend(d_alpha.iter());
    out.extend(d_beta.iter());
    out.extend_from_slice(&d_rot);
    out.extend_from_slice(&d_trans);
    out.push(d_scale);
    Ok(Array1::from_vec(out))
}
