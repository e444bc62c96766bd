//! Pinhole cameras, rays, voxel grids and bilinear interpolation.
//!
//! Pixel convention used throughout the crate: `(u, v) = (column, row)` with
//! the origin at the center of the top-left texel. A feature map of size
//! `h × w` is therefore addressable on `[0, w-1] × [0, h-1]`.
//!
//! Camera frame: x right, y down, z forward. Extrinsics map world to camera.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Points at or behind this camera-frame depth do not project.
pub const EPS_DEPTH: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix4<f64>,
    height: usize,
    width: usize,
    projection: Matrix3x4<f64>,
    k_inv: Matrix3<f64>,
    rotation_t: Matrix3<f64>,
    center: Vec3,
}

/// On-disk camera layout: row-major matrices plus image size.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub intrinsics: [f64; 9],
    pub extrinsics: [f64; 16],
    pub height: usize,
    pub width: usize,
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        Camera::new(
            Matrix3::from_row_slice(&r.intrinsics),
            Matrix4::from_row_slice(&r.extrinsics),
            r.height,
            r.width,
        )
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let mut intrinsics = [0.0; 9];
        let mut extrinsics = [0.0; 16];
        for r in 0..3 {
            for col in 0..3 {
                intrinsics[r * 3 + col] = c.intrinsics[(r, col)];
            }
        }
        for r in 0..4 {
            for col in 0..4 {
                extrinsics[r * 4 + col] = c.extrinsics[(r, col)];
            }
        }
        CameraRecord {
            intrinsics,
            extrinsics,
            height: c.height,
            width: c.width,
        }
    }
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        extrinsics: Matrix4<f64>,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if !(intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidCamera("image size must be nonzero".into()));
        }
        let rot = extrinsics.fixed_view::<3, 3>(0, 0).into_owned();
        let gram = rot.transpose() * rot;
        if (gram - Matrix3::identity()).abs().max() > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera("rotation block is not orthonormal".into()));
        }
        let top = extrinsics.fixed_view::<3, 4>(0, 0).into_owned();
        let projection = intrinsics * top;
        let k_inv = intrinsics
            .try_inverse()
            .ok_or_else(|| Error::InvalidCamera("intrinsics are singular".into()))?;
        if projection.fixed_view::<3, 3>(0, 0).determinant().abs() < 1e-12 {
            return Err(Error::InvalidCamera("projection matrix has rank < 3".into()));
        }
        let t: Vec3 = extrinsics.fixed_view::<3, 1>(0, 3).into_owned();
        let rotation_t = rot.transpose();
        let center = -(rotation_t * t);
        Ok(Camera {
            intrinsics,
            extrinsics,
            height,
            width,
            projection,
            k_inv,
            rotation_t,
            center,
        })
    }

    /// Camera at `eye` looking at `target`, square pixels, principal point at
    /// the image center, vertical field of view `fov_y` in radians.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        world_up: Vec3,
        fov_y: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(&world_up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("up vector parallel to view".into()))?;
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut ext = Matrix4::identity();
        ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        ext.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        let k = Matrix3::new(
            f,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            f,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Camera::new(k, ext, height, width)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &Matrix4<f64> {
        &self.extrinsics
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// World-space camera center.
    pub fn center(&self) -> Vec3 {
        self.center
    }

    /// The composed 3×4 projection matrix `K · [R | t]`.
    pub fn projection_matrix(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Copy of this camera with the principal point shifted by `(du, dv)` px.
    pub fn with_principal_shift(&self, du: f64, dv: f64) -> Self {
        let mut k = self.intrinsics;
        k[(0, 2)] += du;
        k[(1, 2)] += dv;
        Camera::new(k, self.extrinsics, self.height, self.width)
            .expect("shifting the principal point keeps a valid camera")
    }

    pub fn project(&self, p: &Vec3) -> Result<Projection> {
        let q = self.projection * p.push(1.0);
        if q.z <= EPS_DEPTH {
            return Err(Error::NonPositiveDepth(q.z));
        }
        Ok(Projection {
            u: q.x / q.z,
            v: q.y / q.z,
            depth: q.z,
        })
    }

    /// Inverse of [`Camera::project`] for a pixel at camera-frame depth `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if depth <= EPS_DEPTH {
            return Err(Error::NonPositiveDepth(depth));
        }
        let pc = self.k_inv * Vec3::new(u, v, 1.0) * depth;
        let t: Vec3 = self.extrinsics.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(self.rotation_t * (pc - t))
    }

    /// Unit world-space direction of the ray through pixel `(u, v)`.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        (self.rotation_t * (self.k_inv * Vec3::new(u, v, 1.0))).normalize()
    }

    /// True if `(u, v)` lies inside the addressable pixel domain.
    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }

    /// The same ray restricted to the part inside `aabb` (and to `t ≥ near`).
    pub fn clipped(&self, aabb: &Aabb) -> Option<Ray> {
        let (t0, t1) = aabb.intersect(&self.origin, &self.direction)?;
        let near = t0.max(self.near);
        let far = t1.min(self.far);
        (far > near).then_some(Ray { near, far, ..*self })
    }
}

/// Rays from the camera center through each pixel, unbounded in depth.
pub fn generate_rays(camera: &Camera, pixels: &[(f64, f64)]) -> Vec<Ray> {
    pixels
        .iter()
        .map(|&(u, v)| Ray {
            origin: camera.center(),
            direction: camera.pixel_direction(u, v),
            near: 0.0,
            far: f64::INFINITY,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    /// Slab test; returns the entry and exit parameters along `o + t d`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 >= t0 && t1 >= 0.0).then_some((t0, t1))
    }
}

/// Regular lattice of voxel centers. Flat indices are x-major:
/// `index = (i * ny + j) * nz + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub voxel_size: f64,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], origin: Vec3, voxel_size: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::ConfigInvalid(format!("grid dims must be ≥ 1, got {dims:?}")));
        }
        if !(voxel_size > 0.0) {
            return Err(Error::ConfigInvalid("voxel size must be positive".into()));
        }
        Ok(VoxelGrid {
            dims,
            origin,
            voxel_size,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin
            + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_size
    }

    pub fn center_of(&self, idx: usize) -> Vec3 {
        let [i, j, k] = self.unflatten(idx);
        self.center(i, j, k)
    }

    pub fn centers(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.center_of(i)).collect()
    }

    pub fn bounds(&self) -> Aabb {
        let ext = Vec3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        ) * self.voxel_size;
        Aabb {
            min: self.origin,
            max: self.origin + ext,
        }
    }

    pub fn diameter(&self) -> f64 {
        self.bounds().diagonal()
    }

    /// Continuous lattice coordinate of `p`: voxel `(i,j,k)` spans `[i, i+1)`.
    pub fn lattice_coords(&self, p: &Vec3) -> Vec3 {
        (p - self.origin) / self.voxel_size
    }

    /// Flat index of the voxel containing `p`, or `None` outside the grid.
    pub fn containing(&self, p: &Vec3) -> Option<usize> {
        let l = self.lattice_coords(p);
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let f = l[a].floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            ijk[a] = f as usize;
        }
        Some(self.index(ijk[0], ijk[1], ijk[2]))
    }

    /// Nearest voxel center to `p` (clamped to the grid) and its distance.
    pub fn nearest_center(&self, p: &Vec3) -> (usize, f64) {
        let l = self.lattice_coords(p);
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            ijk[a] = (l[a].floor().max(0.0) as usize).min(self.dims[a] - 1);
        }
        let idx = self.index(ijk[0], ijk[1], ijk[2]);
        (idx, (self.center_of(idx) - p).norm())
    }
}

/// Dense `h × w × c` feature raster, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn texel(&self, row: usize, col: usize) -> &[f64] {
        let s = (row * self.width + col) * self.channels;
        &self.data[s..s + self.channels]
    }
}

/// The four texels and weights that bilinear interpolation touches, plus the
/// derivative of each weight with respect to `u` and `v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTaps {
    /// Flat texel indices (`row * width + col`) for (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    pub texels: [usize; 4],
    pub weights: [f64; 4],
    pub d_du: [f64; 4],
    pub d_dv: [f64; 4],
}

impl BilinearTaps {
    /// Taps for `(u, v)` on an `h × w` raster, or `None` out of bounds.
    pub fn new(height: usize, width: usize, u: f64, v: f64) -> Option<Self> {
        if !(u >= 0.0 && v >= 0.0 && u <= (width - 1) as f64 && v <= (height - 1) as f64) {
            return None;
        }
        let (x0, fx, x_step) = axis_taps(u, width);
        let (y0, fy, y_step) = axis_taps(v, height);
        let x1 = x0 + x_step;
        let y1 = y0 + y_step;
        let gx = if x_step == 1 { 1.0 } else { 0.0 };
        let gy = if y_step == 1 { 1.0 } else { 0.0 };
        Some(BilinearTaps {
            texels: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            d_du: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
            d_dv: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
        })
    }
}

fn axis_taps(x: f64, n: usize) -> (usize, f64, usize) {
    if n == 1 {
        return (0, 0.0, 0);
    }
    let x0 = (x.floor() as usize).min(n - 2);
    (x0, x - x0 as f64, 1)
}

/// Result of sampling a feature map; out-of-bounds samples are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampled {
    pub values: Vec<f64>,
    pub in_bounds: bool,
}

pub fn bilinear_sample(map: &FeatureMap, u: f64, v: f64) -> Sampled {
    let c = map.channels;
    match BilinearTaps::new(map.height, map.width, u, v) {
        None => Sampled {
            values: vec![0.0; c],
            in_bounds: false,
        },
        Some(taps) => {
            let mut values = vec![0.0; c];
            for t in 0..4 {
                let base = taps.texels[t] * c;
                let w = taps.weights[t];
                for ch in 0..c {
                    values[ch] += w * map.data[base + ch];
                }
            }
            Sampled {
                values,
                in_bounds: true,
            }
        }
    }
}

/// Gradient of `Σ_c g_c · sample_c` with respect to `(u, v)`.
pub fn bilinear_uv_grad(map: &FeatureMap, u: f64, v: f64, upstream: &[f64]) -> Option<(f64, f64)> {
    let taps = BilinearTaps::new(map.height, map.width, u, v)?;
    let c = map.channels;
    let (mut gu, mut gv) = (0.0, 0.0);
    for t in 0..4 {
        let base = taps.texels[t] * c;
        for ch in 0..c {
            let f = map.data[base + ch] * upstream[ch];
            gu += taps.d_du[t] * f;
            gv += taps.d_dv[t] * f;
        }
    }
    Some((gu, gv))
}
