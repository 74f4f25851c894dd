//! Pinhole cameras, rays and depth sampling.
//!
//! World space is right-handed. A camera looks down its local −z axis, with
//! image `u` growing to the right and `v` growing downwards. Pixel `(col, row)`
//! covers `[col, col+1) × [row, row+1)`, so its centre sits at
//! `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rotation orthonormality tolerance (max abs entry of RᵀR − I).
pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid depth bounds: near={near}, far={far} (need 0 < near < far)")]
    InvalidBounds { near: f64, far: f64 },
    #[error("need at least {min} depth samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("invalid intrinsics: fx={fx}, fy={fy}")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("rotation is not orthonormal (deviation {deviation:.3e})")]
    NonOrthonormal { deviation: f64 },
    #[error("invalid image size {width}x{height}")]
    InvalidSize { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image centre.
    pub fn from_fov(width: usize, height: usize, fov_y_deg: f64) -> Self {
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Intrinsics { fx: f, fy: f, cx: 0.5 * width as f64, cy: 0.5 * height as f64 }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Distance in front of the camera; `<= 0` means behind it.
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let cam = Camera { intrinsics, rotation, translation, width, height, near, far };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` roughly the image-up direction.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        Self::looking_along(eye, forward, up, intrinsics, width, height, near, far)
    }

    pub fn looking_along(
        eye: Vec3,
        forward: Vec3,
        up: Vec3,
        intrinsics: Intrinsics,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self, GeometryError> {
        let f = forward.normalize();
        let mut right = f.cross(&up);
        if right.norm() < 1e-9 {
            right = f.cross(&Vec3::new(0.0, 0.0, 1.0));
        }
        let right = right.normalize();
        let cam_up = right.cross(&f);
        let rotation = Mat3::from_rows(&[right.transpose(), cam_up.transpose(), (-f).transpose()]);
        let translation = -(rotation * eye);
        Camera::new(intrinsics, rotation, translation, width, height, near, far)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) || !k.cx.is_finite() || !k.cy.is_finite() {
            return Err(GeometryError::InvalidIntrinsics { fx: k.fx, fy: k.fy });
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidSize { width: self.width, height: self.height });
        }
        check_bounds(self.near, self.far)?;
        let deviation = rotation_deviation(&self.rotation);
        if !(deviation <= ORTHONORMAL_TOL) {
            return Err(GeometryError::NonOrthonormal { deviation });
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        -self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn project(&self, x: &Vec3) -> Projection {
        let p = self.to_camera(x);
        let depth = -p.z;
        let k = &self.intrinsics;
        Projection { u: k.fx * p.x / depth + k.cx, v: -k.fy * p.y / depth + k.cy, depth }
    }

    /// Ray through continuous image coordinates `(u, v)`.
    pub fn ray_for_pixel(&self, u: f64, v: f64) -> Ray {
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((u - k.cx) / k.fx, -(v - k.cy) / k.fy, -1.0);
        let direction = (self.rotation.transpose() * dir_cam).normalize();
        Ray { origin: self.center(), direction }
    }

    /// Ray through the centre of pixel `(col, row)`.
    pub fn pixel_ray(&self, col: usize, row: usize) -> Ray {
        self.ray_for_pixel(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// `[R | t]` as row-major 3×4.
    pub fn extrinsics(&self) -> [[f64; 4]; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[(i, j)];
            }
            m[i][3] = t[i];
        }
        m
    }
}

/// Max abs entry of `RᵀR − I`.
pub fn rotation_deviation(r: &Mat3) -> f64 {
    let e = r.transpose() * r - Mat3::identity();
    e.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) })
}

pub fn check_bounds(near: f64, far: f64) -> Result<(), GeometryError> {
    if near > 0.0 && far > near && far.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::InvalidBounds { near, far })
    }
}

/// Sorted sample depths along one ray and their quadrature intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSamples {
    pub depths: Vec<f64>,
    pub intervals: Vec<f64>,
}

impl DepthSamples {
    /// Intervals are successive differences; the last one is `(far − near) / M`.
    pub fn new(depths: Vec<f64>, near: f64, far: f64) -> Self {
        let m = depths.len();
        let mut intervals = Vec::with_capacity(m);
        for k in 0..m {
            intervals.push(if k + 1 < m { depths[k + 1] - depths[k] } else { (far - near) / m as f64 });
        }
        DepthSamples { depths, intervals }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Samples equidistant in disparity between `near` and `far`. With an RNG each
/// sample is drawn uniformly (in disparity) inside its own bin.
pub fn sample_coarse<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    m: usize,
    jitter: Option<&mut R>,
) -> Result<DepthSamples, GeometryError> {
    check_bounds(near, far)?;
    if m < 2 {
        return Err(GeometryError::TooFewSamples { min: 2, got: m });
    }
    let (dn, df) = (1.0 / near, 1.0 / far);
    let step = (df - dn) / (m - 1) as f64;
    let disp = |x: f64| dn + x * step;
    let mut depths: Vec<f64> = match jitter {
        None => (0..m).map(|k| 1.0 / disp(k as f64)).collect(),
        Some(rng) => (0..m)
            .map(|k| {
                // bin k spans disparity offsets [k − 0.5, k + 0.5], clipped to the range
                let lo = (k as f64 - 0.5).max(0.0);
                let hi = (k as f64 + 0.5).min((m - 1) as f64);
                let x = lo + (hi - lo) * rng.gen::<f64>();
                1.0 / disp(x)
            })
            .collect(),
    };
    for t in depths.iter_mut() {
        *t = t.clamp(near, far);
    }
    Ok(DepthSamples::new(depths, near, far))
}

/// `(d − d_i, d · d_i)`.
pub fn relative_direction(d: &Vec3, d_i: &Vec3) -> (Vec3, f64) {
    (d - d_i, d.dot(d_i))
}
