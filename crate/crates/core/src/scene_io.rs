//! Posed image sets on disk.
//!
//! A scene directory holds `scene.json` and one PNG per view. The manifest
//! stores parallel per-view arrays so that inconsistent edits are caught:
//!
//! ```json
//! {
//!   "name": "desk_0",
//!   "near": 1.2, "far": 7.9,
//!   "images": ["view_000.png", "view_001.png"],
//!   "image_sizes": [[64, 64], [64, 64]],
//!   "intrinsics": [[[fx, 0, cx], [0, fy, cy], [0, 0, 1]], ...],
//!   "extrinsics": [[[r00, r01, r02, t0], [r10, r11, r12, t1], [r20, r21, r22, t2]], ...],
//!   "background": [0.0, 0.0, 0.0]
//! }
//! ```
//!
//! `image_sizes` entries are `[height, width]`. `extrinsics` map world to
//! camera coordinates. `background` is optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{check_bounds, rotation_deviation, Camera, Intrinsics, Mat3, Vec3, ORTHONORMAL_TOL};
use crate::image::Image;

pub const MANIFEST: &str = "scene.json";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("no scene manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("cannot decode image {path}: {msg}")]
    ImageDecode { path: PathBuf, msg: String },
    #[error("camera count mismatch: {images} images, {sizes} sizes, {intrinsics} intrinsics, {extrinsics} extrinsics")]
    CameraCountMismatch { images: usize, sizes: usize, intrinsics: usize, extrinsics: usize },
    #[error("image {path} is {actual_w}x{actual_h}, manifest says {expected_w}x{expected_h}")]
    ImageSize { path: PathBuf, expected_w: usize, expected_h: usize, actual_w: usize, actual_h: usize },
    #[error("non-orthonormal rotation for {image} (deviation {deviation:.3e})")]
    NonOrthonormal { image: String, deviation: f64 },
    #[error("invalid intrinsics for {image}: {msg}")]
    InvalidIntrinsics { image: String, msg: String },
    #[error("invalid bounds: near={near}, far={far}")]
    InvalidBounds { near: f64, far: f64 },
    #[error("scene needs at least 2 views, found {0}")]
    TooFewViews(usize),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub near: f64,
    pub far: f64,
    pub images: Vec<String>,
    pub image_sizes: Vec<[usize; 2]>,
    pub intrinsics: Vec<[[f64; 3]; 3]>,
    pub extrinsics: Vec<[[f64; 4]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub file: String,
    pub image: Image,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub views: Vec<View>,
    pub near: f64,
    pub far: f64,
    pub background: Option<[f64; 3]>,
}

impl Scene {
    pub fn cameras(&self) -> Vec<&Camera> {
        self.views.iter().map(|v| &v.camera).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            name: self.name.clone(),
            near: self.near,
            far: self.far,
            images: self.views.iter().map(|v| v.file.clone()).collect(),
            image_sizes: self.views.iter().map(|v| [v.camera.height, v.camera.width]).collect(),
            intrinsics: self.views.iter().map(|v| v.camera.intrinsics.matrix()).collect(),
            extrinsics: self.views.iter().map(|v| v.camera.extrinsics()).collect(),
            background: self.background,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io { path: path.to_path_buf(), source }
}

/// Writes `scene.json` and every view as PNG into `dir`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for view in &scene.views {
        let path = dir.join(&view.file);
        view.image
            .save_png(&path)
            .map_err(|e| SceneError::Io { path: path.clone(), source: std::io::Error::other(e.to_string()) })?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&scene.manifest()).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_scene(dir: &Path) -> Result<Scene, SceneError> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(SceneError::MissingManifest(path));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| SceneError::Manifest { path: path.clone(), source })?;
    scene_from_manifest(&manifest, dir)
}

pub fn scene_from_manifest(m: &Manifest, dir: &Path) -> Result<Scene, SceneError> {
    let n = m.images.len();
    if m.image_sizes.len() != n || m.intrinsics.len() != n || m.extrinsics.len() != n {
        return Err(SceneError::CameraCountMismatch {
            images: n,
            sizes: m.image_sizes.len(),
            intrinsics: m.intrinsics.len(),
            extrinsics: m.extrinsics.len(),
        });
    }
    if check_bounds(m.near, m.far).is_err() {
        return Err(SceneError::InvalidBounds { near: m.near, far: m.far });
    }
    if n < 2 {
        return Err(SceneError::TooFewViews(n));
    }
    let mut views = Vec::with_capacity(n);
    for i in 0..n {
        let file = &m.images[i];
        let [h, w] = m.image_sizes[i];
        let camera = camera_from_rows(file, &m.intrinsics[i], &m.extrinsics[i], w, h, m.near, m.far)?;
        let path = dir.join(file);
        if !path.is_file() {
            return Err(SceneError::MissingImage(path));
        }
        let image =
            Image::load_png(&path).map_err(|e| SceneError::ImageDecode { path: path.clone(), msg: e.to_string() })?;
        if image.width != w || image.height != h {
            return Err(SceneError::ImageSize {
                path,
                expected_w: w,
                expected_h: h,
                actual_w: image.width,
                actual_h: image.height,
            });
        }
        views.push(View { file: file.clone(), image, camera });
    }
    Ok(Scene { name: m.name.clone(), views, near: m.near, far: m.far, background: m.background })
}

/// Camera from manifest-style `K` and `[R | t]` rows.
pub fn camera_from_rows(
    file: &str,
    k: &[[f64; 3]; 3],
    e: &[[f64; 4]; 3],
    width: usize,
    height: usize,
    near: f64,
    far: f64,
) -> Result<Camera, SceneError> {
    let bad_k = |msg: &str| SceneError::InvalidIntrinsics { image: file.to_string(), msg: msg.to_string() };
    if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
        return Err(bad_k("expected zero skew and last row [0, 0, 1]"));
    }
    if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
        return Err(bad_k("focal lengths must be positive"));
    }
    if width == 0 || height == 0 {
        return Err(bad_k("image size must be nonzero"));
    }
    let rotation = Mat3::new(e[0][0], e[0][1], e[0][2], e[1][0], e[1][1], e[1][2], e[2][0], e[2][1], e[2][2]);
    let deviation = rotation_deviation(&rotation);
    if !(deviation <= ORTHONORMAL_TOL) {
        return Err(SceneError::NonOrthonormal { image: file.to_string(), deviation });
    }
    let intrinsics = Intrinsics { fx: k[0][0], fy: k[1][1], cx: k[0][2], cy: k[1][2] };
    let translation = Vec3::new(e[0][3], e[1][3], e[2][3]);
    Camera::new(intrinsics, rotation, translation, width, height, near, far)
        .map_err(|err| bad_k(&err.to_string()))
}
