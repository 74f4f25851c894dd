//! Procedural scenes and a reference ray tracer that renders their ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, Intrinsics, Ray, Vec3};
use crate::image::Image;
use crate::scene_io::{save_scene, Scene, SceneError, View};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
    /// Horizontal plane `y = height`, seen from above.
    Plane { height: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    /// Blinn-Phong strength; 0 means purely Lambertian.
    #[serde(default)]
    pub specular: f64,
    #[serde(default = "default_shininess")]
    pub shininess: f64,
}

fn default_shininess() -> f64 {
    32.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Points towards the light.
    pub direction: [f64; 3],
    pub ambient: f64,
    pub diffuse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RigMode {
    /// Cameras on the upper hemisphere around the target, all looking at it.
    Hemisphere,
    /// A jittered grid of cameras in a plane facing the target, all aimed at it.
    ForwardFacing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub mode: RigMode,
    pub count: usize,
    /// Distance from the target, `[min, max]`.
    pub radius: [f64; 2],
    pub target: [f64; 3],
    pub fov_deg: f64,
    /// Hemisphere: elevation range. Forward-facing: downward pitch (first entry).
    pub elevation_deg: [f64; 2],
    /// Forward-facing: half width of the camera grid.
    #[serde(default)]
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    pub light: Light,
    pub rig: Rig,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    #[serde(default)]
    pub supersample: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ForwardFacing,
    Hemisphere,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "forward-facing" => Some(Preset::ForwardFacing),
            "hemisphere" => Some(Preset::Hemisphere),
            _ => None,
        }
    }

    /// Number of cameras the preset rig places.
    pub fn camera_count(self) -> usize {
        match self {
            Preset::ForwardFacing => 32,
            Preset::Hemisphere => 48,
        }
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

impl SceneSpec {
    /// Random tabletop content: a plain ground plane with 3 to 5 spheres
    /// and boxes resting on it.
    pub fn preset(preset: Preset, seed: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce7e);
        let color = |rng: &mut ChaCha8Rng| -> [f64; 3] {
            [rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95), rng.gen_range(0.15..0.95)]
        };
        let ground = color(&mut rng);
        let mut primitives = vec![Primitive {
            shape: Shape::Plane { height: 0.0 },
            material: Material { albedo: ground, specular: 0.0, shininess: default_shininess() },
        }];
        let count = rng.gen_range(3..=5);
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        let mut tries = 0;
        while placed.len() < count && tries < 1000 {
            tries += 1;
            let size = rng.gen_range(0.22..0.45);
            let x = rng.gen_range(-1.0..1.0);
            let z = rng.gen_range(-1.0..1.0);
            if placed.iter().any(|&(px, pz, ps)| ((px - x).powi(2) + (pz - z).powi(2)).sqrt() < (ps + size) * 1.5) {
                continue;
            }
            placed.push((x, z, size));
            let shape = if rng.gen_bool(0.5) {
                Shape::Sphere { center: [x, size, z], radius: size }
            } else {
                let h = size * rng.gen_range(0.8..1.6);
                Shape::Box { min: [x - size, 0.0, z - size], max: [x + size, h * 1.5, z + size] }
            };
            let albedo = color(&mut rng);
            let (specular, shininess) =
                if rng.gen_bool(0.5) { (rng.gen_range(0.3..0.6), rng.gen_range(16.0..64.0)) } else { (0.0, 32.0) };
            primitives.push(Primitive { shape, material: Material { albedo, specular, shininess } });
        }
        let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let el: f64 = rng.gen_range(35.0f64..70.0).to_radians();
        let light = Light { direction: [el.cos() * az.cos(), el.sin(), el.cos() * az.sin()], ambient: 0.3, diffuse: 0.7 };
        let rig = match preset {
            Preset::ForwardFacing => Rig {
                mode: RigMode::ForwardFacing,
                count: preset.camera_count(),
                radius: [3.8, 4.2],
                target: [0.0, 0.3, 0.0],
                fov_deg: 45.0,
                elevation_deg: [35.0, 35.0],
                spread: 0.6,
            },
            Preset::Hemisphere => Rig {
                mode: RigMode::Hemisphere,
                count: preset.camera_count(),
                radius: [3.5, 4.0],
                target: [0.0, 0.3, 0.0],
                fov_deg: 40.0,
                elevation_deg: [15.0, 70.0],
                spread: 0.0,
            },
        };
        let name = match preset {
            Preset::ForwardFacing => format!("forward_{seed}"),
            Preset::Hemisphere => format!("hemisphere_{seed}"),
        };
        SceneSpec {
            name,
            seed,
            primitives,
            light,
            rig,
            width: 64,
            height: 64,
            background: [0.0, 0.0, 0.0],
            supersample: false,
        }
    }

    /// Radius around the rig target enclosing every bounded primitive.
    pub fn scene_radius(&self) -> f64 {
        let target = v3(self.rig.target);
        self.primitives
            .iter()
            .map(|p| match &p.shape {
                Shape::Sphere { center, radius } => (v3(*center) - target).norm() + radius,
                Shape::Box { min, max } => {
                    let mut r = 0.0f64;
                    for corner in 0..8 {
                        let c = Vec3::new(
                            if corner & 1 == 0 { min[0] } else { max[0] },
                            if corner & 2 == 0 { min[1] } else { max[1] },
                            if corner & 4 == 0 { min[2] } else { max[2] },
                        );
                        r = r.max((c - target).norm());
                    }
                    r
                }
                Shape::Plane { .. } => 0.0,
            })
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.primitives.is_empty() {
            return bad("scene needs at least one primitive".into());
        }
        if self.rig.count < 2 {
            return bad(format!("camera count must be at least 2, got {}", self.rig.count));
        }
        if self.width < 16 || self.height < 16 {
            return bad(format!("image size {}x{} is below 16x16", self.width, self.height));
        }
        let [r0, r1] = self.rig.radius;
        if !(r0 > 0.0 && r1 >= r0) {
            return bad(format!("invalid radius range [{r0}, {r1}]"));
        }
        let scene_r = self.scene_radius();
        if r0 <= scene_r {
            return bad(format!("camera radius {r0} does not clear the scene radius {scene_r:.3}"));
        }
        if !(self.rig.fov_deg > 0.0 && self.rig.fov_deg < 170.0) {
            return bad(format!("field of view {} out of range", self.rig.fov_deg));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            let ok = match &p.shape {
                Shape::Sphere { radius, .. } => *radius > 0.0,
                Shape::Box { min, max } => (0..3).all(|k| max[k] > min[k]),
                Shape::Plane { height } => height.is_finite(),
            };
            if !ok {
                return bad(format!("primitive {i} has degenerate extent"));
            }
        }
        if v3(self.light.direction).norm() == 0.0 {
            return bad("light direction must be nonzero".into());
        }
        Ok(())
    }

    fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.rig.fov_deg)
    }

    /// Camera centres and viewing directions, in rig order.
    fn poses(&self) -> Vec<(Vec3, Vec3)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let rig = &self.rig;
        let target = v3(rig.target);
        let n = rig.count;
        let [r0, r1] = rig.radius;
        match rig.mode {
            RigMode::Hemisphere => (0..n)
                .map(|i| {
                    let az = i as f64 * 2.399_963_229_728_653 + rng.gen_range(0.0..0.3);
                    let frac = (i as f64 + rng.gen::<f64>()) / n as f64;
                    let el = (rig.elevation_deg[0] + frac * (rig.elevation_deg[1] - rig.elevation_deg[0])).to_radians();
                    let r = rng.gen_range(r0..=r1);
                    let eye = target + r * Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
                    (eye, (target - eye).normalize())
                })
                .collect(),
            RigMode::ForwardFacing => {
                let pitch = rig.elevation_deg[0].to_radians();
                let f = Vec3::new(0.0, -pitch.sin(), -pitch.cos());
                let right = Vec3::x();
                let up = right.cross(&f);
                let cols = ((2 * n) as f64).sqrt().ceil() as usize;
                let rows = n.div_ceil(cols);
                let cell_x = 2.0 * rig.spread / cols as f64;
                let cell_y = rig.spread / rows as f64;
                (0..n)
                    .map(|i| {
                        let (c, r) = (i % cols, i / cols);
                        let x = -rig.spread + cell_x * (c as f64 + 0.5) + cell_x * 0.2 * rng.gen_range(-1.0..1.0);
                        let y = -0.5 * rig.spread + cell_y * (r as f64 + 0.5) + cell_y * 0.2 * rng.gen_range(-1.0..1.0);
                        let d = rng.gen_range(r0..=r1);
                        let eye = target - f * d + right * x + up * y;
                        (eye, (target - eye).normalize())
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    normal: Vec3,
    prim: usize,
}

fn intersect(ray: &Ray, shape: &Shape) -> Option<(f64, Vec3)> {
    const EPS: f64 = 1e-9;
    let o = ray.origin;
    let d = ray.direction;
    match shape {
        Shape::Sphere { center, radius } => {
            let oc = o - v3(*center);
            let b = oc.dot(&d);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = if -b - sq > EPS { -b - sq } else { -b + sq };
            (t > EPS).then(|| (t, (ray.at(t) - v3(*center)) / *radius))
        }
        Shape::Box { min, max } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis_in = 0;
            let mut axis_out = 0;
            for k in 0..3 {
                let inv = 1.0 / d[k];
                let (mut a, mut b) = ((min[k] - o[k]) * inv, (max[k] - o[k]) * inv);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    axis_in = k;
                }
                if b < t1 {
                    t1 = b;
                    axis_out = k;
                }
            }
            if t0 > t1 || t1 <= EPS {
                return None;
            }
            let (t, axis) = if t0 > EPS { (t0, axis_in) } else { (t1, axis_out) };
            let mut n = Vec3::zeros();
            n[axis] = if t == t0 { -d[axis].signum() } else { d[axis].signum() };
            Some((t, n))
        }
        Shape::Plane { height, .. } => {
            if o.y <= *height || d.y >= 0.0 {
                return None;
            }
            let t = (height - o.y) / d.y;
            (t > EPS).then(|| (t, Vec3::y()))
        }
    }
}

fn nearest_hit(ray: &Ray, prims: &[Primitive]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in prims.iter().enumerate() {
        if let Some((t, normal)) = intersect(ray, &p.shape) {
            if best.map_or(true, |b| t < b.t) {
                best = Some(Hit { t, normal, prim: i });
            }
        }
    }
    best
}

/// Distance along the ray to the nearest surface.
pub fn hit_distance(ray: &Ray, spec: &SceneSpec) -> Option<f64> {
    nearest_hit(ray, &spec.primitives).map(|h| h.t)
}

/// Shaded colour of the nearest surface, or the background.
pub fn trace_reference(ray: &Ray, spec: &SceneSpec) -> [f64; 3] {
    let Some(hit) = nearest_hit(ray, &spec.primitives) else {
        return spec.background;
    };
    let prim = &spec.primitives[hit.prim];
    let albedo = prim.material.albedo;
    let l = v3(spec.light.direction).normalize();
    let n_dot_l = hit.normal.dot(&l).max(0.0);
    let shade = spec.light.ambient + spec.light.diffuse * n_dot_l;
    let mut spec_term = 0.0;
    if prim.material.specular > 0.0 && n_dot_l > 0.0 {
        let h = (l - ray.direction).normalize();
        spec_term = prim.material.specular * hit.normal.dot(&h).max(0.0).powf(prim.material.shininess);
    }
    let mut c = [0.0; 3];
    for k in 0..3 {
        c[k] = (albedo[k] * shade + spec_term).clamp(0.0, 1.0);
    }
    c
}

fn subpixel_offsets(supersample: bool) -> &'static [(f64, f64)] {
    if supersample {
        &[(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]
    } else {
        &[(0.5, 0.5)]
    }
}

/// Traces every pixel of `camera`. Returns the image and the min/max hit distance.
pub fn render_view(camera: &Camera, spec: &SceneSpec) -> (Image, Option<(f64, f64)>) {
    let offsets = subpixel_offsets(spec.supersample);
    let rows: Vec<(Vec<f32>, Option<(f64, f64)>)> = (0..camera.height)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(camera.width * 3);
            let mut range: Option<(f64, f64)> = None;
            for x in 0..camera.width {
                let mut acc = [0.0f64; 3];
                for &(ox, oy) in offsets {
                    let ray = camera.ray_for_pixel(x as f64 + ox, y as f64 + oy);
                    let c = trace_reference(&ray, spec);
                    if let Some(t) = hit_distance(&ray, spec) {
                        range = Some(range.map_or((t, t), |(a, b)| (a.min(t), b.max(t))));
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
                let n = offsets.len() as f64;
                row.extend(acc.iter().map(|v| (v / n) as f32));
            }
            (row, range)
        })
        .collect();
    let mut img = Image::new(camera.width, camera.height);
    let mut range: Option<(f64, f64)> = None;
    for (y, (row, r)) in rows.into_iter().enumerate() {
        img.data[y * camera.width * 3..(y + 1) * camera.width * 3].copy_from_slice(&row);
        if let Some((a, b)) = r {
            range = Some(range.map_or((a, b), |(lo, hi)| (lo.min(a), hi.max(b))));
        }
    }
    (img, range)
}

/// Builds the rig, traces every view and returns the scene with 8-bit
/// quantized images and bounds padded by 10% around the observed hit distances.
pub fn build_scene(spec: &SceneSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let k = spec.intrinsics();
    let planes: Vec<f64> = spec
        .primitives
        .iter()
        .filter_map(|p| if let Shape::Plane { height, .. } = p.shape { Some(height) } else { None })
        .collect();
    let mut cams = Vec::new();
    for (i, (eye, dir)) in spec.poses().into_iter().enumerate() {
        if planes.iter().any(|&h| eye.y <= h) {
            return Err(SynthError::Invalid(format!("camera {i} is below the ground plane")));
        }
        let cam = Camera::looking_along(eye, dir, Vec3::y(), k, spec.width, spec.height, 1.0, 2.0)
            .map_err(|e| SynthError::Invalid(format!("camera {i}: {e}")))?;
        cams.push(cam);
    }
    let mut images = Vec::new();
    let mut range: Option<(f64, f64)> = None;
    for cam in &cams {
        let (img, r) = render_view(cam, spec);
        images.push(img.quantized());
        if let Some((a, b)) = r {
            range = Some(range.map_or((a, b), |(lo, hi)| (lo.min(a), hi.max(b))));
        }
    }
    let (lo, hi) = range.ok_or_else(|| SynthError::Invalid("no camera sees any geometry".into()))?;
    let (near, far) = (0.9 * lo, 1.1 * hi);
    let views = cams
        .into_iter()
        .zip(images)
        .enumerate()
        .map(|(i, (mut camera, image))| {
            camera.near = near;
            camera.far = far;
            View { file: format!("view_{i:03}.png"), image, camera }
        })
        .collect();
    Ok(Scene { name: spec.name.clone(), views, near, far, background: Some(spec.background) })
}

/// [`build_scene`] plus writing `scene.json`, the PNGs and a copy of the spec.
pub fn generate_scene(spec: &SceneSpec, out_dir: &Path) -> Result<Scene, SynthError> {
    let scene = build_scene(spec)?;
    save_scene(&scene, out_dir)?;
    let path = out_dir.join("spec.json");
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&path, text + "\n").map_err(|source| SynthError::Io { path, source })?;
    Ok(scene)
}
