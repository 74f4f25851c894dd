//! Desk-scale experiment: generated forward-facing scenes, a short training
//! run, held-out evaluation and a no-learning reprojection baseline.

use std::time::Instant;

use ibrnet::geometry::{Camera, Vec3};
use ibrnet::image::Image;
use ibrnet::metrics::psnr;
use ibrnet::network::{NetworkConfig, Networks};
use ibrnet::render::{render_view, select_working_set, RenderConfig, Sources};
use ibrnet::scene_io::Scene;
use ibrnet::synth::{build_scene, hit_distance, Preset, SceneSpec, Shape};
use ibrnet::trainer::{evaluate, holdout_indices, training_indices, Phase, TrainConfig, Trainer};

pub const TRAIN_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];
pub const EVAL_SEEDS: [u64; 2] = [101, 102];
pub const SPECULAR_SEED: u64 = 103;

fn env_or<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

pub fn specs(seeds: &[u64]) -> Vec<SceneSpec> {
    seeds.iter().map(|&s| SceneSpec::preset(Preset::ForwardFacing, s)).collect()
}

pub fn scenes(specs: &[SceneSpec]) -> Vec<Scene> {
    specs.iter().map(|s| build_scene(s).expect("preset builds")).collect()
}

/// The preset with a strong highlight on every object above the ground.
pub fn specular_spec(seed: u64) -> SceneSpec {
    let mut spec = SceneSpec::preset(Preset::ForwardFacing, seed);
    for p in spec.primitives.iter_mut().filter(|p| !matches!(p.shape, Shape::Plane { .. })) {
        p.material.specular = 0.6;
        p.material.shininess = 24.0;
    }
    spec.name = format!("specular_{seed}");
    spec
}

/// Training configuration sized for a single CPU core.
pub fn config() -> TrainConfig {
    let m = env_or("IBR_DESK_M", 16);
    let steps = env_or("IBR_DESK_STEPS", 3000);
    let mut cfg = TrainConfig {
        steps,
        rays_per_batch: env_or("IBR_DESK_RAYS", 64),
        n_views: [env_or("IBR_DESK_NMIN", 8), env_or("IBR_DESK_NMAX", 12)],
        seed: 7,
        // halve four times over the run
        lr_decay: 0.5,
        lr_decay_steps: env_or("IBR_DESK_DECAY", steps as f64 / 4.0),
        render: RenderConfig { m_coarse: m, m_fine: m, jitter: true, ..RenderConfig::default() },
        eval_render: RenderConfig { m_coarse: m, m_fine: m, n_source_views: 10, ..RenderConfig::default() },
        ..TrainConfig::default()
    };
    cfg.eval_max_views = None;
    cfg
}

pub fn train(cfg: &TrainConfig, network: NetworkConfig, scenes: Vec<Scene>, tag: &str) -> Networks<f32> {
    let start = Instant::now();
    let nets = Networks::<f32>::new(network, cfg.seed);
    let mut trainer = Trainer::new(cfg.clone(), Phase::Pretrain, scenes, nets, None, 0).expect("valid trainer");
    let every = (cfg.steps / 10).max(1);
    let mut window = Vec::new();
    for i in 0..cfg.steps {
        let s = trainer.train_once().expect("finite training step");
        window.push(s.loss);
        if (i + 1) % every == 0 {
            eprintln!(
                "[{tag}] step {} loss {:.5} ({:.0}s)",
                i + 1,
                window.iter().sum::<f64>() / window.len() as f64,
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
    }
    trainer.nets
}

pub fn finetune_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig { rays_per_batch: env_or("IBR_FT_RAYS", cfg.rays_per_batch), ..cfg.clone() }
}

pub fn finetune(cfg: &TrainConfig, nets: Networks<f32>, scene: Scene, steps: u64) -> Networks<f32> {
    let mut trainer = Trainer::new(cfg.clone(), Phase::Finetune, vec![scene], nets, None, 0).expect("valid trainer");
    for _ in 0..steps {
        trainer.train_once().expect("finite fine-tune step");
    }
    trainer.nets
}

/// Mean held-out PSNR of the model over `scenes`.
pub fn model_psnr(nets: &Networks<f32>, scenes: &[Scene], cfg: &TrainConfig) -> f64 {
    let v: Vec<f64> = scenes
        .iter()
        .map(|s| evaluate(nets, s, cfg.holdout_fraction, &cfg.eval_render, None, None).expect("evaluates").mean_psnr)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Bilinear lookup at continuous pixel coordinates; `None` unless all four
/// taps lie inside the image.
fn lookup(img: &Image, u: f64, v: f64) -> Option<[f64; 3]> {
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    if !(x0 >= 0.0 && y0 >= 0.0 && x0 + 1.0 <= (img.width - 1) as f64 && y0 + 1.0 <= (img.height - 1) as f64) {
        return None;
    }
    let (fx, fy) = (x - x0, y - y0);
    let (i, j) = (x0 as usize, y0 as usize);
    let mut out = [0.0; 3];
    for (dx, dy, w) in [(0, 0, (1.0 - fx) * (1.0 - fy)), (1, 0, fx * (1.0 - fy)), (0, 1, (1.0 - fx) * fy), (1, 1, fx * fy)] {
        let c = img.get(i + dx, j + dy);
        for k in 0..3 {
            out[k] += w * c[k] as f64;
        }
    }
    Some(out)
}

/// Blends source pixels at the 3-D point where the ray meets `depth`,
/// weighted by direction similarity with sharpness `s` (shifted by the
/// worst valid view and normalised).
pub fn blend_at_depth(target: &Camera, x: usize, y: usize, depth: f64, sources: &Sources, s: f64) -> [f64; 3] {
    let ray = target.pixel_ray(x, y);
    let p = ray.origin + ray.direction * depth;
    let mut cols = Vec::new();
    let mut sims = Vec::new();
    for (cam, img) in sources.cameras.iter().zip(&sources.images) {
        let pc = cam.rotation * p + cam.translation;
        if pc.z >= 0.0 {
            continue;
        }
        let k = &cam.intrinsics;
        let u = k.fx * pc.x / -pc.z + k.cx;
        let v = -k.fy * pc.y / -pc.z + k.cy;
        if let Some(c) = lookup(img, u, v) {
            let di: Vec3 = (p - cam.center()).normalize();
            cols.push(c);
            sims.push((s * (ray.direction.dot(&di) - 1.0)).exp());
        }
    }
    if cols.is_empty() {
        return [0.0; 3];
    }
    let lo = sims.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = sims.iter().map(|e| (e - lo).max(0.0)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|v| *v /= total);
    } else {
        w.iter_mut().for_each(|v| *v = 1.0 / cols.len() as f64);
    }
    let mut out = [0.0; 3];
    for (c, wi) in cols.iter().zip(&w) {
        for k in 0..3 {
            out[k] += wi * c[k];
        }
    }
    out
}

pub struct Evaluation {
    pub model: f64,
    pub baseline: f64,
    /// Relative error of the rendered depth on rays through sphere centres.
    pub sphere_depth_errors: Vec<f64>,
}

/// Rays from `camera` through the projected centre of each visible sphere,
/// with the traced distance to the sphere.
fn sphere_rays(camera: &Camera, spec: &SceneSpec) -> Vec<((usize, usize), f64)> {
    let mut out = Vec::new();
    for p in &spec.primitives {
        let Shape::Sphere { center, radius } = p.shape else { continue };
        let c = Vec3::new(center[0], center[1], center[2]);
        let pr = camera.project(&c);
        if !pr.in_front() || pr.u < 0.0 || pr.v < 0.0 {
            continue;
        }
        let (x, y) = (pr.u as usize, pr.v as usize);
        if x >= camera.width || y >= camera.height {
            continue;
        }
        let ray = camera.pixel_ray(x, y);
        let oc = ray.origin - c;
        let b = oc.dot(&ray.direction);
        let disc = b * b - (oc.norm_squared() - radius * radius);
        if disc <= 0.0 {
            continue;
        }
        let t = -b - disc.sqrt();
        if hit_distance(&ray, spec).is_some_and(|h| (h - t).abs() < 1e-9) {
            out.push(((x, y), t));
        }
    }
    out
}

/// Held-out PSNR of the model and of the reprojection baseline that uses the
/// model's coarse peak depth, averaged over `scenes`, plus the sphere depth
/// oracle.
pub fn model_and_baseline(nets: &Networks<f32>, specs: &[SceneSpec], scenes: &[Scene], cfg: &TrainConfig) -> Evaluation {
    let sharp = nets.store.params().iter().find(|p| p.name == "coarse.pool_sharpness").expect("sharpness").value.data()[0] as f64;
    let (mut model, mut base, mut n) = (0.0, 0.0, 0.0);
    let mut sphere_depth_errors = Vec::new();
    for (spec, scene) in specs.iter().zip(scenes) {
        let train = training_indices(scene.views.len(), cfg.holdout_fraction);
        let cams: Vec<&Camera> = train.iter().map(|&i| &scene.views[i].camera).collect();
        for vi in holdout_indices(scene.views.len(), cfg.holdout_fraction) {
            let target = &scene.views[vi];
            let k = cfg.eval_render.n_source_views.min(train.len());
            let idx: Vec<usize> = select_working_set(&target.camera, &cams, k, None).unwrap().iter().map(|&j| train[j]).collect();
            let sources = Sources {
                cameras: idx.iter().map(|&i| &scene.views[i].camera).collect(),
                images: idx.iter().map(|&i| &scene.views[i].image).collect(),
            };
            let r = render_view(nets, &target.camera, &sources, scene.near, scene.far, &cfg.eval_render).unwrap();
            let w = target.image.width;
            let blended = Image::from_fn(w, target.image.height, |x, y| {
                let c = blend_at_depth(&target.camera, x, y, r.peak_depth[y * w + x], &sources, sharp);
                [c[0] as f32, c[1] as f32, c[2] as f32]
            });
            model += psnr(&r.fine, &target.image).unwrap();
            base += psnr(&blended, &target.image).unwrap();
            n += 1.0;
            for ((x, y), t) in sphere_rays(&target.camera, spec) {
                sphere_depth_errors.push((r.depth[y * w + x] - t).abs() / t);
            }
        }
    }
    Evaluation { model: model / n, baseline: base / n, sphere_depth_errors }
}
