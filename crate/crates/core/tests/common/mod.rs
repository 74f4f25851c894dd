#![allow(dead_code)]

pub mod desk;
pub mod props;

use ibrnet::geometry::Vec3;
use ibrnet::model::{ModelConfig, SampleContext};
use ibrnet::network::{NetworkConfig, Networks};
use ibrnet::synth::{build_scene, Preset, SceneSpec};
use ibrnet::scene_io::Scene;
use rand::Rng;

/// Small network dimensions for fast checks.
pub fn tiny_model(d: usize) -> ModelConfig {
    ModelConfig {
        d_feature: d,
        agg_hidden: 8,
        d_prime: 8,
        density_hidden: 8,
        d_sigma: 8,
        num_heads: 2,
        ffn_hidden: 8,
        color_hidden: 8,
        ..ModelConfig::default()
    }
}

pub fn unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

/// Random context with `n` views, at least one of them valid.
pub fn context(rng: &mut impl Rng, n: usize, d: usize) -> SampleContext {
    let query_dir = unit(rng);
    let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
    let k = rng.gen_range(0..n);
    valid[k] = true;
    SampleContext {
        colors: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        features: (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        view_dirs: (0..n).map(|_| (query_dir + unit(rng) * rng.gen_range(0.0..0.8)).normalize()).collect(),
        valid,
        query_dir,
    }
}

/// The same context with its views reordered by `perm`.
pub fn permuted(ctx: &SampleContext, perm: &[usize]) -> SampleContext {
    SampleContext {
        colors: perm.iter().map(|&i| ctx.colors[i]).collect(),
        features: perm.iter().map(|&i| ctx.features[i].clone()).collect(),
        view_dirs: perm.iter().map(|&i| ctx.view_dirs[i]).collect(),
        valid: perm.iter().map(|&i| ctx.valid[i]).collect(),
        query_dir: ctx.query_dir,
    }
}

/// Forward-facing preset scene at a reduced resolution.
pub fn small_scene(seed: u64, size: usize) -> Scene {
    let mut spec = SceneSpec::preset(Preset::ForwardFacing, seed);
    spec.width = size;
    spec.height = size;
    build_scene(&spec).expect("preset builds")
}

/// Full pipeline networks with tiny widths.
pub fn small_nets(seed: u64) -> Networks<f32> {
    let mut cfg = NetworkConfig::default();
    cfg.model = tiny_model(8);
    cfg.feature.channels = [4, 8, 8];
    Networks::new(cfg, seed)
}
