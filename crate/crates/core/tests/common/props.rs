//! Property checks over every module. Each entry panics with a description
//! on failure; `ALL` is run by the `properties` target and timed by the
//! acceptance suite.

use ibr_tensor::check::grad_check;
use ibr_tensor::{AdamConfig, AdamState, Bound, Graph, ParamStore, Result as TResult, Tensor, Var};
use ibrnet::checkpoint::{Checkpoint, Record};
use ibrnet::feature_net::{fetch, FeatureNet, FeatureNetConfig};
use ibrnet::geometry::{sample_coarse, Camera, Intrinsics, Ray, Vec3};
use ibrnet::image::Image;
use ibrnet::metrics::{psnr, ssim};
use ibrnet::model::{pooling_weights, IbrNet, ModelConfig, SampleBatch};
use ibrnet::render::{composite, composite_values, extract_features, render_image, render_ray_list, RenderConfig, Sources};
use ibrnet::scene_io::{load_scene, save_scene};
use ibrnet::synth::{build_scene, hit_distance, trace_reference, Light, Material, Preset, Primitive, Rig, RigMode, SceneSpec, Shape};
use ibrnet::trainer::{compute_gradients, photometric_loss, sample_training_pair, train_step, TrainBatch};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{context, permuted, small_nets, small_scene, tiny_model};

pub type Check = (&'static str, fn());

pub const ALL: &[Check] = &[
    ("op_gradients", op_gradients),
    ("softmax_rows_sum_to_one", softmax_rows_sum_to_one),
    ("adam_zero_gradient_identity", adam_zero_gradient_identity),
    ("matmul_associativity_f32", matmul_associativity_f32),
    ("projection_round_trip", projection_round_trip),
    ("coarse_samples_ordered_and_equispaced", coarse_samples_ordered_and_equispaced),
    ("scene_round_trip_precision", scene_round_trip_precision),
    ("checkpoint_bit_exact", checkpoint_bit_exact),
    ("lambertian_epipolar_consistency", lambertian_epipolar_consistency),
    ("synth_determinism", synth_determinism),
    ("fetch_piecewise_linear", fetch_piecewise_linear),
    ("bilinear_four_tap_oracle", bilinear_four_tap_oracle),
    ("feature_net_gradients", feature_net_gradients),
    ("feature_translation_probe", feature_translation_probe),
    ("permutation_invariance", permutation_invariance),
    ("color_convexity_and_density_sign", color_convexity_and_density_sign),
    ("variable_view_count", variable_view_count),
    ("pooling_weight_properties", pooling_weight_properties),
    ("graph_pooling_matches_formula", graph_pooling_matches_formula),
    ("attention_rows_sum_to_one", attention_rows_sum_to_one),
    ("predict_ray_gradients", predict_ray_gradients),
    ("transmittance_and_weights", transmittance_and_weights),
    ("homogeneous_refinement", homogeneous_refinement),
    ("chunk_size_invariance", chunk_size_invariance),
    ("loss_nonnegative_zero_iff_match", loss_nonnegative_zero_iff_match),
    ("perfect_batch_leaves_params", perfect_batch_leaves_params),
    ("training_loss_gradients", training_loss_gradients),
    ("training_pair_sampling", training_pair_sampling),
    ("metric_properties", metric_properties),
];

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config.clone(), TestRng::deterministic_rng(config.rng_algorithm))
}

fn run<S: Strategy>(name: &str, cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>)
where
    S::Value: std::fmt::Debug,
{
    if let Err(e) = runner(cases).run(&strategy, test) {
        panic!("{name}: {e}");
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> TResult<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, r)?;
    g.sum_all(p)
}

fn assert_grad(name: &str, inputs: &[Tensor<f64>], tol: f64, f: impl Fn(&mut Graph<f64>, &[Var]) -> TResult<Var>) {
    let report = grad_check(inputs, 1e-4, 1e-3, |g, v| {
        let out = f(g, v)?;
        probe(g, out, 5)
    })
    .expect("graph builds");
    assert!(report.max_rel_err < tol, "{name}: relative error {:.3e} ({report:?})", report.max_rel_err);
}

pub fn op_gradients() {
    run("op_gradients", 4, any::<u64>(), |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let signed = |r: &mut ChaCha8Rng, shape: &[usize]| {
            Tensor::from_fn(shape.to_vec(), |_| r.gen_range(0.2..1.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 })
        };
        let a = rand_tensor(&mut r, &[3, 4, 2], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[4, 1], -1.0, 1.0);
        let pos = rand_tensor(&mut r, &[3, 4, 2], 0.5, 2.0);
        let x = signed(&mut r, &[4, 3]);
        assert_grad("add", &[a.clone(), b.clone()], 1e-4, |g, v| g.add(v[0], v[1]));
        assert_grad("sub", &[a.clone(), b.clone()], 1e-4, |g, v| g.sub(v[0], v[1]));
        assert_grad("mul", &[a.clone(), b.clone()], 1e-4, |g, v| g.mul(v[0], v[1]));
        assert_grad("div", &[b.clone(), pos.clone()], 1e-4, |g, v| g.div(v[0], v[1]));
        assert_grad("exp", &[x.clone()], 1e-4, |g, v| Ok(g.exp(v[0])));
        assert_grad("log", &[pos.clone()], 1e-4, |g, v| Ok(g.log(v[0])));
        assert_grad("sqrt", &[pos.clone()], 1e-4, |g, v| Ok(g.sqrt(v[0])));
        assert_grad("relu", &[x.clone()], 1e-4, |g, v| Ok(g.relu(v[0])));
        assert_grad("elu", &[x.clone()], 1e-4, |g, v| Ok(g.elu(v[0])));
        assert_grad("sigmoid", &[x.clone()], 1e-4, |g, v| Ok(g.sigmoid(v[0])));
        assert_grad("softplus", &[x.clone()], 1e-4, |g, v| Ok(g.softplus(v[0])));
        assert_grad("tanh", &[x.clone()], 1e-4, |g, v| Ok(g.tanh(v[0])));
        let m = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
        assert_grad("matmul", &[x.clone(), m], 1e-4, |g, v| g.matmul(v[0], v[1]));
        let p = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
        let q = rand_tensor(&mut r, &[2, 5, 4], -1.0, 1.0);
        assert_grad("bmm", &[p.clone(), q], 1e-4, |g, v| g.bmm(v[0], v[1], true));
        for axis in 0..3 {
            assert_grad("softmax", &[a.clone()], 1e-4, |g, v| g.softmax(v[0], axis));
            assert_grad("sum", &[a.clone()], 1e-4, |g, v| g.sum(v[0], axis, true));
            assert_grad("cumsum", &[a.clone()], 1e-4, |g, v| g.cumsum_exclusive(v[0], axis));
        }
        let distinct = Tensor::from_fn(vec![3, 4], |i| ((i * 7) % 12) as f64 * 0.1);
        assert_grad("min", &[distinct], 1e-4, |g, v| g.min(v[0], 1, false));
        assert_grad("concat", &[a.clone(), p.clone()], 1e-4, |g, v| {
            let pr = g.permute(v[1], &[1, 2, 0])?;
            let pr = g.narrow(pr, 2, 0, 2)?;
            g.concat(&[v[0], pr], 0)
        });
        assert_grad("reshape", &[a.clone()], 1e-4, |g, v| g.reshape(v[0], &[4, 6]));
        assert_grad("broadcast_to", &[b.clone()], 1e-4, |g, v| g.broadcast_to(v[0], &[2, 4, 3]));
        let gamma = rand_tensor(&mut r, &[2], 0.5, 1.5);
        let beta = rand_tensor(&mut r, &[2], -0.5, 0.5);
        assert_grad("layer_norm", &[a.clone(), gamma, beta], 1e-4, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        let w = rand_tensor(&mut r, &[3, 4, 1], 0.1, 1.0);
        assert_grad("weighted_var", &[a.clone(), w], 1e-4, |g, v| {
            let s = g.sum(v[1], 1, true)?;
            let wn = g.div(v[1], s)?;
            g.weighted_var(v[0], wn, 1, false)
        });
        let img = rand_tensor(&mut r, &[1, 2, 6, 5], -1.0, 1.0);
        let k = rand_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let bias = rand_tensor(&mut r, &[3], -0.5, 0.5);
        assert_grad("conv2d", &[img.clone(), k, bias], 1e-4, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1));
        assert_grad("upsample2x", &[img], 1e-4, |g, v| g.upsample2x(v[0]));
        let map = rand_tensor(&mut r, &[2, 4, 5, 3], -1.0, 1.0);
        let queries: Vec<(usize, f64, f64)> =
            (0..10).map(|i| (i % 2, r.gen_range(-0.5..5.5), r.gen_range(-0.5..4.5))).collect();
        assert_grad("bilinear", &[map], 1e-4, |g, v| Ok(g.bilinear(v[0], &queries)?.0));
        Ok(())
    });
}

pub fn softmax_rows_sum_to_one() {
    let s = (1usize..6, 1usize..12, any::<u64>(), 0.1f64..50.0);
    run("softmax_rows_sum_to_one", 64, s, |(rows, cols, seed, scale)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&mut r, &[rows, cols], -scale, scale));
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        Ok(())
    });
}

pub fn adam_zero_gradient_identity() {
    let mut store = ParamStore::<f32>::new();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    store.add("a", Tensor::from_fn(vec![4, 3], |_| r.gen_range(-1.0..1.0)), 0);
    store.add("b", Tensor::from_fn(vec![5], |_| r.gen_range(-1.0..1.0)), 1);
    let before = store.clone();
    let mut adam = AdamState::new(&store, AdamConfig::default());
    let zeros: Vec<Tensor<f32>> = store.params().iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
    for _ in 0..5 {
        adam.step(&mut store, &zeros, |_| 1e-2);
    }
    for (a, b) in before.params().iter().zip(store.params()) {
        assert_eq!(a.value, b.value, "adam changed {} under zero gradient", a.name);
    }
}

pub fn matmul_associativity_f32() {
    run("matmul_associativity_f32", 32, (1usize..6, 1usize..6, 1usize..6, 1usize..6, any::<u64>()), |(m, k, n, p, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize]| Tensor::<f32>::from_fn(shape.to_vec(), |_| r.gen_range(-1.0..1.0));
        let (a, b, c) = (t(&[m, k]), t(&[k, n]), t(&[n, p]));
        let mut g = Graph::<f32>::new();
        let (a, b, c) = (g.constant(a), g.constant(b), g.constant(c));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        for (x, y) in g.value(left).data().iter().zip(g.value(right).data()) {
            prop_assert!((x - y).abs() <= 1e-4, "{x} vs {y}");
        }
        Ok(())
    });
}

fn random_camera(r: &mut ChaCha8Rng, w: usize, h: usize) -> Camera {
    let eye = Vec3::new(r.gen_range(-3.0..3.0), r.gen_range(0.5..3.0), r.gen_range(-3.0..3.0));
    let target = Vec3::new(r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5));
    let k = Intrinsics::from_fov(w, h, r.gen_range(30.0..80.0));
    Camera::look_at(eye, target, Vec3::new(0.0, 1.0, 0.0), k, w, h, 0.1, 10.0).unwrap()
}

pub fn projection_round_trip() {
    run("projection_round_trip", 24, (4usize..40, 4usize..40, any::<u64>(), 0.2f64..9.0), |(w, h, seed, t)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cam = random_camera(&mut r, w, h);
        for row in 0..h {
            for col in 0..w {
                let ray = cam.pixel_ray(col, row);
                let p = cam.project(&ray.at(t));
                prop_assert!(p.in_front());
                prop_assert!((p.u - (col as f64 + 0.5)).abs() < 1e-4 && (p.v - (row as f64 + 0.5)).abs() < 1e-4);
            }
        }
        Ok(())
    });
}

pub fn coarse_samples_ordered_and_equispaced() {
    run("coarse_samples", 64, (0.05f64..2.0, 0.1f64..20.0, 2usize..128, any::<u64>()), |(near, span, m, seed)| {
        let far = near + span;
        let exact = sample_coarse::<ChaCha8Rng>(near, far, m, None).unwrap();
        let disp: Vec<f64> = exact.depths.iter().map(|t| 1.0 / t).collect();
        let step = disp[0] - disp[1];
        for k in 1..m {
            prop_assert!(((disp[k - 1] - disp[k]) - step).abs() <= 1e-6 * step.max(1.0));
        }
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for ds in [exact, sample_coarse(near, far, m, Some(&mut r)).unwrap()] {
            prop_assert!(ds.depths.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(ds.depths[0] >= near && ds.depths[m - 1] <= far);
            prop_assert!(ds.intervals.iter().all(|&d| d > 0.0));
        }
        Ok(())
    });
}

pub fn scene_round_trip_precision() {
    let scene = small_scene(5, 16);
    let dir = tempfile::tempdir().unwrap();
    save_scene(&scene, dir.path()).unwrap();
    let back = load_scene(dir.path()).unwrap();
    assert_eq!(scene.views.len(), back.views.len());
    for (a, b) in scene.views.iter().zip(&back.views) {
        assert_eq!(a.camera.rotation, b.camera.rotation);
        assert_eq!(a.camera.translation, b.camera.translation);
        assert_eq!(a.camera.intrinsics, b.camera.intrinsics);
        assert_eq!(a.image.data, b.image.data);
    }
}

pub fn checkpoint_bit_exact() {
    run("checkpoint_bit_exact", 32, (any::<u64>(), any::<u64>(), 1usize..6), |(seed, step, records)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut ck = Checkpoint::new(step, r.gen());
        for i in 0..records {
            let rank = r.gen_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..5)).collect();
            let t = Tensor::<f32>::from_fn(shape, |_| f32::from_bits(r.gen::<u32>()));
            ck.push_tensor(format!("p{i}"), t);
            if r.gen_bool(0.3) {
                ck.push_bytes(format!("b{i}"), (0..r.gen_range(0..20)).map(|_| r.gen()).collect());
            }
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.step, ck.step);
        prop_assert_eq!(back.fingerprint, ck.fingerprint);
        prop_assert_eq!(back.records.len(), ck.records.len());
        for ((na, ra), (nb, rb)) in ck.records.iter().zip(&back.records) {
            prop_assert_eq!(na, nb);
            match (ra, rb) {
                (Record::F32(a), Record::F32(b)) => {
                    prop_assert_eq!(a.shape(), b.shape());
                    prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
                }
                (Record::Bytes(a), Record::Bytes(b)) => prop_assert_eq!(a, b),
                _ => prop_assert!(false, "record kind changed"),
            }
        }
        prop_assert_eq!(back.to_bytes(), bytes);
        Ok(())
    });
}

fn lambertian_spec() -> SceneSpec {
    let diffuse = |albedo| Material { albedo, specular: 0.0, shininess: 32.0 };
    SceneSpec {
        name: "lambert".into(),
        seed: 0,
        primitives: vec![
            Primitive { shape: Shape::Sphere { center: [0.0, 0.6, 0.0], radius: 0.6 }, material: diffuse([0.8, 0.3, 0.2]) },
            Primitive {
                shape: Shape::Box { min: [0.8, 0.0, -0.4], max: [1.3, 0.5, 0.1] },
                material: diffuse([0.2, 0.5, 0.9]),
            },
            Primitive { shape: Shape::Plane { height: 0.0 }, material: diffuse([0.6, 0.6, 0.6]) },
        ],
        light: Light { direction: [0.4, 1.0, 0.3], ambient: 0.3, diffuse: 0.7 },
        rig: Rig {
            mode: RigMode::Hemisphere,
            count: 12,
            radius: [3.5, 4.0],
            target: [0.0, 0.3, 0.0],
            fov_deg: 40.0,
            elevation_deg: [15.0, 60.0],
            spread: 0.5,
        },
        width: 32,
        height: 32,
        background: [0.0; 3],
        supersample: false,
    }
}

pub fn lambertian_epipolar_consistency() {
    let spec = lambertian_spec();
    let scene = build_scene(&spec).unwrap();
    let cams = scene.cameras();
    let mut checked = 0;
    let mut r = ChaCha8Rng::seed_from_u64(11);
    while checked < 200 {
        let a = cams[r.gen_range(0..cams.len())];
        let b = cams[r.gen_range(0..cams.len())];
        let ray_a = a.ray_for_pixel(r.gen_range(0.0..a.width as f64), r.gen_range(0.0..a.height as f64));
        let Some(t) = hit_distance(&ray_a, &spec) else { continue };
        let x = ray_a.at(t);
        let to_x = x - b.center();
        let ray_b = Ray { origin: b.center(), direction: to_x.normalize() };
        match hit_distance(&ray_b, &spec) {
            Some(tb) if (tb - to_x.norm()).abs() < 1e-7 => {}
            _ => continue,
        }
        let (ca, cb) = (trace_reference(&ray_a, &spec), trace_reference(&ray_b, &spec));
        for k in 0..3 {
            assert!((ca[k] - cb[k]).abs() < 1e-9, "colour {ca:?} vs {cb:?} at {x:?}");
        }
        checked += 1;
    }
}

pub fn synth_determinism() {
    let mut spec = SceneSpec::preset(Preset::Hemisphere, 9);
    spec.width = 24;
    spec.height = 24;
    let a = build_scene(&spec).unwrap();
    let b = build_scene(&spec).unwrap();
    for (x, y) in a.views.iter().zip(&b.views) {
        assert!(x.image.data.iter().zip(&y.image.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(x.camera, y.camera);
    }
}

pub fn fetch_piecewise_linear() {
    run("fetch_piecewise_linear", 64, (any::<u64>(), 0.0f64..1.0, any::<bool>()), |(seed, lambda, along_x)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let map = Tensor::<f64>::from_fn(vec![1, 6, 7, 5], |_| r.gen_range(-1.0..1.0));
        // a texel cell of the 1/4-resolution map spans 4 image pixels
        let (cx, cy) = (r.gen_range(0..6) as f64, r.gen_range(0..5) as f64);
        let base = ((cx + 0.5) * 4.0, (cy + 0.5) * 4.0);
        let end = if along_x { (base.0 + 4.0, base.1 + r.gen_range(0.0..4.0)) } else { (base.0 + r.gen_range(0.0..4.0), base.1 + 4.0) };
        let (p1, p2) = if along_x { ((base.0, end.1), end) } else { ((end.0, base.1), end) };
        let mid = (lambda * p1.0 + (1.0 - lambda) * p2.0, lambda * p1.1 + (1.0 - lambda) * p2.1);
        let mut g = Graph::<f64>::no_grad();
        let m = g.constant(map);
        let (f, _) = fetch(&mut g, m, &[(0, p1.0, p1.1), (0, p2.0, p2.1), (0, mid.0, mid.1)]).unwrap();
        let v = g.value(f).data();
        for c in 0..5 {
            let want = lambda * v[c] + (1.0 - lambda) * v[5 + c];
            prop_assert!((v[10 + c] - want).abs() <= 1e-6, "{} vs {want}", v[10 + c]);
        }
        Ok(())
    });
}

pub fn bilinear_four_tap_oracle() {
    run("bilinear_four_tap_oracle", 128, (any::<u64>(), 1usize..8, 1usize..8), |(seed, h, w)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let map = Tensor::<f64>::from_fn(vec![2, h + 1, w + 1, 3], |_| r.gen_range(-1.0..1.0));
        let (x, y) = (r.gen_range(0.5..w as f64 + 0.5), r.gen_range(0.5..h as f64 + 0.5));
        let view = r.gen_range(0..2);
        let mut g = Graph::<f64>::no_grad();
        let m = g.constant(map.clone());
        let (out, valid) = g.bilinear(m, &[(view, x, y)]).unwrap();
        prop_assert!(valid[0]);
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (j, i) = ((fx.floor() as usize).min(w - 1), (fy.floor() as usize).min(h - 1));
        let (a, b) = (fx - j as f64, fy - i as f64);
        for c in 0..3 {
            let at = |ii: usize, jj: usize| map.get(&[view, ii, jj, c]);
            let want = (1.0 - a) * (1.0 - b) * at(i, j) + a * (1.0 - b) * at(i, j + 1) + (1.0 - a) * b * at(i + 1, j) + a * b * at(i + 1, j + 1);
            prop_assert!((g.value(out).data()[c] - want).abs() <= 1e-12);
        }
        Ok(())
    });
}

fn tiny_feature_net(store: &mut ParamStore<f64>, seed: u64) -> FeatureNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureNet::new(store, "feature", FeatureNetConfig { d: 4, channels: [4, 4, 4] }, &mut rng)
}

pub fn feature_net_gradients() {
    let mut store = ParamStore::<f64>::new();
    let net = tiny_feature_net(&mut store, 1);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let img = rand_tensor(&mut r, &[1, 3, 16, 16], 0.0, 1.0);
    let mut inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(img);
    let np = store.len();
    let report = grad_check(&inputs, 1e-5, 1e-3, |g, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let maps = net.forward(g, &p, v[np])?;
        let both = g.concat(&[maps.coarse, maps.fine], 3)?;
        probe(g, both, 8)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "feature net gradient: {report:?}");
}

pub fn feature_translation_probe() {
    let mut store = ParamStore::<f64>::new();
    let net = tiny_feature_net(&mut store, 4);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (32, 48);
    let pattern: Vec<f64> = (0..3 * h * (w + 4)).map(|_| r.gen_range(0.0..1.0)).collect();
    let crop = |shift: usize| {
        Tensor::from_fn(vec![1, 3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            pattern[(c * h + y) * (w + 4) + x + 4 - shift]
        })
    };
    let feats = |x: Tensor<f64>| {
        let mut g = Graph::<f64>::no_grad();
        let p = store.bind_frozen(&mut g);
        let xv = g.constant(x);
        let maps = net.forward(&mut g, &p, xv).unwrap();
        g.value(maps.coarse).clone()
    };
    let (a, b) = (feats(crop(0)), feats(crop(4)));
    let (fh, fw, d) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    // b is the image moved 4 px to the right, so b[x + 1] should match a[x]
    let corr = |off: usize| {
        let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
        for y in 1..fh - 1 {
            for x in 1..fw - 3 {
                for c in 0..d {
                    let u = a.data()[((y * fw) + x) * d + c];
                    let v = b.data()[((y * fw) + x + off) * d + c];
                    num += u * v;
                    na += u * u;
                    nb += v * v;
                }
            }
        }
        num / (na.sqrt() * nb.sqrt())
    };
    let scores: Vec<f64> = (0..3).map(corr).collect();
    assert!(scores[1] > scores[0] && scores[1] > scores[2], "correlation by offset {scores:?}");
}

fn tiny_net(seed: u64, cfg: ModelConfig) -> (ParamStore<f64>, IbrNet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = IbrNet::new(&mut store, "m", cfg, &mut rng);
    (store, net)
}

pub fn permutation_invariance() {
    let (store, net) = tiny_net(1, tiny_model(8));
    run("permutation_invariance", 24, (any::<u64>(), 2usize..9, 1usize..6), |(seed, n, m)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ctxs: Vec<_> = (0..m).map(|_| context(&mut r, n, 8)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let shuffled: Vec<_> = ctxs.iter().map(|c| permuted(c, &perm)).collect();
        let (s1, c1) = net.predict_ray(&store, &ctxs).unwrap();
        let (s2, c2) = net.predict_ray(&store, &shuffled).unwrap();
        for k in 0..m {
            prop_assert!((s1[k] - s2[k]).abs() <= 1e-5);
            for ch in 0..3 {
                prop_assert!((c1[k][ch] - c2[k][ch]).abs() <= 1e-5);
            }
        }
        Ok(())
    });
}

pub fn color_convexity_and_density_sign() {
    for (seed, ablate) in [(2u64, false), (3, true)] {
        let mut cfg = tiny_model(8);
        cfg.ablate_view_directions = ablate;
        let (store, net) = tiny_net(seed, cfg);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // 10⁴ contexts: 250 rays of 20 samples, twice
        for _ in 0..250 {
            let n = r.gen_range(1..9);
            let ctxs: Vec<_> = (0..20).map(|_| context(&mut r, n, 8)).collect();
            let (sigma, colors) = net.predict_ray(&store, &ctxs).unwrap();
            for (k, ctx) in ctxs.iter().enumerate() {
                assert!(sigma[k] >= 0.0, "negative density {}", sigma[k]);
                for ch in 0..3 {
                    let vals = ctx.colors.iter().zip(&ctx.valid).filter(|(_, &v)| v).map(|(c, _)| c[ch]);
                    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                    let c = colors[k][ch];
                    assert!(c >= lo - 1e-9 && c <= hi + 1e-9, "colour {c} outside [{lo}, {hi}]");
                }
            }
        }
    }
}

pub fn variable_view_count() {
    let (store, net) = tiny_net(4, tiny_model(8));
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for n in 1..=16 {
        let ctxs: Vec<_> = (0..3).map(|_| context(&mut r, n, 8)).collect();
        let (sigma, colors) = net.predict_ray(&store, &ctxs).unwrap_or_else(|e| panic!("N = {n}: {e}"));
        assert_eq!((sigma.len(), colors.len()), (3, 3));
    }
}

pub fn pooling_weight_properties() {
    let s = (prop::collection::vec(-1.0f64..1.0, 1..12), 0.01f64..50.0, any::<u64>());
    run("pooling_weight_properties", 256, s, |(dots, sharp, seed)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut valid: Vec<bool> = dots.iter().map(|_| r.gen_bool(0.75)).collect();
        valid[0] = true;
        let w = pooling_weights(&dots, sharp, &valid).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().zip(&valid).all(|(&x, &v)| v || x == 0.0));
        let best = (0..dots.len()).filter(|&i| valid[i]).max_by(|&a, &b| dots[a].total_cmp(&dots[b])).unwrap();
        let strict = (0..dots.len()).filter(|&i| valid[i] && i != best).all(|i| dots[i] < dots[best]);
        let distinct_e = (0..dots.len())
            .filter(|&i| valid[i] && i != best)
            .all(|i| (sharp * (dots[i] - 1.0)).exp() < (sharp * (dots[best] - 1.0)).exp());
        if strict && distinct_e && valid.iter().filter(|&&v| v).count() > 1 {
            for i in (0..dots.len()).filter(|&i| i != best) {
                prop_assert!(w[best] > w[i], "view {best} (dot {}) not strictly heaviest: {w:?}", dots[best]);
            }
        }
        Ok(())
    });
}

pub fn graph_pooling_matches_formula() {
    let (store, net) = tiny_net(6, tiny_model(8));
    let sharp = store.get(net.sharpness_id()).data()[0];
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let ctxs: Vec<_> = (0..50).map(|_| {
        let n = r.gen_range(1..8);
        context(&mut r, n, 8)
    }).collect();
    for ctx in &ctxs {
        let (batch, feats) = SampleBatch::<f64>::from_contexts(&[vec![ctx.clone()]]).unwrap();
        let mut g = Graph::<f64>::no_grad();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(feats);
        let agg = net.aggregate(&mut g, &p, &batch, f).unwrap();
        let got = g.value(agg.view_weights).data().to_vec();
        let want = pooling_weights(&batch.dots, sharp, &batch.valid).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }
}

pub fn attention_rows_sum_to_one() {
    let (store, net) = tiny_net(7, tiny_model(8));
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let m = r.gen_range(1..10);
        let n = r.gen_range(1..6);
        let rays: Vec<Vec<_>> = (0..3).map(|_| (0..m).map(|_| context(&mut r, n, 8)).collect()).collect();
        let (batch, feats) = SampleBatch::<f64>::from_contexts(&rays).unwrap();
        let mut g = Graph::<f64>::no_grad();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(feats);
        let out = net.forward(&mut g, &p, &batch, f).unwrap();
        assert!(!out.attention.is_empty());
        for a in &out.attention {
            for row in g.value(*a).data().chunks(m) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

pub fn predict_ray_gradients() {
    let (store, net) = tiny_net(8, tiny_model(8));
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let ctxs: Vec<_> = (0..4).map(|_| context(&mut r, 3, 8)).collect();
    let (batch, feats) = SampleBatch::<f64>::from_contexts(&[ctxs]).unwrap();
    let mut inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(feats);
    let np = store.len();
    let report = grad_check(&inputs, 1e-5, 1e-3, |g, v| {
        let p = Bound::from_vars(v[..np].to_vec());
        let out = net.forward(g, &p, &batch, v[np])?;
        let sig = g.reshape(out.sigma, &[1, 4, 1])?;
        let both = g.concat(&[sig, out.color], 2)?;
        probe(g, both, 9)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "predict_ray gradient: {report:?}");
}

pub fn transmittance_and_weights() {
    let s = prop::collection::vec((0.0f64..20.0, 0.01f64..0.5), 1..40);
    run("transmittance_and_weights", 256, s, |samples| {
        let sigma: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let deltas: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let colors: Vec<[f64; 3]> = (0..sigma.len()).map(|k| [k as f64 / 40.0, 0.5, 1.0]).collect();
        let (c, w, alpha) = composite_values(&sigma, &colors, &deltas);
        let mut t = 1.0;
        let mut trans = vec![1.0];
        for k in 0..sigma.len() {
            t *= (-sigma[k] * deltas[k]).exp();
            trans.push(t);
        }
        prop_assert!(trans.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!(w.iter().sum::<f64>() <= 1.0 + 1e-12);
        prop_assert!((alpha - w.iter().sum::<f64>()).abs() <= 1e-12);
        let mut s2 = sigma.clone();
        s2.push(0.0);
        let mut c2 = colors.clone();
        c2.push([0.9, 0.1, 0.3]);
        let mut d2 = deltas.clone();
        d2.push(0.2);
        let (cc, ww, aa) = composite_values(&s2, &c2, &d2);
        prop_assert_eq!(cc, c);
        prop_assert_eq!(aa, alpha);
        prop_assert_eq!(&ww[..w.len()], &w[..]);
        // graph version agrees with the direct evaluation
        let mut g = Graph::<f64>::no_grad();
        let n = sigma.len();
        let sv = g.constant(Tensor::new(vec![1, n], sigma.clone()).unwrap());
        let cv = g.constant(Tensor::new(vec![1, n, 3], colors.iter().flatten().copied().collect()).unwrap());
        let comp = composite(&mut g, sv, cv, &deltas).unwrap();
        for k in 0..3 {
            prop_assert!((g.value(comp.color).data()[k] - c[k]).abs() <= 1e-12);
        }
        Ok(())
    });
}

/// Per-channel relative colour error for a homogeneous medium of density
/// `sigma` filling `[near, far]`.
pub fn homogeneous_error(sigma: f64, m: usize, c: [f64; 3]) -> [f64; 3] {
    let (near, far) = (1.0, 2.0);
    let ds = sample_coarse::<ChaCha8Rng>(near, far, m, None).unwrap();
    let (col, _, _) = composite_values(&vec![sigma; m], &vec![c; m], &ds.intervals);
    let want = 1.0 - (-sigma * (far - near)).exp();
    std::array::from_fn(|k| (col[k] - c[k] * want).abs() / (c[k] * want))
}

pub fn homogeneous_refinement() {
    let errs: Vec<f64> = [8, 32, 128, 512].iter().map(|&m| homogeneous_error(2.0, m, [0.2, 0.5, 0.9])[0]).collect();
    assert!(errs.windows(2).all(|p| p[1] < p[0]), "{errs:?}");
}

pub fn chunk_size_invariance() {
    let scene = small_scene(3, 16);
    let nets = small_nets(3);
    let render = |chunk| {
        let cfg = RenderConfig { n_source_views: 4, m_coarse: 8, m_fine: 8, chunk_size: chunk, jitter: true, ..RenderConfig::default() };
        render_image(&nets, &scene.views[0].camera, &scene, Some(0), &cfg).unwrap()
    };
    let (a, b) = (render(1), render(4096));
    assert!(a.fine.data.iter().zip(&b.fine.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits()));
}

pub fn loss_nonnegative_zero_iff_match() {
    let s = (1usize..6, any::<u64>(), any::<bool>());
    run("loss_nonnegative_zero_iff_match", 128, s, |(rays, seed, same)| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let target = Tensor::<f64>::from_fn(vec![rays, 3], |_| r.gen());
        let coarse = if same { target.clone() } else { Tensor::from_fn(vec![rays, 3], |_| r.gen()) };
        let fine = target.clone();
        let mut g = Graph::<f64>::new();
        let (cv, fv) = (g.constant(coarse.clone()), g.constant(fine));
        let loss = photometric_loss(&mut g, cv, Some(fv), &target, rays).unwrap();
        let l = g.value(loss).data()[0];
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, coarse == target);
        Ok(())
    });
}

pub fn perfect_batch_leaves_params() {
    let scene = small_scene(4, 16);
    let mut nets = small_nets(4);
    let render = RenderConfig { n_source_views: 4, m_coarse: 8, m_fine: 8, chunk_size: 4096, jitter: false, ..RenderConfig::default() };
    let target = &scene.views[0].camera;
    let idx = [1usize, 2, 3, 4];
    let sources = Sources {
        cameras: idx.iter().map(|&i| &scene.views[i].camera).collect(),
        images: idx.iter().map(|&i| &scene.views[i].image).collect(),
    };
    let pixels: Vec<(usize, usize)> = (0..12).map(|i| (i % 16, (i * 5) % 16)).collect();
    let rays: Vec<(u64, Ray)> = pixels.iter().map(|&(x, y)| ((y * 16 + x) as u64, target.pixel_ray(x, y))).collect();
    let cache = extract_features(&nets, &sources.images).unwrap();
    let coarse_only = RenderConfig { m_fine: 0, ..render };
    let pred_c = render_ray_list(&nets, &cache, &sources, &rays, scene.near, scene.far, &coarse_only).unwrap();
    let colors: Vec<[f32; 3]> = pred_c.iter().map(|p| [p.coarse[0] as f32, p.coarse[1] as f32, p.coarse[2] as f32]).collect();
    let batch = TrainBatch { target, sources, pixels, colors, near: scene.near, far: scene.far, seed: 0 };
    let (loss, grads, _) = compute_gradients(&nets, &batch, &coarse_only, 1).unwrap();
    assert_eq!(loss, 0.0, "prediction should reproduce itself exactly");
    assert!(grads.iter().all(|g| g.data().iter().all(|&x| x == 0.0)));
    let before = nets.store.clone();
    let mut adam = AdamState::new(&nets.store, AdamConfig::default());
    let stats = train_step(&mut nets, &mut adam, &batch, &coarse_only, 1, 5.0, |_| 1e-3, 0).unwrap();
    assert_eq!(stats.loss, 0.0);
    for (a, b) in before.params().iter().zip(nets.store.params()) {
        assert_eq!(a.value, b.value, "{} moved", a.name);
    }
}

/// Whole-pipeline loss gradients, encoder included, against central differences.
pub fn training_loss_gradients() {
    let scene = small_scene(6, 16);
    let mut nets = small_nets(6).cast::<f64>();
    let render = RenderConfig { n_source_views: 3, m_coarse: 6, m_fine: 0, jitter: false, ..RenderConfig::default() };
    let idx = [9usize, 11, 2];
    let batch = TrainBatch {
        target: &scene.views[10].camera,
        sources: Sources {
            cameras: idx.iter().map(|&i| &scene.views[i].camera).collect(),
            images: idx.iter().map(|&i| &scene.views[i].image).collect(),
        },
        pixels: (0..6).map(|i| (3 + 2 * i, 4 + i)).collect(),
        colors: (0..6).map(|i| scene.views[10].image.get(3 + 2 * i, 4 + i)).collect(),
        near: scene.near,
        far: scene.far,
        seed: 0,
    };
    let (_, grads, _) = compute_gradients(&nets, &batch, &render, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    let (mut checked, mut live) = (0, 0);
    for pi in 0..nets.store.len() {
        let n = nets.store.params()[pi].value.numel();
        for _ in 0..2 {
            let k = rng.gen_range(0..n);
            let orig = nets.store.params()[pi].value.data()[k];
            let mut at = |v: f64| {
                nets.store.params_mut()[pi].value.data_mut()[k] = v;
                compute_gradients(&nets, &batch, &render, 1).unwrap().0
            };
            let fd = (at(orig + h) - at(orig - h)) / (2.0 * h);
            nets.store.params_mut()[pi].value.data_mut()[k] = orig;
            let an = grads[pi].data()[k];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / scale < 1e-3 || (fd - an).abs() < 1e-8,
                "{}[{k}]: analytic {an:.6e}, numeric {fd:.6e}",
                nets.store.params()[pi].name
            );
            checked += 1;
            live += (an.abs() > 1e-7) as usize;
        }
    }
    assert!(live * 2 > checked, "only {live} of {checked} gradients are nonzero");
}

pub fn training_pair_sampling() {
    let scene = small_scene(6, 16);
    let cams = scene.cameras();
    let all: Vec<usize> = (0..cams.len()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let nearest = |t: usize, k: usize| {
        let mut rest: Vec<usize> = all.iter().copied().filter(|&i| i != t).collect();
        let c = cams[t].center();
        rest.sort_by(|&a, &b| (cams[a].center() - c).norm().total_cmp(&(cams[b].center() - c).norm()));
        rest.truncate(k);
        rest
    };
    for _ in 0..10_000 {
        let pair = sample_training_pair(&cams, &all, &mut r, [8, 12], [1.0, 3.0]).unwrap();
        let n = pair.sources.len();
        let near = nearest(pair.target, 2 * pair.pool.len());
        assert!(pair.pool.iter().all(|i| near.contains(i)), "pool outside the nearest candidates");
        assert!((8..=12).contains(&n));
        assert!(!pair.sources.contains(&pair.target));
        assert!(pair.sources.iter().all(|s| pair.pool.contains(s)));
        assert!(pair.pool.len() >= n && pair.pool.len() <= (3 * n).min(cams.len() - 1));
        let mut uniq = pair.sources.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), n);
    }
    // with a multiplier of 1 the pool is the N nearest views, so the sources are exactly those
    for _ in 0..200 {
        let pair = sample_training_pair(&cams, &all, &mut r, [8, 12], [1.0, 1.0]).unwrap();
        let mut s = pair.sources.clone();
        s.sort();
        let mut p = pair.pool.clone();
        p.sort();
        assert_eq!(s, p);
        let f = cams[pair.target].forward();
        let mut oracle = nearest(pair.target, 2 * s.len());
        let dist = |i: usize| (cams[i].center() - cams[pair.target].center()).norm();
        oracle.sort_by(|&a, &b| {
            f.dot(&cams[b].forward()).total_cmp(&f.dot(&cams[a].forward())).then(dist(a).total_cmp(&dist(b))).then(a.cmp(&b))
        });
        oracle.truncate(s.len());
        oracle.sort();
        assert_eq!(s, oracle, "sources differ from the nearest working set");
    }
}

pub fn metric_properties() {
    run("metric_properties", 16, any::<u64>(), |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Image::from_fn(20, 16, |_, _| [r.gen(), r.gen(), r.gen()]);
        let b = Image::from_fn(20, 16, |_, _| [r.gen(), r.gen(), r.gen()]);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let noise: Vec<f32> = (0..a.data.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
        let noisy = |amp: f32| Image { data: a.data.iter().zip(&noise).map(|(v, n)| v + amp * n).collect(), ..a.clone() };
        let ps: Vec<f64> = [0.01, 0.02, 0.05, 0.1, 0.2].iter().map(|&amp| psnr(&a, &noisy(amp)).unwrap()).collect();
        prop_assert!(ps.windows(2).all(|p| p[1] < p[0]), "{:?}", ps);
        Ok(())
    });
}
