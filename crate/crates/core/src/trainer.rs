//! End-to-end training, per-scene fine-tuning and held-out evaluation.

use std::path::PathBuf;

use ibr_tensor::{clip_global_norm, AdamConfig, AdamState, Graph, Real, Tensor, TensorError, Var};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_net::{stack_images, FEATURE_GROUP};
use crate::geometry::Camera;
use crate::image::Image;
use crate::metrics::{psnr, ssim, MetricError, MetricReport, ViewMetrics};
use crate::network::{NetworkConfig, Networks};
use crate::render::{render_rays, render_view, select_working_set, RenderConfig, RenderError, Sources};
use crate::scene_io::Scene;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scenes: Vec<PathBuf>,
    pub steps: u64,
    pub rays_per_batch: usize,
    pub lr_feature: f64,
    pub lr_ibrnet: f64,
    pub finetune_lr_feature: f64,
    pub finetune_lr_ibrnet: f64,
    /// Learning rates are multiplied by `lr_decay` every `lr_decay_steps`.
    pub lr_decay: f64,
    pub lr_decay_steps: f64,
    /// Inclusive range of the number of source views per step.
    pub n_views: [usize; 2],
    /// Range of the candidate pool multiplier.
    pub pool_multiplier: [f64; 2],
    pub seed: u64,
    /// Steps between evaluations; 0 disables.
    pub eval_every: u64,
    /// Steps between checkpoints; 0 disables.
    pub checkpoint_every: u64,
    pub clip_norm: f64,
    /// Skip target pixels equal to the scene background colour.
    pub mask_background: bool,
    pub holdout_fraction: f64,
    /// Ray batch is split into this many independent gradient shards.
    pub grad_shards: usize,
    /// Cap on held-out views rendered per evaluation.
    pub eval_max_views: Option<usize>,
    pub network: NetworkConfig,
    /// Sampling used while training (`n_source_views` is ignored).
    pub render: RenderConfig,
    /// Sampling used by evaluation.
    pub eval_render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scenes: Vec::new(),
            steps: 1000,
            rays_per_batch: 512,
            lr_feature: 1e-3,
            lr_ibrnet: 5e-4,
            finetune_lr_feature: 5e-4,
            finetune_lr_ibrnet: 2e-4,
            lr_decay: 0.5,
            lr_decay_steps: 25_000.0,
            n_views: [8, 12],
            pool_multiplier: [1.0, 3.0],
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            clip_norm: 5.0,
            mask_background: false,
            holdout_fraction: 1.0 / 8.0,
            grad_shards: 4,
            eval_max_views: None,
            network: NetworkConfig::default(),
            render: RenderConfig { jitter: true, ..RenderConfig::default() },
            eval_render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr_feature > 0.0 && self.lr_ibrnet > 0.0 && self.finetune_lr_feature > 0.0 && self.finetune_lr_ibrnet > 0.0)
        {
            return bad("learning rates must be positive".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay_steps > 0.0) {
            return bad("decay factor and interval must be positive".into());
        }
        if self.n_views[0] == 0 || self.n_views[0] > self.n_views[1] {
            return bad(format!("invalid source view range {:?}", self.n_views));
        }
        if !(self.pool_multiplier[0] >= 1.0 && self.pool_multiplier[1] >= self.pool_multiplier[0]) {
            return bad(format!("invalid pool multiplier range {:?}", self.pool_multiplier));
        }
        if self.rays_per_batch == 0 {
            return bad("rays_per_batch must be positive".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 1.0) {
            return bad(format!("holdout fraction {} outside (0, 1]", self.holdout_fraction));
        }
        if self.render.m_coarse < 2 {
            return bad("m_coarse must be at least 2".into());
        }
        Ok(())
    }
}

/// `base · decay^(step / interval)`.
pub fn learning_rate(base: f64, decay: f64, interval: f64, step: u64) -> f64 {
    base * decay.powf(step as f64 / interval)
}

/// Indices held out for testing: every `round(1/fraction)`-th view, starting at 0.
pub fn holdout_indices(n_views: usize, fraction: f64) -> Vec<usize> {
    let every = (1.0 / fraction).round().max(1.0) as usize;
    (0..n_views).filter(|i| i % every == 0).collect()
}

pub fn training_indices(n_views: usize, fraction: f64) -> Vec<usize> {
    let held = holdout_indices(n_views, fraction);
    (0..n_views).filter(|i| !held.contains(i)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub target: usize,
    pub sources: Vec<usize>,
    /// Size of the candidate pool the sources were drawn from.
    pub pool: Vec<usize>,
}

/// Picks a target uniformly from `allowed`, then `N` sources drawn without
/// replacement from the `n·N` views nearest to it.
pub fn sample_training_pair(
    cameras: &[&Camera],
    allowed: &[usize],
    rng: &mut impl Rng,
    n_views: [usize; 2],
    pool_multiplier: [f64; 2],
) -> Result<TrainingPair, TrainError> {
    if allowed.len() < 2 {
        return Err(TrainError::Config(format!("need at least 2 training views, found {}", allowed.len())));
    }
    let target = allowed[rng.gen_range(0..allowed.len())];
    let mut n = rng.gen_range(n_views[0]..=n_views[1]);
    let mult = rng.gen_range(pool_multiplier[0]..=pool_multiplier[1]);
    let available = allowed.len() - 1;
    if n > available {
        log::warn!("scene has {available} candidate source views; clamping N from {n}");
        n = available;
    }
    let pool_size = ((mult * n as f64).round() as usize).clamp(n, available);
    let subset: Vec<&Camera> = allowed.iter().map(|&i| cameras[i]).collect();
    let local_target = allowed.iter().position(|&i| i == target);
    let pool: Vec<usize> = select_working_set(cameras[target], &subset, pool_size, local_target)?
        .into_iter()
        .map(|j| allowed[j])
        .collect();
    let sources = sample_indices(rng, pool.len(), n).into_iter().map(|j| pool[j]).collect();
    Ok(TrainingPair { target, sources, pool })
}

/// `Σ_r ‖c_r − C_r‖² (+ the same for the fine pass)`, divided by `denom`.
pub fn photometric_loss<T: Real>(
    g: &mut Graph<T>,
    coarse: Var,
    fine: Option<Var>,
    target: &Tensor<T>,
    denom: usize,
) -> Result<Var, TensorError> {
    let t = g.constant(target.clone());
    let mut terms = Vec::new();
    for pred in std::iter::once(coarse).chain(fine) {
        let d = g.sub(pred, t)?;
        let d2 = g.mul(d, d)?;
        terms.push(g.sum_all(d2)?);
    }
    let mut total = terms[0];
    for &x in &terms[1..] {
        total = g.add(total, x)?;
    }
    Ok(g.scale(total, T::one() / T::from_usize(denom).unwrap()))
}

/// One optimisation batch: rays of a single target view and its sources.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub target: &'a Camera,
    pub sources: Sources<'a>,
    /// `(x, y)` target pixels.
    pub pixels: Vec<(usize, usize)>,
    pub colors: Vec<[f32; 3]>,
    pub near: f64,
    pub far: f64,
    /// Base seed of the per-ray sampling streams.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

struct ShardResult<T> {
    loss: f64,
    grads: Vec<Tensor<T>>,
    map_grads: (Tensor<T>, Tensor<T>),
    bad_ray: Option<String>,
}

/// Loss and gradients for every parameter, without updating anything.
pub fn compute_gradients<T: Real>(
    nets: &Networks<T>,
    batch: &TrainBatch,
    render: &RenderConfig,
    shards: usize,
) -> Result<(f64, Vec<Tensor<T>>, Option<String>), TrainError> {
    let r_total = batch.pixels.len();
    if r_total == 0 {
        return Err(TrainError::Config("empty ray batch".into()));
    }
    let mut g0 = Graph::<T>::new();
    let p0 = nets.store.bind(&mut g0);
    let x = g0.constant(stack_images::<T>(&batch.sources.images)?);
    let maps = nets.feature.forward(&mut g0, &p0, x)?;
    let (cm, fm) = (g0.value(maps.coarse).clone(), g0.value(maps.fine).clone());

    let shards = shards.clamp(1, r_total);
    let per = r_total.div_ceil(shards);
    let ranges: Vec<(usize, usize)> = (0..shards).map(|s| (s * per, ((s + 1) * per).min(r_total))).filter(|r| r.0 < r.1).collect();
    let results: Vec<Result<ShardResult<T>, TrainError>> = ranges
        .par_iter()
        .map(|&(a, b)| {
            let mut g = Graph::<T>::new();
            let p = nets.store.bind(&mut g);
            let mc = g.param(cm.clone());
            let mf = g.param(fm.clone());
            let rays: Vec<_> = batch.pixels[a..b].iter().map(|&(x, y)| batch.target.pixel_ray(x, y)).collect();
            let ids: Vec<u64> =
                batch.pixels[a..b].iter().map(|&(x, y)| (y * batch.target.width + x) as u64).collect();
            let out = render_rays(
                &mut g, &p, &nets.coarse, &nets.fine, (mc, mf), &batch.sources, &rays, &ids, batch.near, batch.far,
                render, batch.seed,
            )?;
            let target = Tensor::new(
                vec![b - a, 3],
                batch.colors[a..b].iter().flatten().map(|&c| T::c(c as f64)).collect(),
            )?;
            let fine = out.fine.as_ref().map(|f| f.composite.color);
            let loss = photometric_loss(&mut g, out.coarse.composite.color, fine, &target, r_total)?;
            let loss_v = g.value(loss).item().to_f64().unwrap();
            let mut bad_ray = None;
            if !loss_v.is_finite() {
                let c = g.value(out.coarse.composite.color).data();
                for r in 0..b - a {
                    if !c[r * 3..r * 3 + 3].iter().all(|v| v.is_finite()) {
                        let (x, y) = batch.pixels[a + r];
                        bad_ray = Some(format!(
                            "ray at pixel ({x}, {y}), direction {:?}, coarse colour {:?}, target {:?}",
                            rays[r].direction.as_slice(),
                            &c[r * 3..r * 3 + 3],
                            batch.colors[a + r]
                        ));
                        break;
                    }
                }
                if bad_ray.is_none() {
                    bad_ray = Some(format!("non-finite loss {loss_v} in rays {a}..{b}"));
                }
            }
            g.backward(loss)?;
            let grads = nets.store.gradients(&g, &p);
            let zeros = |t: &Tensor<T>| Tensor::zeros(t.shape().to_vec());
            let map_grads = (g.grad(mc).unwrap_or_else(|| zeros(&cm)), g.grad(mf).unwrap_or_else(|| zeros(&fm)));
            Ok(ShardResult { loss: loss_v, grads, map_grads, bad_ray })
        })
        .collect();

    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor<T>>> = None;
    let mut gc = Tensor::zeros(cm.shape().to_vec());
    let mut gf = Tensor::zeros(fm.shape().to_vec());
    let mut bad = None;
    for res in results {
        let res = res?;
        loss += res.loss;
        bad = bad.or(res.bad_ray);
        add_into(&mut gc, &res.map_grads.0);
        add_into(&mut gf, &res.map_grads.1);
        match &mut grads {
            None => grads = Some(res.grads),
            Some(acc) => acc.iter_mut().zip(&res.grads).for_each(|(a, b)| add_into(a, b)),
        }
    }
    let mut grads = grads.expect("at least one shard");
    g0.backward_with_seeds(&[(maps.coarse, gc), (maps.fine, gf)])?;
    for (acc, extra) in grads.iter_mut().zip(nets.store.gradients(&g0, &p0)) {
        add_into(acc, &extra);
    }
    Ok((loss, grads, bad))
}

fn add_into<T: Real>(acc: &mut Tensor<T>, x: &Tensor<T>) {
    acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, &b)| *a += b);
}

/// Gradient step on all networks. Learning rates come per optimizer group.
pub fn train_step<T: Real>(
    nets: &mut Networks<T>,
    adam: &mut AdamState<T>,
    batch: &TrainBatch,
    render: &RenderConfig,
    shards: usize,
    clip_norm: f64,
    lr: impl Fn(usize) -> f64,
    step: u64,
) -> Result<StepStats, TrainError> {
    let (loss, mut grads, bad) = compute_gradients(nets, batch, render, shards)?;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { step, detail: bad.unwrap_or_else(|| format!("loss {loss}")) });
    }
    if !grads.iter().all(|g| g.all_finite()) {
        return Err(TrainError::NonFinite { step, detail: "non-finite gradient".into() });
    }
    let grad_norm = clip_global_norm(&mut grads, clip_norm);
    adam.step(&mut nets.store, &grads, lr);
    Ok(StepStats { loss, grad_norm })
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub phase: Phase,
    pub nets: Networks<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    scenes: Vec<Scene>,
    allowed: Vec<Vec<usize>>,
    foreground: Vec<Vec<Vec<(usize, usize)>>>,
}

impl Trainer {
    /// Pretraining uses every view of every scene; fine-tuning only the
    /// non-held-out views of its scene.
    pub fn new(
        cfg: TrainConfig,
        phase: Phase,
        scenes: Vec<Scene>,
        nets: Networks<f32>,
        adam: Option<AdamState<f32>>,
        step: u64,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if scenes.is_empty() {
            return Err(TrainError::Config("no training scenes".into()));
        }
        let allowed = scenes
            .iter()
            .map(|s| match phase {
                Phase::Pretrain => (0..s.views.len()).collect(),
                Phase::Finetune => training_indices(s.views.len(), cfg.holdout_fraction),
            })
            .collect();
        let foreground = scenes
            .iter()
            .map(|s| {
                s.views
                    .iter()
                    .map(|v| {
                        let bg = s.background.filter(|_| cfg.mask_background);
                        let img = &v.image;
                        (0..img.height)
                            .flat_map(|y| (0..img.width).map(move |x| (x, y)))
                            .filter(|&(x, y)| match bg {
                                None => true,
                                Some(b) => {
                                    let c = img.get(x, y);
                                    (0..3).any(|k| (c[k] as f64 - (b[k] * 255.0).round() / 255.0).abs() > 1e-6)
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let adam = adam.unwrap_or_else(|| AdamState::new(&nets.store, AdamConfig::default()));
        Ok(Trainer { cfg, phase, nets, adam, step, scenes, allowed, foreground })
    }

    pub fn base_lr(&self, group: usize) -> f64 {
        match (self.phase, group == FEATURE_GROUP) {
            (Phase::Pretrain, true) => self.cfg.lr_feature,
            (Phase::Pretrain, false) => self.cfg.lr_ibrnet,
            (Phase::Finetune, true) => self.cfg.finetune_lr_feature,
            (Phase::Finetune, false) => self.cfg.finetune_lr_ibrnet,
        }
    }

    pub fn lr(&self, group: usize) -> f64 {
        learning_rate(self.base_lr(group), self.cfg.lr_decay, self.cfg.lr_decay_steps, self.step)
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step);
        rng
    }

    /// Draws this step's pair and rays, then applies one update.
    pub fn train_once(&mut self) -> Result<StepStats, TrainError> {
        let mut rng = self.step_rng();
        let si = (self.step % self.scenes.len() as u64) as usize;
        let scene = &self.scenes[si];
        let cams = scene.cameras();
        let pair = sample_training_pair(&cams, &self.allowed[si], &mut rng, self.cfg.n_views, self.cfg.pool_multiplier)?;
        let fg = &self.foreground[si][pair.target];
        if fg.is_empty() {
            return Err(TrainError::Config(format!("view {} of {} has no foreground pixels", pair.target, scene.name)));
        }
        let target_img: &Image = &scene.views[pair.target].image;
        let pixels: Vec<(usize, usize)> =
            (0..self.cfg.rays_per_batch).map(|_| fg[rng.gen_range(0..fg.len())]).collect();
        let colors = pixels.iter().map(|&(x, y)| target_img.get(x, y)).collect();
        let batch = TrainBatch {
            target: &scene.views[pair.target].camera,
            sources: Sources {
                cameras: pair.sources.iter().map(|&i| &scene.views[i].camera).collect(),
                images: pair.sources.iter().map(|&i| &scene.views[i].image).collect(),
            },
            pixels,
            colors,
            near: scene.near,
            far: scene.far,
            seed: rng.gen(),
        };
        let lrs = [self.lr(0), self.lr(1)];
        let stats = train_step(
            &mut self.nets,
            &mut self.adam,
            &batch,
            &self.cfg.render,
            self.cfg.grad_shards,
            self.cfg.clip_norm,
            |group| lrs[group.min(1)],
            self.step,
        )?;
        self.step += 1;
        Ok(stats)
    }

    /// Runs `steps` updates. `on_log` receives a line at every evaluation
    /// (and after the last step); `on_checkpoint` is called at the checkpoint
    /// cadence with the current trainer.
    pub fn run(
        &mut self,
        steps: u64,
        eval_scenes: &[Scene],
        on_log: &mut dyn FnMut(&LogLine),
        on_checkpoint: &mut dyn FnMut(&Trainer) -> Result<(), TrainError>,
    ) -> Result<Vec<f64>, TrainError> {
        let mut losses = Vec::with_capacity(steps as usize);
        let mut window = Vec::new();
        for i in 0..steps {
            let stats = self.train_once()?;
            losses.push(stats.loss);
            window.push(stats.loss);
            let last = i + 1 == steps;
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
            if (self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0) || last {
                let (p, s) = if self.cfg.eval_every > 0 && !eval_scenes.is_empty() {
                    let mut ps = Vec::new();
                    let mut ss = Vec::new();
                    for sc in eval_scenes {
                        let r = evaluate(&self.nets, sc, self.cfg.holdout_fraction, &self.cfg.eval_render, self.cfg.eval_max_views, None)?;
                        ps.push(r.mean_psnr);
                        ss.push(r.mean_ssim);
                    }
                    (Some(mean(&ps)), Some(mean(&ss)))
                } else {
                    (None, None)
                };
                on_log(&LogLine { step: self.step, loss: mean(&window), lr: self.lr(1), psnr: p, ssim: s });
                window.clear();
            }
        }
        Ok(losses)
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Renders held-out views from training-view sources and scores them.
/// `views` overrides the held-out selection.
pub fn evaluate<T: Real>(
    nets: &Networks<T>,
    scene: &Scene,
    holdout_fraction: f64,
    render: &RenderConfig,
    max_views: Option<usize>,
    views: Option<&[usize]>,
) -> Result<MetricReport, TrainError> {
    let held: Vec<usize> = match views {
        Some(v) => v.to_vec(),
        None => holdout_indices(scene.views.len(), holdout_fraction),
    };
    let train = training_indices(scene.views.len(), holdout_fraction);
    let train_cams: Vec<&Camera> = train.iter().map(|&i| &scene.views[i].camera).collect();
    let mut out = Vec::new();
    for &vi in held.iter().take(max_views.unwrap_or(usize::MAX)) {
        let target = &scene.views[vi];
        let n = render.n_source_views.min(train.len());
        let local = select_working_set(&target.camera, &train_cams, n, None)?;
        let idx: Vec<usize> = local.iter().map(|&j| train[j]).collect();
        let sources = Sources {
            cameras: idx.iter().map(|&i| &scene.views[i].camera).collect(),
            images: idx.iter().map(|&i| &scene.views[i].image).collect(),
        };
        let rendered = render_view(nets, &target.camera, &sources, scene.near, scene.far, render)?;
        let img = if render.m_fine > 0 { rendered.fine } else { rendered.coarse };
        out.push(ViewMetrics {
            view: target.file.clone(),
            psnr: psnr(&img, &target.image)?,
            ssim: ssim(&img, &target.image)?,
            lpips: None,
        });
    }
    Ok(MetricReport::new(scene.name.clone(), out))
}
