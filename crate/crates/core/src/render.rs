//! Working-set selection, hierarchical sampling, volume compositing and
//! chunked image rendering.

use ibr_tensor::{Bound, Graph, Real, Result as TResult, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_net::{fetch, stack_images};
use crate::geometry::{sample_coarse, Camera, DepthSamples, GeometryError, Ray};
use crate::image::Image;
use crate::model::{IbrNet, SampleBatch};
use crate::network::Networks;

pub const EPS_PDF: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("requested {requested} source views but only {available} are available")]
    NotEnoughViews { requested: usize, available: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub n_source_views: usize,
    pub m_coarse: usize,
    /// Zero disables the fine pass.
    pub m_fine: usize,
    pub chunk_size: usize,
    /// Keyed RNG streams from `seed`; otherwise the base seed comes from entropy.
    pub deterministic: bool,
    pub seed: u64,
    /// Stratified jitter of the coarse depths.
    pub jitter: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_source_views: 10,
            m_coarse: 64,
            m_fine: 64,
            chunk_size: 1024,
            deterministic: true,
            seed: 0,
            jitter: false,
        }
    }
}

impl RenderConfig {
    fn base_seed(&self) -> u64 {
        if self.deterministic {
            self.seed
        } else {
            rand::thread_rng().gen()
        }
    }
}

/// Independent stream for one ray and one sampling pass.
pub fn ray_rng(seed: u64, ray_id: u64, pass: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray_id.wrapping_mul(4).wrapping_add(pass));
    rng
}

/// The `n` source views for rendering `target`: among the `2n` cameras with
/// the nearest centres, those whose optical axes best match the target's.
/// Equal alignment goes to the nearer view, then to the lower index.
/// `exclude` drops one view (the target itself).
pub fn select_working_set(
    target: &Camera,
    cameras: &[&Camera],
    n: usize,
    exclude: Option<usize>,
) -> Result<Vec<usize>, RenderError> {
    let eligible: Vec<usize> = (0..cameras.len()).filter(|&i| Some(i) != exclude).collect();
    if n > eligible.len() || n == 0 {
        return Err(RenderError::NotEnoughViews { requested: n, available: eligible.len() });
    }
    let c = target.center();
    let mut by_dist: Vec<(f64, usize)> = eligible.iter().map(|&i| ((cameras[i].center() - c).norm(), i)).collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    by_dist.truncate(2 * n);
    let f = target.forward();
    let mut by_dir: Vec<(f64, f64, usize)> =
        by_dist.iter().map(|&(d, i)| (cameras[i].forward().dot(&f), d, i)).collect();
    by_dir.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(by_dir.into_iter().take(n).map(|(_, _, i)| i).collect())
}

/// Compositing result on the graph.
#[derive(Debug, Clone, Copy)]
pub struct Composite {
    /// `[R, 3]`.
    pub color: Var,
    /// `a_k = T_k (1 − e^{−σ_k δ_k})`, `[R, S]`.
    pub weights: Var,
    /// `Σ_k a_k`, `[R]`.
    pub alpha: Var,
}

/// Volume rendering of `[R, S]` densities and `[R, S, 3]` colours with
/// `[R, S]` intervals.
pub fn composite<T: Real>(g: &mut Graph<T>, sigma: Var, color: Var, deltas: &[f64]) -> TResult<Composite> {
    let shape = g.shape(sigma).to_vec();
    let delta = g.constant(Tensor::new(shape.clone(), deltas.iter().map(|&d| T::c(d)).collect())?);
    let sd = g.mul(sigma, delta)?;
    let neg = g.neg(sd);
    let keep = g.exp(neg);
    let alpha = g.neg(keep);
    let alpha = g.add_scalar(alpha, T::one());
    let acc = g.cumsum_exclusive(sd, 1)?;
    let acc = g.neg(acc);
    let trans = g.exp(acc);
    let weights = g.mul(trans, alpha)?;
    let w3 = g.reshape(weights, &[shape[0], shape[1], 1])?;
    let rgb = g.weighted_mean(color, w3, 1, false)?;
    let total = g.sum(weights, 1, false)?;
    Ok(Composite { color: rgb, weights, alpha: total })
}

/// Plain-value compositing of a single ray; returns `(color, weights, alpha)`.
pub fn composite_values(sigma: &[f64], colors: &[[f64; 3]], deltas: &[f64]) -> ([f64; 3], Vec<f64>, f64) {
    let m = sigma.len();
    let mut g = Graph::<f64>::no_grad();
    let s = g.constant(Tensor::new(vec![1, m], sigma.to_vec()).expect("sized"));
    let c = g.constant(Tensor::new(vec![1, m, 3], colors.iter().flatten().copied().collect()).expect("sized"));
    let out = composite(&mut g, s, c, deltas).expect("shapes agree");
    let rgb = g.value(out.color).data();
    (
        [rgb[0], rgb[1], rgb[2]],
        g.value(out.weights).data().to_vec(),
        g.value(out.alpha).item(),
    )
}

/// Inverse-CDF draws from the piecewise-constant density over the coarse
/// intervals `[t_k, t_{k+1})`, with mass proportional to `a_k`. When the
/// total mass is at most [`EPS_PDF`] the draws fall back to jittered
/// uniform-disparity samples. Output is sorted.
pub fn sample_fine<R: Rng + ?Sized>(
    coarse: &[f64],
    weights: &[f64],
    m_fine: usize,
    rng: &mut R,
    near: f64,
    far: f64,
) -> Result<Vec<f64>, GeometryError> {
    let intervals = coarse.len().saturating_sub(1);
    let w: Vec<f64> = weights.iter().take(intervals).map(|&a| a.max(0.0)).collect();
    let total: f64 = w.iter().sum();
    if intervals == 0 || !(total > EPS_PDF) {
        if m_fine < 2 {
            return Ok((0..m_fine).map(|_| rng.gen_range(near..=far)).collect());
        }
        return Ok(sample_coarse(near, far, m_fine, Some(rng))?.depths);
    }
    let mut cdf = Vec::with_capacity(intervals + 1);
    cdf.push(0.0);
    let mut run = 0.0;
    for &x in &w {
        run += x / total;
        cdf.push(run);
    }
    let mut out: Vec<f64> = (0..m_fine)
        .map(|_| {
            let u = rng.gen::<f64>() * cdf[intervals];
            let k = cdf.partition_point(|&c| c <= u).clamp(1, intervals) - 1;
            let span = cdf[k + 1] - cdf[k];
            let frac = if span > 0.0 { ((u - cdf[k]) / span).clamp(0.0, 1.0) } else { 0.5 };
            coarse[k] + frac * (coarse[k + 1] - coarse[k])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Merges two sorted depth lists.
pub fn merge_depths(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b).copied().collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Source cameras and images seen by one render.
#[derive(Debug, Clone)]
pub struct Sources<'a> {
    pub cameras: Vec<&'a Camera>,
    pub images: Vec<&'a Image>,
}

impl<'a> Sources<'a> {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Projects every sample of every ray into every source view.
/// Returns the constant batch and image-space feature queries.
pub fn build_batch<T: Real>(
    rays: &[Ray],
    samples: &[DepthSamples],
    sources: &Sources,
    near: f64,
    far: f64,
) -> (SampleBatch<T>, Vec<(usize, f64, f64)>) {
    let s = samples.first().map_or(0, |d| d.len());
    let n = sources.len();
    let p = rays.len() * s;
    let mut colors = Vec::with_capacity(p * n * 3);
    let mut deltas = Vec::with_capacity(p * n * 3);
    let mut dots = Vec::with_capacity(p * n);
    let mut valid = Vec::with_capacity(p * n);
    let mut queries = Vec::with_capacity(p * n);
    let mut depth_frac = Vec::with_capacity(p);
    let centers: Vec<_> = sources.cameras.iter().map(|c| c.center()).collect();
    for (ray, ds) in rays.iter().zip(samples) {
        assert_eq!(ds.len(), s, "all rays need the same sample count");
        for &t in &ds.depths {
            let x = ray.at(t);
            depth_frac.push(((t - near) / (far - near)).clamp(0.0, 1.0));
            for i in 0..n {
                let proj = sources.cameras[i].project(&x);
                let (mut u, mut v) = (proj.u, proj.v);
                if !(u.is_finite() && v.is_finite()) {
                    u = 0.0;
                    v = 0.0;
                }
                let (c, inside) = sources.images[i].sample(u, v);
                let ok = proj.in_front() && inside;
                let di = (x - centers[i]).normalize();
                let dot = ray.direction.dot(&di);
                let delta = ray.direction - di;
                colors.extend(c.iter().map(|&v| T::c(v as f64)));
                deltas.extend(delta.iter().map(|&v| T::c(v)));
                dots.push(dot);
                valid.push(ok);
                queries.push((i, u, v));
            }
        }
    }
    let batch = SampleBatch {
        rays: rays.len(),
        samples: s,
        views: n,
        colors: Tensor::new(vec![p, n, 3], colors).expect("sized"),
        delta_dirs: Tensor::new(vec![p, n, 3], deltas).expect("sized"),
        dots,
        valid,
        depth_frac,
    };
    (batch, queries)
}

/// One network pass over a set of rays.
#[derive(Debug, Clone)]
pub struct PassOutput {
    pub samples: Vec<DepthSamples>,
    /// `[R, S]`.
    pub sigma: Var,
    /// `[R, S, 3]`.
    pub colors: Var,
    pub composite: Composite,
}

pub fn run_pass<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    net: &IbrNet,
    maps: Var,
    sources: &Sources,
    rays: &[Ray],
    samples: Vec<DepthSamples>,
    near: f64,
    far: f64,
) -> TResult<PassOutput> {
    let (batch, queries) = build_batch::<T>(rays, &samples, sources, near, far);
    let (features, _) = fetch(g, maps, &queries)?;
    let out = net.forward(g, p, &batch, features)?;
    let deltas: Vec<f64> = samples.iter().flat_map(|d| d.intervals.iter().copied()).collect();
    let comp = composite(g, out.sigma, out.color, &deltas)?;
    Ok(PassOutput { samples, sigma: out.sigma, colors: out.color, composite: comp })
}

/// Coarse and (optionally) fine renders of a batch of rays.
#[derive(Debug, Clone)]
pub struct RayBatchOutput {
    pub coarse: PassOutput,
    pub fine: Option<PassOutput>,
}

impl RayBatchOutput {
    pub fn last(&self) -> &PassOutput {
        self.fine.as_ref().unwrap_or(&self.coarse)
    }
}

/// Coarse pass, fine sampling from the coarse weights, and fine pass over
/// the merged depths. `ray_ids` key the per-ray RNG streams.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    coarse_net: &IbrNet,
    fine_net: &IbrNet,
    maps: (Var, Var),
    sources: &Sources,
    rays: &[Ray],
    ray_ids: &[u64],
    near: f64,
    far: f64,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<RayBatchOutput, RenderError> {
    let coarse_samples = rays
        .iter()
        .zip(ray_ids)
        .map(|(_, &id)| {
            if cfg.jitter {
                sample_coarse(near, far, cfg.m_coarse, Some(&mut ray_rng(seed, id, 0)))
            } else {
                sample_coarse::<ChaCha8Rng>(near, far, cfg.m_coarse, None)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let coarse = run_pass(g, p, coarse_net, maps.0, sources, rays, coarse_samples, near, far)?;
    if cfg.m_fine == 0 {
        return Ok(RayBatchOutput { coarse, fine: None });
    }
    let w = g.value(coarse.composite.weights).data().to_vec();
    let m = cfg.m_coarse;
    let mut fine_samples = Vec::with_capacity(rays.len());
    for (r, &id) in ray_ids.iter().enumerate() {
        let wr: Vec<f64> = w[r * m..(r + 1) * m].iter().map(|x| x.to_f64().unwrap()).collect();
        let cd = &coarse.samples[r].depths;
        let fine = sample_fine(cd, &wr, cfg.m_fine, &mut ray_rng(seed, id, 1), near, far)?;
        fine_samples.push(DepthSamples::new(merge_depths(cd, &fine), near, far));
    }
    let fine = run_pass(g, p, fine_net, maps.1, sources, rays, fine_samples, near, far)?;
    Ok(RayBatchOutput { coarse, fine: Some(fine) })
}

/// Final-pass colour, depth estimate `Σ a_k t_k` and accumulated alpha of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayResult {
    pub coarse: [f64; 3],
    pub fine: Option<[f64; 3]>,
    pub depth: f64,
    pub alpha: f64,
    /// Coarse sample depth with the largest compositing weight.
    pub peak_depth: f64,
}

fn extract<T: Real>(g: &Graph<T>, out: &RayBatchOutput) -> Vec<RayResult> {
    let rgb = |v: Var, r: usize| {
        let d = g.value(v).data();
        [d[r * 3].to_f64().unwrap(), d[r * 3 + 1].to_f64().unwrap(), d[r * 3 + 2].to_f64().unwrap()]
    };
    let last = out.last();
    let w = g.value(last.composite.weights).data();
    let alpha = g.value(last.composite.alpha).data();
    let wc = g.value(out.coarse.composite.weights).data();
    (0..out.coarse.samples.len())
        .map(|r| {
            let ds = &last.samples[r].depths;
            let depth = ds.iter().enumerate().map(|(k, &t)| w[r * ds.len() + k].to_f64().unwrap() * t).sum();
            let cd = &out.coarse.samples[r].depths;
            let mut peak = 0;
            for k in 1..cd.len() {
                if wc[r * cd.len() + k] > wc[r * cd.len() + peak] {
                    peak = k;
                }
            }
            RayResult {
                coarse: rgb(out.coarse.composite.color, r),
                fine: out.fine.as_ref().map(|f| rgb(f.composite.color, r)),
                depth,
                alpha: alpha[r].to_f64().unwrap(),
                peak_depth: cd[peak],
            }
        })
        .collect()
}

/// Feature maps of the source images, computed once per render.
pub struct FeatureCache<T> {
    pub coarse: Tensor<T>,
    pub fine: Tensor<T>,
}

pub fn extract_features<T: Real>(nets: &Networks<T>, images: &[&Image]) -> Result<FeatureCache<T>, RenderError> {
    let mut g = Graph::no_grad();
    let p = nets.store.bind_frozen(&mut g);
    let x = g.constant(stack_images(images)?);
    let maps = nets.feature.forward(&mut g, &p, x)?;
    Ok(FeatureCache { coarse: g.value(maps.coarse).clone(), fine: g.value(maps.fine).clone() })
}

/// Renders arbitrary rays in inference mode, chunked and in parallel.
pub fn render_ray_list<T: Real>(
    nets: &Networks<T>,
    cache: &FeatureCache<T>,
    sources: &Sources,
    rays: &[(u64, Ray)],
    near: f64,
    far: f64,
    cfg: &RenderConfig,
) -> Result<Vec<RayResult>, RenderError> {
    let seed = cfg.base_seed();
    let chunk = cfg.chunk_size.max(1);
    let parts: Vec<Result<Vec<RayResult>, RenderError>> = rays
        .par_chunks(chunk)
        .map(|part| {
            let mut g = Graph::no_grad();
            let p = nets.store.bind_frozen(&mut g);
            let mc = g.constant(cache.coarse.clone());
            let mf = g.constant(cache.fine.clone());
            let ids: Vec<u64> = part.iter().map(|r| r.0).collect();
            let rs: Vec<Ray> = part.iter().map(|r| r.1).collect();
            let out = render_rays(&mut g, &p, &nets.coarse, &nets.fine, (mc, mf), sources, &rs, &ids, near, far, cfg, seed)?;
            Ok(extract(&g, &out))
        })
        .collect();
    let mut out = Vec::with_capacity(rays.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Renders a single ray.
pub fn render_ray<T: Real>(
    nets: &Networks<T>,
    cache: &FeatureCache<T>,
    sources: &Sources,
    ray_id: u64,
    ray: Ray,
    near: f64,
    far: f64,
    cfg: &RenderConfig,
) -> Result<RayResult, RenderError> {
    Ok(render_ray_list(nets, cache, sources, &[(ray_id, ray)], near, far, cfg)?[0])
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub coarse: Image,
    pub fine: Image,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub peak_depth: Vec<f64>,
}

/// Renders every pixel of `target` from the given source views.
pub fn render_view<T: Real>(
    nets: &Networks<T>,
    target: &Camera,
    sources: &Sources,
    near: f64,
    far: f64,
    cfg: &RenderConfig,
) -> Result<RenderedView, RenderError> {
    let cache = extract_features(nets, &sources.images)?;
    let (w, h) = (target.width, target.height);
    let rays: Vec<(u64, Ray)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| ((y * w + x) as u64, target.pixel_ray(x, y))).collect();
    let results = render_ray_list(nets, &cache, sources, &rays, near, far, cfg)?;
    let to_img = |f: &dyn Fn(&RayResult) -> [f64; 3]| {
        let mut img = Image::new(w, h);
        for (i, r) in results.iter().enumerate() {
            let c = f(r);
            img.set(i % w, i / w, [c[0].clamp(0.0, 1.0) as f32, c[1].clamp(0.0, 1.0) as f32, c[2].clamp(0.0, 1.0) as f32]);
        }
        img
    };
    Ok(RenderedView {
        coarse: to_img(&|r| r.coarse),
        fine: to_img(&|r| r.fine.unwrap_or(r.coarse)),
        depth: results.iter().map(|r| r.depth).collect(),
        alpha: results.iter().map(|r| r.alpha).collect(),
        peak_depth: results.iter().map(|r| r.peak_depth).collect(),
    })
}

/// Selects a working set from `scene` (excluding `exclude`) and renders `target`.
pub fn render_image<T: Real>(
    nets: &Networks<T>,
    target: &Camera,
    scene: &crate::scene_io::Scene,
    exclude: Option<usize>,
    cfg: &RenderConfig,
) -> Result<RenderedView, RenderError> {
    let cams = scene.cameras();
    let n = cfg.n_source_views.min(cams.len() - usize::from(exclude.is_some()));
    let idx = select_working_set(target, &cams, n, exclude)?;
    let sources = Sources {
        cameras: idx.iter().map(|&i| &scene.views[i].camera).collect(),
        images: idx.iter().map(|&i| &scene.views[i].image).collect(),
    };
    render_view(nets, target, &sources, scene.near, scene.far, cfg)
}
