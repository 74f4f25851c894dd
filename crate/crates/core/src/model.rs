//! The per-ray network: multi-view feature aggregation, a ray transformer
//! that predicts densities, and soft-argmax colour blending.
//!
//! All operations are batched over `P = rays × samples` sample points, each
//! seeing the same `N` source views.

use ibr_tensor::{xavier_uniform, Bound, Graph, ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

/// Optimizer group of the aggregation/transformer parameters.
pub const IBRNET_GROUP: usize = 1;
const MASK_LOGIT: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("pooling weights need at least one valid view")]
    NoValidViews,
    #[error("length mismatch: {0}")]
    Length(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosEncoding {
    /// Sinusoids of the sample index along the ray.
    SampleIndex,
    /// Sinusoids of the depth normalised to `[0, 1]` between near and far, scaled by 64.
    NormalizedDepth,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension fetched from the source views.
    pub d_feature: usize,
    pub agg_hidden: usize,
    /// Width of the multi-view aware features `f'`.
    pub d_prime: usize,
    pub density_hidden: usize,
    pub d_sigma: usize,
    pub num_heads: usize,
    pub transformer_depth: usize,
    pub ffn_hidden: usize,
    pub color_hidden: usize,
    pub pos_encoding: PosEncoding,
    pub init_sharpness: f64,
    pub ablate_ray_transformer: bool,
    pub ablate_view_directions: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_feature: 32,
            agg_hidden: 64,
            d_prime: 64,
            density_hidden: 128,
            d_sigma: 16,
            num_heads: 4,
            transformer_depth: 1,
            ffn_hidden: 64,
            color_hidden: 32,
            pos_encoding: PosEncoding::SampleIndex,
            init_sharpness: 10.0,
            ablate_ray_transformer: false,
            ablate_view_directions: false,
        }
    }
}

impl ModelConfig {
    /// Per-view input width: fetched feature plus RGB.
    pub fn d_input(&self) -> usize {
        self.d_feature + 3
    }
}

/// Direction-similarity pooling weights for one sample.
///
/// `w̃_i = max(0, e^{s(dot_i − 1)} − min_j e^{s(dot_j − 1)})` over valid views,
/// normalised to sum to one. Falls back to uniform weights over the valid
/// views when every `w̃_i` is zero.
pub fn pooling_weights(dots: &[f64], s: f64, valid: &[bool]) -> std::result::Result<Vec<f64>, ModelError> {
    if dots.len() != valid.len() {
        return Err(ModelError::Length(format!("{} dots, {} validity flags", dots.len(), valid.len())));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(ModelError::NoValidViews);
    }
    let e: Vec<f64> = dots.iter().map(|d| (s * (d - 1.0)).exp()).collect();
    let min = e.iter().zip(valid).filter(|(_, &v)| v).map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = e.iter().zip(valid).map(|(x, &v)| if v { (x - min).max(0.0) } else { 0.0 }).collect();
    let sum: f64 = raw.iter().sum();
    Ok(if sum > 0.0 {
        raw.iter().map(|w| w / sum).collect()
    } else {
        valid.iter().map(|&v| if v { 1.0 / count as f64 } else { 0.0 }).collect()
    })
}

/// Everything one sample point sees from its source views.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleContext {
    pub colors: Vec<[f64; 3]>,
    pub features: Vec<Vec<f64>>,
    pub view_dirs: Vec<Vec3>,
    pub valid: Vec<bool>,
    pub query_dir: Vec3,
}

impl SampleContext {
    pub fn num_views(&self) -> usize {
        self.colors.len()
    }
}

/// Constant inputs for `rays × samples` points and `views` source views.
#[derive(Debug, Clone)]
pub struct SampleBatch<T> {
    pub rays: usize,
    pub samples: usize,
    pub views: usize,
    /// `[P, N, 3]`.
    pub colors: Tensor<T>,
    /// `d − d_i`, `[P, N, 3]`.
    pub delta_dirs: Tensor<T>,
    /// `d · d_i`, `[P·N]`.
    pub dots: Vec<f64>,
    /// `[P·N]`.
    pub valid: Vec<bool>,
    /// Depth of each sample normalised to `[0, 1]`, `[P]`. Only used by
    /// [`PosEncoding::NormalizedDepth`].
    pub depth_frac: Vec<f64>,
}

impl<T: Real> SampleBatch<T> {
    pub fn points(&self) -> usize {
        self.rays * self.samples
    }

    /// Whether each point has at least one valid view.
    pub fn sample_valid(&self) -> Vec<bool> {
        self.valid.chunks(self.views).map(|c| c.iter().any(|&v| v)).collect()
    }

    /// Builds a batch and its `[P·N, d]` feature tensor from per-ray context
    /// lists. All rays need the same sample count and every context the same
    /// view count.
    pub fn from_contexts(rays: &[Vec<SampleContext>]) -> std::result::Result<(Self, Tensor<T>), ModelError> {
        let samples = rays.first().map_or(0, |r| r.len());
        let views = rays.first().and_then(|r| r.first()).map_or(0, |c| c.num_views());
        let d = rays.first().and_then(|r| r.first()).and_then(|c| c.features.first()).map_or(0, |f| f.len());
        let mut colors = Vec::new();
        let mut deltas = Vec::new();
        let mut dots = Vec::new();
        let mut valid = Vec::new();
        let mut feats = Vec::new();
        let mut depth_frac = Vec::new();
        for ray in rays {
            if ray.len() != samples {
                return Err(ModelError::Length(format!("rays with {} and {} samples", samples, ray.len())));
            }
            for (k, ctx) in ray.iter().enumerate() {
                let n = ctx.num_views();
                if n != views || ctx.features.len() != n || ctx.view_dirs.len() != n || ctx.valid.len() != n {
                    return Err(ModelError::Length(format!("context with {n} views, expected {views}")));
                }
                for i in 0..n {
                    if ctx.features[i].len() != d {
                        return Err(ModelError::Length(format!("feature of length {}", ctx.features[i].len())));
                    }
                    colors.extend(ctx.colors[i].iter().map(|&c| T::c(c)));
                    let (delta, dot) = crate::geometry::relative_direction(&ctx.query_dir, &ctx.view_dirs[i]);
                    deltas.extend(delta.iter().map(|&c| T::c(c)));
                    dots.push(dot);
                    valid.push(ctx.valid[i]);
                    feats.extend(ctx.features[i].iter().map(|&f| T::c(f)));
                }
                depth_frac.push(if samples > 1 { k as f64 / (samples - 1) as f64 } else { 0.0 });
            }
        }
        let p = rays.len() * samples;
        let batch = SampleBatch {
            rays: rays.len(),
            samples,
            views,
            colors: Tensor::new(vec![p, views, 3], colors).expect("sized"),
            delta_dirs: Tensor::new(vec![p, views, 3], deltas).expect("sized"),
            dots,
            valid,
            depth_frac,
        };
        Ok((batch, Tensor::new(vec![p * views, d], feats).expect("sized")))
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: store.add(format!("{name}.w"), xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out), IBRNET_GROUP),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]), IBRNET_GROUP),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], p[self.b])
    }
}

/// Dense layers with ELU between them (none after the last).
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers =
            widths.windows(2).enumerate().map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(g, p, x)?;
            if i + 1 < self.layers.len() {
                x = g.elu(x);
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], T::one()), IBRNET_GROUP),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d]), IBRNET_GROUP),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta], T::c(LN_EPS))
    }
}

#[derive(Debug, Clone)]
struct Block {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    norm1: Norm,
    ffn: Mlp,
    norm2: Norm,
}

#[derive(Debug, Clone)]
pub struct IbrNet {
    pub config: ModelConfig,
    sharpness: ParamId,
    agg: Mlp,
    density: Mlp,
    blocks: Vec<Block>,
    sigma_head: Mlp,
    color: Mlp,
}

/// Intermediate tensors of [`IbrNet::aggregate`].
#[derive(Debug, Clone, Copy)]
pub struct Aggregation {
    /// Direction-similarity weights, `[P, N, 1]`.
    pub view_weights: Var,
    /// `[P, 1, D]` each.
    pub mean: Var,
    pub var: Var,
    /// Multi-view aware features, `[P·N, d']`.
    pub f_prime: Var,
    /// Sigmoid pooling weights (zero for invalid views), `[P, N, 1]`.
    pub pool_weights: Var,
    /// `[P, d_σ]`.
    pub f_sigma: Var,
}

#[derive(Debug, Clone)]
pub struct RayOutput {
    /// `[R, S]`.
    pub sigma: Var,
    /// `[R, S, 3]`.
    pub color: Var,
    pub aggregation: Aggregation,
    /// Blend logits after masking, `[P, N]`.
    pub blend_logits: Var,
    /// Attention matrices per block, `[R·heads, S, S]`.
    pub attention: Vec<Var>,
}

fn mask_tensor<T: Real>(flags: &[bool], shape: Vec<usize>) -> Tensor<T> {
    Tensor::new(shape, flags.iter().map(|&f| if f { T::one() } else { T::zero() }).collect()).expect("sized")
}

/// Sinusoidal encoding, `pe[2i] = sin(pos / 10000^{2i/d})`, `pe[2i+1] = cos(..)`.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let a = pos / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

impl IbrNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: ModelConfig, rng: &mut impl Rng) -> Self {
        assert!(config.d_sigma % config.num_heads == 0, "d_sigma must be divisible by num_heads");
        let c = &config;
        let din = c.d_input();
        let sharpness =
            store.add(format!("{prefix}.pool_sharpness"), Tensor::full(vec![1], T::c(c.init_sharpness)), IBRNET_GROUP);
        let agg = Mlp::new(store, &format!("{prefix}.agg"), &[3 * din, c.agg_hidden, c.agg_hidden, c.d_prime + 1], rng);
        let density = Mlp::new(store, &format!("{prefix}.density"), &[2 * c.d_prime, c.density_hidden, c.d_sigma], rng);
        let ds = c.d_sigma;
        let blocks = (0..c.transformer_depth)
            .map(|i| {
                let n = format!("{prefix}.attn{i}");
                Block {
                    q: Dense::new(store, &format!("{n}.q"), ds, ds, rng),
                    k: Dense::new(store, &format!("{n}.k"), ds, ds, rng),
                    v: Dense::new(store, &format!("{n}.v"), ds, ds, rng),
                    o: Dense::new(store, &format!("{n}.o"), ds, ds, rng),
                    norm1: Norm::new(store, &format!("{n}.norm1"), ds),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), &[ds, c.ffn_hidden, ds], rng),
                    norm2: Norm::new(store, &format!("{n}.norm2"), ds),
                }
            })
            .collect();
        let sigma_head = Mlp::new(store, &format!("{prefix}.sigma"), &[ds, ds, 1], rng);
        let color = Mlp::new(store, &format!("{prefix}.color"), &[c.d_prime + 3, c.color_hidden, c.color_hidden, 1], rng);
        IbrNet { config, sharpness, agg, density, blocks, sigma_head, color }
    }

    pub fn sharpness_id(&self) -> ParamId {
        self.sharpness
    }

    /// Direction-similarity pooling weights on the graph, `[P, N, 1]`; differentiable in `s`.
    fn view_weights<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &SampleBatch<T>) -> Result<Var> {
        let (np, n) = (batch.points(), batch.views);
        let counts: Vec<usize> = batch.valid.chunks(n).map(|c| c.iter().filter(|&&v| v).count()).collect();
        let mask = g.constant(mask_tensor(&batch.valid, vec![np, n, 1]));
        if self.config.ablate_view_directions {
            let w = Tensor::from_fn(vec![np, n, 1], |i| {
                let c = counts[i / n];
                if batch.valid[i] {
                    T::one() / T::from_usize(c).unwrap()
                } else {
                    T::zero()
                }
            });
            return Ok(g.constant(w));
        }
        let dm1 = g.constant(Tensor::new(vec![np, n, 1], batch.dots.iter().map(|&d| T::c(d - 1.0)).collect())?);
        let s = g.reshape(p[self.sharpness], &[1, 1, 1])?;
        let arg = g.mul(dm1, s)?;
        let e = g.exp(arg);
        let big = g.constant(Tensor::new(
            vec![np, n, 1],
            batch.valid.iter().map(|&v| if v { T::zero() } else { T::c(1e30) }).collect(),
        )?);
        let e_masked = g.add(e, big)?;
        let min = g.min(e_masked, 1, true)?;
        let diff = g.sub(e, min)?;
        let raw = g.relu(diff);
        let raw = g.mul(raw, mask)?;
        let sum = g.sum(raw, 1, true)?;
        // samples whose raw weights all vanish fall back to uniform weights over valid views
        let sums = g.value(sum).data().to_vec();
        let mut fill = Vec::with_capacity(np * n);
        let mut denom_add = Vec::with_capacity(np);
        for (j, &sv) in sums.iter().enumerate() {
            let degenerate = sv == T::zero();
            for i in 0..n {
                fill.push(if degenerate && batch.valid[j * n + i] { T::one() } else { T::zero() });
            }
            denom_add.push(if degenerate { T::from_usize(counts[j].max(1)).unwrap() } else { T::zero() });
        }
        let fill = g.constant(Tensor::new(vec![np, n, 1], fill)?);
        let denom_add = g.constant(Tensor::new(vec![np, 1, 1], denom_add)?);
        let num = g.add(raw, fill)?;
        let den = g.add(sum, denom_add)?;
        g.div(num, den)
    }

    /// Weighted statistics, the shared per-view MLP and the pooled density feature.
    pub fn aggregate<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &SampleBatch<T>,
        features: Var,
    ) -> Result<Aggregation> {
        let (np, n) = (batch.points(), batch.views);
        let c = &self.config;
        let fs = g.shape(features).to_vec();
        if fs != [np * n, c.d_feature] {
            return Err(TensorError::Invalid {
                op: "aggregate",
                msg: format!("features {fs:?}, expected [{}, {}]", np * n, c.d_feature),
            });
        }
        let din = c.d_input();
        let feat = g.reshape(features, &[np, n, c.d_feature])?;
        let colors = g.constant(batch.colors.clone());
        let f = g.concat(&[feat, colors], 2)?;
        let view_weights = self.view_weights(g, p, batch)?;
        let mean = g.weighted_mean(f, view_weights, 1, true)?;
        let var = g.weighted_var(f, view_weights, 1, true)?;
        let mean_b = g.broadcast_to(mean, &[np, n, din])?;
        let var_b = g.broadcast_to(var, &[np, n, din])?;
        let x = g.concat(&[f, mean_b, var_b], 2)?;
        let x = g.reshape(x, &[np * n, 3 * din])?;
        let out = self.agg.apply(g, p, x)?;
        let f_prime = g.narrow(out, 1, 0, c.d_prime)?;
        let logit = g.narrow(out, 1, c.d_prime, 1)?;
        let w = g.sigmoid(logit);
        let w = g.reshape(w, &[np, n, 1])?;
        let mask = g.constant(mask_tensor(&batch.valid, vec![np, n, 1]));
        let pool_weights = g.mul(w, mask)?;

        let sum = g.sum(pool_weights, 1, true)?;
        let empty: Vec<T> =
            batch.sample_valid().iter().map(|&v| if v { T::zero() } else { T::one() }).collect();
        let empty = g.constant(Tensor::new(vec![np, 1, 1], empty)?);
        let den = g.add(sum, empty)?;
        let wn = g.div(pool_weights, den)?;
        let fp = g.reshape(f_prime, &[np, n, c.d_prime])?;
        let pm = g.weighted_mean(fp, wn, 1, false)?;
        let pv = g.weighted_var(fp, wn, 1, false)?;
        let pooled = g.concat(&[pm, pv], 1)?;
        let f_sigma = self.density.apply(g, p, pooled)?;
        Ok(Aggregation { view_weights, mean, var, f_prime, pool_weights, f_sigma })
    }

    /// Densities for `[R, S, d_σ]` density features. `key_valid` marks the
    /// samples that take part in attention; `depth_frac` feeds the
    /// depth-based positional encoding.
    pub fn ray_transformer<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_sigma: Var,
        key_valid: &[bool],
        depth_frac: &[f64],
    ) -> Result<(Var, Vec<Var>)> {
        let s3 = g.shape(f_sigma).to_vec();
        let (r, s, ds) = (s3[0], s3[1], s3[2]);
        let c = &self.config;
        let mut x = g.reshape(f_sigma, &[r * s, ds])?;
        let mut attention = Vec::new();
        if c.ablate_ray_transformer {
            for block in &self.blocks {
                let h = block.ffn.apply(g, p, x)?;
                let h = g.add(x, h)?;
                x = block.norm2.apply(g, p, h)?;
            }
        } else {
            let pe = match c.pos_encoding {
                PosEncoding::Off => None,
                PosEncoding::SampleIndex => {
                    Some((0..r * s).flat_map(|i| sinusoid((i % s) as f64, ds)).collect::<Vec<_>>())
                }
                PosEncoding::NormalizedDepth => {
                    Some(depth_frac.iter().flat_map(|&t| sinusoid(64.0 * t, ds)).collect::<Vec<_>>())
                }
            };
            if let Some(pe) = pe {
                let pe = g.constant(Tensor::new(vec![r * s, ds], pe.into_iter().map(T::c).collect())?);
                x = g.add(x, pe)?;
            }
            let heads = c.num_heads;
            let dh = ds / heads;
            let bias: Vec<T> = (0..r * heads)
                .flat_map(|rh| {
                    let ray = rh / heads;
                    (0..s).map(move |k| ray * s + k)
                })
                .map(|i| if key_valid[i] { T::zero() } else { T::c(MASK_LOGIT) })
                .collect();
            let bias = g.constant(Tensor::new(vec![r * heads, 1, s], bias)?);
            for block in &self.blocks {
                let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
                    let t = g.reshape(t, &[r, s, heads, dh])?;
                    let t = g.permute(t, &[0, 2, 1, 3])?;
                    g.reshape(t, &[r * heads, s, dh])
                };
                let q = block.q.apply(g, p, x)?;
                let k = block.k.apply(g, p, x)?;
                let v = block.v.apply(g, p, x)?;
                let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
                let scores = g.bmm(q, k, true)?;
                let scores = g.scale(scores, T::c(1.0 / (dh as f64).sqrt()));
                let scores = g.add(scores, bias)?;
                let attn = g.softmax(scores, 2)?;
                attention.push(attn);
                let a = g.bmm(attn, v, false)?;
                let a = g.reshape(a, &[r, heads, s, dh])?;
                let a = g.permute(a, &[0, 2, 1, 3])?;
                let a = g.reshape(a, &[r * s, ds])?;
                let a = block.o.apply(g, p, a)?;
                let h = g.add(x, a)?;
                let h = block.norm1.apply(g, p, h)?;
                let f = block.ffn.apply(g, p, h)?;
                let h2 = g.add(h, f)?;
                x = block.norm2.apply(g, p, h2)?;
            }
        }
        let raw = self.sigma_head.apply(g, p, x)?;
        let shifted = g.add_scalar(raw, T::c(-1.0));
        let sigma = g.softplus(shifted);
        let mask = g.constant(mask_tensor(key_valid, vec![r * s, 1]));
        let sigma = g.mul(sigma, mask)?;
        Ok((g.reshape(sigma, &[r, s])?, attention))
    }

    /// Soft-argmax blend of source colours. Returns `[P, 3]` colours and the
    /// masked logits `[P, N]`.
    pub fn blend_color<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        batch: &SampleBatch<T>,
        f_prime: Var,
    ) -> Result<(Var, Var)> {
        let (np, n) = (batch.points(), batch.views);
        let dirs = if self.config.ablate_view_directions {
            Tensor::zeros(vec![np * n, 3])
        } else {
            batch.delta_dirs.clone().reshape(vec![np * n, 3])?
        };
        let dirs = g.constant(dirs);
        let x = g.concat(&[f_prime, dirs], 1)?;
        let logits = self.color.apply(g, p, x)?;
        let logits = g.reshape(logits, &[np, n])?;
        let bias = g.constant(Tensor::new(
            vec![np, n],
            batch.valid.iter().map(|&v| if v { T::zero() } else { T::c(MASK_LOGIT) }).collect(),
        )?);
        let logits = g.add(logits, bias)?;
        let w = g.softmax(logits, 1)?;
        let w = g.reshape(w, &[np, n, 1])?;
        let colors = g.constant(batch.colors.clone());
        let c = g.weighted_mean(colors, w, 1, false)?;
        let keep = g.constant(mask_tensor(&batch.sample_valid(), vec![np, 1]));
        Ok((g.mul(c, keep)?, logits))
    }

    /// Densities `[R, S]` and colours `[R, S, 3]` for every sample.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &SampleBatch<T>, features: Var) -> Result<RayOutput> {
        let agg = self.aggregate(g, p, batch, features)?;
        let fs = g.reshape(agg.f_sigma, &[batch.rays, batch.samples, self.config.d_sigma])?;
        let (sigma, attention) = self.ray_transformer(g, p, fs, &batch.sample_valid(), &batch.depth_frac)?;
        let (color, blend_logits) = self.blend_color(g, p, batch, agg.f_prime)?;
        let color = g.reshape(color, &[batch.rays, batch.samples, 3])?;
        Ok(RayOutput { sigma, color, aggregation: agg, blend_logits, attention })
    }

    /// Forward pass for one ray from explicit contexts (inference).
    pub fn predict_ray<T: Real>(
        &self,
        store: &ParamStore<T>,
        contexts: &[SampleContext],
    ) -> std::result::Result<(Vec<T>, Vec<[T; 3]>), Box<dyn std::error::Error + Send + Sync>> {
        let (batch, feats) = SampleBatch::<T>::from_contexts(&[contexts.to_vec()])?;
        let mut g = Graph::no_grad();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(feats);
        let out = self.forward(&mut g, &p, &batch, f)?;
        let sigma = g.value(out.sigma).data().to_vec();
        let color = g.value(out.color).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok((sigma, color))
    }
}
