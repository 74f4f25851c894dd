//! Convolutional encoder-decoder that turns each source image into two dense
//! feature maps (coarse and fine) at quarter resolution.

use ibr_tensor::{xavier_uniform, Bound, Graph, ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Optimizer group of feature-extractor parameters.
pub const FEATURE_GROUP: usize = 0;
pub const MIN_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    /// Channels of each output map.
    pub d: usize,
    /// Encoder channels, one stride-2 block each.
    pub channels: [usize; 3],
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig { d: 32, channels: [16, 32, 64] }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        let w = xavier_uniform(rng, &[cout, cin, k, k], cin * k * k, cout * k * k);
        Conv {
            w: store.add(format!("{name}.w"), w, FEATURE_GROUP),
            b: store.add(format!("{name}.b"), Tensor::zeros(vec![cout]), FEATURE_GROUP),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), stride, pad)
    }
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub config: FeatureNetConfig,
    enc: [Conv; 3],
    dec: Conv,
    head: Conv,
}

/// Channel-last feature maps for a stack of views, `[V, h, w, d]` each.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMaps {
    pub coarse: Var,
    pub fine: Var,
}

/// Spatial size of the feature maps for an `h × w` image.
pub fn feature_size(h: usize, w: usize) -> (usize, usize) {
    (h.div_ceil(4), w.div_ceil(4))
}

impl FeatureNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: FeatureNetConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = config.channels;
        let enc = [
            Conv::new(store, &format!("{prefix}.enc1"), 3, c1, 3, rng),
            Conv::new(store, &format!("{prefix}.enc2"), c1, c2, 3, rng),
            Conv::new(store, &format!("{prefix}.enc3"), c2, c3, 3, rng),
        ];
        let dec = Conv::new(store, &format!("{prefix}.dec"), c3 + c2, c3, 3, rng);
        let head = Conv::new(store, &format!("{prefix}.head"), c3, 2 * config.d, 1, rng);
        FeatureNet { config, enc, dec, head }
    }

    /// `images` is `[V, 3, H, W]` with values in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<FeatureMaps> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(TensorError::Invalid { op: "feature_net", msg: format!("expected [V,3,H,W], got {s:?}") });
        }
        if s[2] < MIN_SIZE || s[3] < MIN_SIZE {
            return Err(TensorError::Invalid {
                op: "feature_net",
                msg: format!("image {}x{} is smaller than {MIN_SIZE}x{MIN_SIZE}", s[3], s[2]),
            });
        }
        let (fh, fw) = feature_size(s[2], s[3]);
        let x = g.scale(images, T::c(2.0));
        let x = g.add_scalar(x, T::c(-1.0));
        let e1 = self.enc[0].apply(g, p, x, 2, 1)?;
        let e1 = g.elu(e1);
        let e2 = self.enc[1].apply(g, p, e1, 2, 1)?;
        let e2 = g.elu(e2);
        let e3 = self.enc[2].apply(g, p, e2, 2, 1)?;
        let e3 = g.elu(e3);
        let up = g.upsample2x(e3)?;
        let up = g.narrow(up, 2, 0, fh)?;
        let up = g.narrow(up, 3, 0, fw)?;
        let cat = g.concat(&[up, e2], 1)?;
        let dec = self.dec.apply(g, p, cat, 1, 1)?;
        let dec = g.elu(dec);
        let out = self.head.apply(g, p, dec, 1, 0)?;
        let out = g.permute(out, &[0, 2, 3, 1])?;
        let d = self.config.d;
        Ok(FeatureMaps { coarse: g.narrow(out, 3, 0, d)?, fine: g.narrow(out, 3, d, d)? })
    }
}

/// Bilinear feature lookup at image-space coordinates `(view, u, v)`.
/// Returns `[Q, d]` and per-query validity.
pub fn fetch<T: Real>(g: &mut Graph<T>, maps: Var, queries: &[(usize, f64, f64)]) -> Result<(Var, Vec<bool>)> {
    let q: Vec<(usize, T, T)> = queries.iter().map(|&(i, u, v)| (i, T::c(0.25 * u), T::c(0.25 * v))).collect();
    g.bilinear(maps, &q)
}

/// Stacks images as `[V, 3, H, W]`; all must share one size.
pub fn stack_images<T: Real>(images: &[&crate::image::Image]) -> Result<Tensor<T>> {
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for img in images {
        if img.width != w || img.height != h {
            return Err(TensorError::Invalid {
                op: "stack_images",
                msg: format!("mixed image sizes {}x{} and {w}x{h}", img.width, img.height),
            });
        }
        data.extend(img.to_chw().into_iter().map(|v| T::c(v as f64)));
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
