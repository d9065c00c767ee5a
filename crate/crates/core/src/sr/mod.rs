//! Super-resolution backbone with intermediate feature taps.
//!
//! The network is a compact shifted-window transformer: a 3x3 convolution
//! embeds the image (the `shallow` tap), residual groups of window-attention
//! blocks each closed by a 3x3 convolution refine it (the `deep` tap is the
//! normalised output of the last group), and a single convolution followed by
//! pixel shuffle reconstructs a residual that is added to a bicubic upscale of
//! the input. Both taps are at input resolution.

mod pretext;
mod stub;
mod swin;

use std::collections::BTreeMap;
use std::path::Path;

use gazesr_tensor::nn::{Conv2d, LayerNorm};
use gazesr_tensor::{checkpoint, layout, resample_weights, Graph, ParamStore, ResampleMethod, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::resize;
use crate::error::{ensure, Error, Result};
use crate::image::{batch_chw, ImageU8};

pub use pretext::{degraded_pair_input, train_sr_pretext, PretextConfig, PretextReport};
pub use stub::center_gaze_stub;
use swin::SwinBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrInit {
    /// Reconstruction conv zeroed: the untrained network is exactly bicubic upscaling.
    Identity,
    /// Every layer randomly initialised.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrBackboneConfig {
    pub scale: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_groups: usize,
    pub blocks_per_group: usize,
    pub window_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub init: SrInit,
}

impl Default for SrBackboneConfig {
    fn default() -> Self {
        SrBackboneConfig {
            scale: 2,
            in_channels: 3,
            embed_dim: 32,
            num_groups: 2,
            blocks_per_group: 2,
            window_size: 8,
            num_heads: 2,
            mlp_ratio: 2.0,
            init: SrInit::Identity,
        }
    }
}

impl SrBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.scale == 2 || self.scale == 4, "sr scale must be 2 or 4, got {}", self.scale);
        ensure!(self.in_channels == 3 || self.in_channels == 1, "sr in_channels must be 1 or 3");
        ensure!(self.embed_dim > 0 && self.num_heads > 0, "embed_dim and num_heads must be positive");
        ensure!(
            self.embed_dim % self.num_heads == 0,
            "embed_dim {} is not divisible by num_heads {}",
            self.embed_dim,
            self.num_heads
        );
        ensure!(self.num_groups >= 1 && self.blocks_per_group >= 1, "need at least one group and one block");
        ensure!(self.window_size >= 2, "window_size must be at least 2");
        ensure!(self.mlp_ratio > 0.0, "mlp_ratio must be positive");
        Ok(())
    }
}

struct ResidualGroup {
    blocks: Vec<SwinBlock>,
    conv: Conv2d,
}

/// Layer handles; parameter values live in the caller's [`ParamStore`].
pub struct SrBackbone {
    cfg: SrBackboneConfig,
    prefix: String,
    conv_first: Conv2d,
    groups: Vec<ResidualGroup>,
    norm: LayerNorm,
    conv_after_body: Conv2d,
    upsample: Conv2d,
}

/// Graph outputs of one forward pass.
pub struct SrGraphOut {
    /// `[N, C, sH, sW]` in [0, 1] (unclamped).
    pub image: Var,
    /// `[N, D, H, W]` after the first convolution.
    pub shallow: Var,
    /// `[N, D, H, W]` after the last residual group.
    pub deep: Var,
}

fn crop_nchw(g: &Graph<'_, impl Scalar>, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x);
    if (s[2], s[3]) == (h, w) {
        return x;
    }
    let mut idx = Vec::with_capacity(s[0] * s[1] * h * w);
    for p in 0..s[0] * s[1] {
        for y in 0..h {
            idx.extend((0..w).map(|x| ((p * s[2] + y) * s[3] + x) as u32));
        }
    }
    g.gather(x, idx.into(), &[s[0], s[1], h, w])
}

/// Reflect-pads the bottom and right edges of `[N, C, H, W]` to `(hp, wp)`.
fn reflect_pad_nchw(g: &Graph<'_, impl Scalar>, x: Var, hp: usize, wp: usize) -> Var {
    let s = g.shape(x);
    let (h, w) = (s[2], s[3]);
    if (h, w) == (hp, wp) {
        return x;
    }
    let refl = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
    let mut idx = Vec::with_capacity(s[0] * s[1] * hp * wp);
    for p in 0..s[0] * s[1] {
        for y in 0..hp {
            let sy = refl(y, h);
            idx.extend((0..wp).map(|x| ((p * h + sy) * w + refl(x, w)) as u32));
        }
    }
    g.gather(x, idx.into(), &[s[0], s[1], hp, wp])
}

impl SrBackbone {
    /// Registers parameters named `{prefix}conv_first.weight`, `{prefix}layers.0...` etc.
    pub fn new<S: Scalar>(cfg: &SrBackboneConfig, ps: &mut ParamStore<S>, prefix: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let p = |n: &str| format!("{prefix}{n}");
        let conv_first = Conv2d::same3(ps, &p("conv_first"), cfg.in_channels, d, &mut rng);
        let hidden = ((d as f64 * cfg.mlp_ratio).round() as usize).max(1);
        let groups = (0..cfg.num_groups)
            .map(|gi| ResidualGroup {
                blocks: (0..cfg.blocks_per_group)
                    .map(|bi| {
                        SwinBlock::new(
                            ps,
                            &p(&format!("layers.{gi}.blocks.{bi}")),
                            d,
                            cfg.num_heads,
                            cfg.window_size,
                            hidden,
                            bi % 2 == 1,
                            &mut rng,
                        )
                    })
                    .collect(),
                conv: Conv2d::same3(ps, &p(&format!("layers.{gi}.conv")), d, d, &mut rng),
            })
            .collect();
        let norm = LayerNorm::new(ps, &p("norm"), d, &mut rng);
        let conv_after_body = Conv2d::same3(ps, &p("conv_after_body"), d, d, &mut rng);
        let upsample =
            Conv2d::same3(ps, &p("upsample.0"), d, cfg.in_channels * cfg.scale * cfg.scale, &mut rng);
        if cfg.init == SrInit::Identity {
            upsample.zero(ps);
        }
        Ok(SrBackbone { cfg: cfg.clone(), prefix: prefix.to_string(), conv_first, groups, norm, conv_after_body, upsample })
    }

    pub fn config(&self) -> &SrBackboneConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Prefix shared by every parameter of residual groups (the tap-consistency boundary).
    pub fn group_prefix(&self) -> String {
        format!("{}layers.", self.prefix)
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> SrGraphOut {
        let s = g.shape(x);
        assert_eq!(s.len(), 4, "sr input must be NCHW");
        assert_eq!(s[1], self.cfg.in_channels, "sr input channel count");
        let (n, h, w) = (s[0], s[2], s[3]);
        let ws = self.cfg.window_size;
        let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
        let xp = reflect_pad_nchw(g, x, hp, wp);

        let shallow_full = self.conv_first.forward(g, xp);
        let mut t = g.permute(shallow_full, &[0, 2, 3, 1]);
        for grp in &self.groups {
            let res = t;
            for b in &grp.blocks {
                t = b.forward(g, t);
            }
            let u = grp.conv.forward(g, g.permute(t, &[0, 3, 1, 2]));
            t = g.add(g.permute(u, &[0, 2, 3, 1]), res);
        }
        let deep_full = g.permute(self.norm.forward(g, t), &[0, 3, 1, 2]);
        let body = g.add(self.conv_after_body.forward(g, deep_full), shallow_full);

        let r = self.cfg.scale;
        let up = self.upsample.forward(g, body);
        let (ps_idx, ps_shape) = layout::pixel_shuffle(&g.shape(up), r);
        let up = crop_nchw(g, g.gather(up, ps_idx.into(), &ps_shape), h * r, w * r);
        let base = g.resample(
            x,
            resample_weights(h, h * r, ResampleMethod::Bicubic),
            resample_weights(w, w * r, ResampleMethod::Bicubic),
            (h * r, w * r),
        );
        debug_assert_eq!(g.shape(up), vec![n, self.cfg.in_channels, h * r, w * r]);
        SrGraphOut {
            image: g.add(up, base),
            shallow: crop_nchw(g, shallow_full, h, w),
            deep: crop_nchw(g, deep_full, h, w),
        }
    }
}

/// A backbone together with its parameters.
pub struct SrModel<S: Scalar> {
    pub store: ParamStore<S>,
    pub net: SrBackbone,
}

/// One feature tap of one image, planar `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SrOutput {
    pub image: ImageU8,
    pub shallow: FeatureMap,
    pub deep: FeatureMap,
}

impl<S: Scalar> SrModel<S> {
    pub fn new(cfg: &SrBackboneConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = SrBackbone::new(cfg, &mut store, "", seed)?;
        Ok(SrModel { store, net })
    }

    pub fn config(&self) -> &SrBackboneConfig {
        self.net.config()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "sr_backbone".into());
        meta.insert("config".into(), serde_json::to_string(self.config())?);
        checkpoint::save(path, &self.store, &meta)?;
        Ok(())
    }

    /// Rebuilds the architecture from the checkpoint's config and loads its weights.
    pub fn load(path: &Path) -> Result<Self> {
        let (src, meta) = checkpoint::load::<S>(path).map_err(|e| Error::load(path, e.to_string()))?;
        let cfg_text = meta.get("config").ok_or_else(|| Error::load(path, "checkpoint has no config"))?;
        let cfg: SrBackboneConfig = serde_json::from_str(cfg_text).map_err(|e| Error::load(path, e.to_string()))?;
        let mut m = SrModel::new(&cfg, 0)?;
        m.store.load_from(&src, false).map_err(|e| Error::load(path, e.to_string()))?;
        Ok(m)
    }

    /// Imports weights from any safetensors file. `names` maps file tensor
    /// names to parameter names; tensors absent from the map keep their own
    /// name, and names matching no parameter are ignored. Returns how many
    /// parameters were filled.
    pub fn import_weights(&mut self, path: &Path, names: &BTreeMap<String, String>) -> Result<usize> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
        let tensors = checkpoint::read_foreign(&bytes).map_err(|e| Error::load(path, e.to_string()))?;
        let mut filled = 0;
        for (name, shape, values) in tensors {
            let target = names.get(&name).cloned().unwrap_or(name.clone());
            let Some(id) = self.store.id(&target) else { continue };
            let p = self.store.get_mut(id);
            if p.shape != shape {
                return Err(Error::load(path, format!("tensor {name} has shape {shape:?}, parameter {target} is {:?}", p.shape)));
            }
            p.value = values.into_iter().map(S::of).collect();
            filled += 1;
        }
        Ok(filled)
    }
}

fn to_feature<S: Scalar>(vals: &[S], shape: &[usize], i: usize) -> FeatureMap {
    let per = shape[1] * shape[2] * shape[3];
    FeatureMap {
        channels: shape[1],
        height: shape[2],
        width: shape[3],
        data: vals[i * per..(i + 1) * per].iter().map(|v| v.as_f64() as f32).collect(),
    }
}

/// Inference on a batch of same-sized images.
pub fn sr_forward_batch<S: Scalar>(model: &SrModel<S>, images: &[&ImageU8]) -> Result<Vec<SrOutput>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    for img in images {
        img.check_pipeline_size()?;
        ensure!(
            img.channels() == model.config().in_channels,
            "sr model expects {} channels, image has {}",
            model.config().in_channels,
            img.channels()
        );
    }
    let (x, shape) = batch_chw::<S>(images)?;
    let g = Graph::new(&model.store);
    let xin = g.input(x, &shape);
    let out = model.net.forward(&g, xin);
    let (img_shape, shallow_shape, deep_shape) = (g.shape(out.image), g.shape(out.shallow), g.shape(out.deep));
    let (iv, sv, dv) = (g.to_vec(out.image), g.to_vec(out.shallow), g.to_vec(out.deep));
    let per = img_shape[1] * img_shape[2] * img_shape[3];
    (0..images.len())
        .map(|i| {
            Ok(SrOutput {
                image: ImageU8::from_chw(&iv[i * per..(i + 1) * per], img_shape[1], img_shape[2], img_shape[3])?,
                shallow: to_feature(&sv, &shallow_shape, i),
                deep: to_feature(&dv, &deep_shape, i),
            })
        })
        .collect()
}

pub fn sr_forward<S: Scalar>(model: &SrModel<S>, image: &ImageU8) -> Result<SrOutput> {
    Ok(sr_forward_batch(model, &[image])?.remove(0))
}

/// Upscales many images, batching same-sized runs.
pub fn sr_upscale_all<S: Scalar>(model: &SrModel<S>, images: &[ImageU8], batch: usize) -> Result<Vec<ImageU8>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&ImageU8> = chunk.iter().collect();
        out.extend(sr_forward_batch(model, &refs)?.into_iter().map(|o| o.image));
    }
    Ok(out)
}

/// Plain resampling by an integer factor.
pub fn interpolate_upscale(image: &ImageU8, scale: usize, method: ResampleMethod) -> Result<ImageU8> {
    ensure!(scale >= 1, "upscale factor must be at least 1");
    resize(image, image.height() * scale, image.width() * scale, method)
}

/// Super-resolves, then resizes to `final_size` square (area averaging when shrinking).
pub fn sr_then_downsample<S: Scalar>(model: &SrModel<S>, image: &ImageU8, final_size: usize) -> Result<ImageU8> {
    ensure!(final_size >= 1, "final size must be positive");
    let up = sr_forward(model, image)?.image;
    let method = if final_size < up.height() { ResampleMethod::Area } else { ResampleMethod::Bicubic };
    resize(&up, final_size, final_size, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::psnr_db;

    fn textured(h: usize, w: usize) -> ImageU8 {
        let d = (0..h * w * 3).map(|i| ((i * 37 + (i / 7) * 11) % 251) as u8).collect();
        ImageU8::new(h, w, 3, d).unwrap()
    }

    fn tiny() -> SrBackboneConfig {
        SrBackboneConfig { embed_dim: 8, num_groups: 1, blocks_per_group: 2, window_size: 4, num_heads: 2, ..Default::default() }
    }

    #[test]
    fn identity_init_is_bicubic() {
        let m = SrModel::<f32>::new(&tiny(), 1).unwrap();
        let img = textured(12, 10);
        let out = sr_forward(&m, &img).unwrap();
        let bic = interpolate_upscale(&img, 2, ResampleMethod::Bicubic).unwrap();
        assert!(psnr_db(&out.image, &bic).unwrap() >= 30.0);
        assert_eq!((out.shallow.height, out.shallow.width, out.shallow.channels), (12, 10, 8));
        assert_eq!((out.deep.height, out.deep.width), (12, 10));
    }

    #[test]
    fn output_shapes_for_both_scales() {
        for scale in [2, 4] {
            let cfg = SrBackboneConfig { scale, init: SrInit::Random, ..tiny() };
            let m = SrModel::<f32>::new(&cfg, 2).unwrap();
            let out = sr_forward(&m, &textured(9, 8)).unwrap();
            assert_eq!((out.image.height(), out.image.width()), (9 * scale, 8 * scale));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(SrModel::<f32>::new(&SrBackboneConfig { scale: 3, ..tiny() }, 0).is_err());
        assert!(SrModel::<f32>::new(&SrBackboneConfig { embed_dim: 9, ..tiny() }, 0).is_err());
        let m = SrModel::<f32>::new(&tiny(), 0).unwrap();
        assert!(sr_forward(&m, &textured(4, 4)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_import() {
        let d = tempfile::tempdir().unwrap();
        let cfg = SrBackboneConfig { init: SrInit::Random, ..tiny() };
        let m = SrModel::<f32>::new(&cfg, 5).unwrap();
        let p = d.path().join("sr.safetensors");
        m.save(&p).unwrap();
        let back = SrModel::<f32>::load(&p).unwrap();
        assert_eq!(back.store.content_hash(), m.store.content_hash());

        let mut other = SrModel::<f32>::new(&cfg, 6).unwrap();
        assert_ne!(other.store.content_hash(), m.store.content_hash());
        let filled = other.import_weights(&p, &BTreeMap::new()).unwrap();
        assert_eq!(filled, m.store.len());
        assert_eq!(other.store.content_hash(), m.store.content_hash());
    }

    #[test]
    fn sr_then_downsample_size() {
        let m = SrModel::<f32>::new(&tiny(), 1).unwrap();
        let out = sr_then_downsample(&m, &textured(16, 16), 24).unwrap();
        assert_eq!((out.height(), out.width()), (24, 24));
    }
}
