//! SR backbone feeding a ResNet18-style regressor, with the backbone's
//! shallow and deep feature maps fused into one trunk stage.

use gazesr_tensor::nn::Conv2d;
use gazesr_tensor::{resample_weights, Graph, ParamStore, ResampleMethod, Scalar, Var};
use rand::Rng;

use super::cnn::{resnet_stage_input, ResNet18};
use super::{FusionMode, SuperVisionConfig};
use crate::sr::SrBackbone;

pub const SR_PREFIX: &str = "sr.";
pub const GAZE_PREFIX: &str = "gaze.";

pub(crate) struct Fusion {
    pub(crate) shallow: Conv2d,
    pub(crate) deep: Conv2d,
    merge: Option<Conv2d>,
}

pub(crate) struct SuperVision {
    pub(crate) sr: SrBackbone,
    trunk: ResNet18,
    pub(crate) fusion: Option<Fusion>,
    stage: usize,
    stage_side: usize,
    head_size: usize,
}

/// Bilinear when enlarging, area averaging when shrinking.
pub(crate) fn resize_var<S: Scalar>(g: &Graph<'_, S>, x: Var, h: usize, w: usize) -> Var {
    let s = g.shape(x);
    if (s[2], s[3]) == (h, w) {
        return x;
    }
    let pick = |from: usize, to: usize| if to > from { ResampleMethod::Bilinear } else { ResampleMethod::Area };
    g.resample(
        x,
        resample_weights(s[2], h, pick(s[2], h)),
        resample_weights(s[3], w, pick(s[3], w)),
        (h, w),
    )
}

impl SuperVision {
    /// The projections are registered after every other parameter so that a
    /// build without fusion draws identical weights for the shared layers.
    pub(crate) fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        cfg: &SuperVisionConfig,
        sr_seed: u64,
        rng: &mut R,
    ) -> crate::Result<Self> {
        let sr = SrBackbone::new(&cfg.sr, ps, SR_PREFIX, sr_seed)?;
        let trunk = ResNet18::new(ps, GAZE_PREFIX, &cfg.head, rng);
        let (c, side) = resnet_stage_input(cfg.head.input_size, cfg.head.width, cfg.fusion_stage);
        let d = cfg.sr.embed_dim;
        let fusion = cfg.fusion.then(|| {
            let f = Fusion {
                shallow: Conv2d::pointwise(ps, "fusion.shallow", d, c, false, rng),
                deep: Conv2d::pointwise(ps, "fusion.deep", d, c, false, rng),
                merge: (cfg.fusion_mode == FusionMode::ProjectConcat)
                    .then(|| Conv2d::pointwise(ps, "fusion.merge", 3 * c, c, false, rng)),
            };
            // Zeroed projections (and a merge that passes the trunk channels
            // through) make the untrained fused model equal the fusion-free one.
            f.shallow.zero(ps);
            f.deep.zero(ps);
            if let Some(m) = &f.merge {
                let w = &mut ps.get_mut(m.weight).value;
                for o in 0..c {
                    for i in 0..c {
                        w[o * 3 * c + i] = if o == i { S::one() } else { S::zero() };
                    }
                }
            }
            f
        });
        Ok(SuperVision { sr, trunk, fusion, stage: cfg.fusion_stage, stage_side: side, head_size: cfg.head.input_size })
    }

    pub(crate) fn trace_shapes<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Vec<(&'static str, Vec<usize>)> {
        let out = self.sr.forward(g, x);
        let img = resize_var(g, out.image, self.head_size, self.head_size);
        vec![("sr_output", g.shape(out.image)), ("trunk_input", g.shape(img))]
    }

    pub(crate) fn forward<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Var {
        let out = self.sr.forward(g, x);
        let img = resize_var(g, out.image, self.head_size, self.head_size);
        let mut h = self.trunk.stem(g, img);
        for k in 1..=4 {
            if k == self.stage {
                if let Some(f) = &self.fusion {
                    let side = self.stage_side;
                    let ps = resize_var(g, f.shallow.forward(g, out.shallow), side, side);
                    let pd = resize_var(g, f.deep.forward(g, out.deep), side, side);
                    h = match &f.merge {
                        None => g.add(g.add(h, ps), pd),
                        Some(m) => m.forward(g, g.concat_channels(&[h, ps, pd])),
                    };
                }
            }
            h = self.trunk.stage(g, k, h);
        }
        self.trunk.head(g, h)
    }
}
