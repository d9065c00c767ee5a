//! Gaze regressors: a compact CNN, a ResNet18-style network, and SuperVision,
//! which runs an SR backbone in front of the ResNet18-style network and fuses
//! the backbone's feature taps into one of its stages.
//!
//! Every model maps `[N, 3, S, S]` images in [0, 1] to raw `(pitch, yaw)`
//! radians; [`predict_gaze`] clamps to the valid angle ranges.

mod cnn;
mod supervision;

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::path::Path;

use gazesr_tensor::{checkpoint, Graph, ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::GazeAngles;
use crate::image::{batch_chw, ImageU8, MIN_PIPELINE_SIDE};
use crate::sr::{SrBackboneConfig, SrModel};
use crate::util::derive_seed;
use cnn::{ResNet18, SimpleCnn};
use supervision::SuperVision;

pub use supervision::{GAZE_PREFIX, SR_PREFIX};

/// Square input sizes accepted by the regressors.
pub const INPUT_SIZES: [usize; 4] = [56, 112, 224, 448];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorKind {
    SimpleCnn,
    Resnet18,
    Supervision,
}

impl RegressorKind {
    pub fn name(self) -> &'static str {
        match self {
            RegressorKind::SimpleCnn => "simple_cnn",
            RegressorKind::Resnet18 => "resnet18",
            RegressorKind::Supervision => "supervision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GazeRegressorConfig {
    pub kind: RegressorKind,
    pub input_size: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    /// Channels of the first stage; later stages double it.
    pub width: usize,
}

impl Default for GazeRegressorConfig {
    fn default() -> Self {
        GazeRegressorConfig { kind: RegressorKind::Resnet18, input_size: 224, head_hidden: 128, dropout: 0.0, width: 64 }
    }
}

impl GazeRegressorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            INPUT_SIZES.contains(&self.input_size),
            "gaze model input_size must be one of {INPUT_SIZES:?}, got {}",
            self.input_size
        );
        ensure!(self.head_hidden >= 1 && self.width >= 1, "head_hidden and width must be positive");
        ensure!((0.0..1.0).contains(&self.dropout), "dropout must be in [0, 1), got {}", self.dropout);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Projected taps are added to the stage input.
    ProjectAdd,
    /// Stage input and projected taps are concatenated and mixed back by a 1x1 convolution.
    ProjectConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuperVisionConfig {
    pub sr: SrBackboneConfig,
    /// Side of the low-resolution input images.
    pub lr_size: usize,
    pub freeze_sr: bool,
    /// Trunk stage (1 to 4) whose input receives the taps.
    pub fusion_stage: usize,
    pub fusion_mode: FusionMode,
    /// Ablation switch; `false` gives the plain SR-then-regressor pipeline.
    pub fusion: bool,
    pub head: GazeRegressorConfig,
}

impl Default for SuperVisionConfig {
    fn default() -> Self {
        SuperVisionConfig {
            sr: SrBackboneConfig { scale: 4, ..SrBackboneConfig::default() },
            lr_size: 112,
            freeze_sr: false,
            fusion_stage: 3,
            fusion_mode: FusionMode::ProjectAdd,
            fusion: true,
            head: GazeRegressorConfig::default(),
        }
    }
}

impl SuperVisionConfig {
    pub fn validate(&self) -> Result<()> {
        self.sr.validate()?;
        self.head.validate()?;
        ensure!(self.head.kind == RegressorKind::Resnet18, "supervision head must be resnet18");
        ensure!((1..=4).contains(&self.fusion_stage), "fusion_stage must be 1..=4, got {}", self.fusion_stage);
        ensure!(self.lr_size >= MIN_PIPELINE_SIDE, "lr_size must be at least {MIN_PIPELINE_SIDE}");
        ensure!(
            self.sr.scale * self.lr_size >= self.head.input_size,
            "sr output {} (scale {} x lr_size {}) is smaller than the head input {}",
            self.sr.scale * self.lr_size,
            self.sr.scale,
            self.lr_size,
            self.head.input_size
        );
        Ok(())
    }
}

/// Architecture description stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Regressor(GazeRegressorConfig),
    Supervision(SuperVisionConfig),
}

enum Arch {
    Simple(SimpleCnn),
    Resnet(ResNet18),
    Super(SuperVision),
}

/// A gaze model together with its parameters.
pub struct GazeRegressor<S: Scalar> {
    pub store: ParamStore<S>,
    arch: Arch,
    spec: ModelSpec,
    seed: u64,
}

/// Builds a `simple_cnn` or `resnet18` regressor.
pub fn build_regressor<S: Scalar>(cfg: &GazeRegressorConfig, seed: u64) -> Result<GazeRegressor<S>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = match cfg.kind {
        RegressorKind::SimpleCnn => Arch::Simple(SimpleCnn::new(&mut store, cfg, &mut rng)),
        RegressorKind::Resnet18 => Arch::Resnet(ResNet18::new(&mut store, "", cfg, &mut rng)),
        RegressorKind::Supervision => {
            return Err(Error::domain("kind supervision needs a SuperVisionConfig (use build_supervision)"))
        }
    };
    Ok(GazeRegressor { store, arch, spec: ModelSpec::Regressor(cfg.clone()), seed })
}

/// Builds the SR-fused regressor. Size incompatibilities are reported here.
pub fn build_supervision<S: Scalar>(cfg: &SuperVisionConfig, seed: u64) -> Result<GazeRegressor<S>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["gaze"]));
    let net = SuperVision::new(&mut store, cfg, derive_seed(seed, &["sr"]), &mut rng)?;
    if cfg.freeze_sr {
        store.set_trainable_prefix(SR_PREFIX, false);
    }
    Ok(GazeRegressor { store, arch: Arch::Super(net), spec: ModelSpec::Supervision(cfg.clone()), seed })
}

/// Builds whichever architecture `spec` describes.
pub fn build_model<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<GazeRegressor<S>> {
    match spec {
        ModelSpec::Regressor(c) => build_regressor(c, seed),
        ModelSpec::Supervision(c) => build_supervision(c, seed),
    }
}

impl<S: Scalar> GazeRegressor<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> RegressorKind {
        match &self.spec {
            ModelSpec::Regressor(c) => c.kind,
            ModelSpec::Supervision(_) => RegressorKind::Supervision,
        }
    }

    /// Side of the images the model consumes (the low-resolution side for SuperVision).
    pub fn input_size(&self) -> usize {
        match &self.spec {
            ModelSpec::Regressor(c) => c.input_size,
            ModelSpec::Supervision(c) => c.lr_size,
        }
    }

    /// `[N, 3, S, S] -> [N, 2]`.
    pub fn forward(&self, g: &Graph<'_, S>, x: Var) -> Var {
        match &self.arch {
            Arch::Simple(n) => n.forward(g, x),
            Arch::Resnet(n) => n.forward(g, x),
            Arch::Super(n) => n.forward(g, x),
        }
    }

    /// Shapes at each hand-off of the forward pass for a batch of `n`: the
    /// input, for SuperVision the SR output and the resized trunk input, then
    /// the prediction.
    pub fn trace_shapes(&self, n: usize) -> Vec<(&'static str, Vec<usize>)> {
        let g = Graph::new(&self.store);
        let s = self.input_size();
        let x = g.input(vec![S::zero(); n * 3 * s * s], &[n, 3, s, s]);
        let mut shapes = vec![("input", g.shape(x))];
        if let Arch::Super(net) = &self.arch {
            shapes.extend(net.trace_shapes(&g, x));
        }
        shapes.push(("output", g.shape(self.forward(&g, x))));
        shapes
    }

    /// Prefix of the SR backbone's parameters, for SuperVision models.
    pub fn sr_prefix(&self) -> Option<&'static str> {
        matches!(self.arch, Arch::Super(_)).then_some(SR_PREFIX)
    }

    /// Name of the SR backbone's first parameter, for SuperVision models.
    pub fn sr_first_param(&self) -> Option<String> {
        self.sr_prefix().map(|p| format!("{p}conv_first.weight"))
    }

    /// Copies a standalone SR model's weights into the embedded backbone.
    pub fn load_sr_weights(&mut self, sr: &SrModel<S>) -> Result<usize> {
        ensure!(self.sr_prefix().is_some(), "only supervision models embed an sr backbone");
        if let ModelSpec::Supervision(c) = &self.spec {
            let (mut a, mut b) = (c.sr.clone(), sr.config().clone());
            a.init = b.init;
            b.init = a.init;
            ensure!(a == b, "sr checkpoint config {b:?} does not match the embedded backbone {a:?}");
        }
        let mut n = 0;
        for (_, p) in sr.store.iter() {
            let name = format!("{SR_PREFIX}{}", p.name);
            let id = self.store.id(&name).ok_or_else(|| Error::domain(format!("no parameter {name}")))?;
            let dst = self.store.get_mut(id);
            ensure!(dst.shape == p.shape, "shape mismatch for {name}");
            dst.value.clone_from(&p.value);
            n += 1;
        }
        Ok(n)
    }

    /// Zeroes both tap projections; with additive fusion the model then
    /// computes exactly what the fusion-free build computes.
    pub fn zero_fusion(&mut self) -> Result<()> {
        match &self.arch {
            Arch::Super(SuperVision { fusion: Some(f), .. }) => {
                f.shallow.zero(&mut self.store);
                f.deep.zero(&mut self.store);
                Ok(())
            }
            _ => Err(Error::domain("model has no fusion projections")),
        }
    }

    /// Loads externally pretrained weights by name; names absent from this
    /// model are skipped. Returns how many tensors were filled.
    pub fn load_pretrained(&mut self, path: &Path) -> Result<usize> {
        let (src, _) = checkpoint::load::<S>(path).map_err(|e| Error::load(path, e.to_string()))?;
        self.store.load_from(&src, true).map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "gaze_regressor".into());
        meta.insert("spec".into(), serde_json::to_string(&self.spec)?);
        meta.insert("seed".into(), self.seed.to_string());
        checkpoint::save(path, &self.store, &meta)?;
        Ok(())
    }

    /// Rebuilds the architecture recorded in the checkpoint and loads its weights.
    pub fn load(path: &Path) -> Result<Self> {
        let (src, meta) = checkpoint::load::<S>(path).map_err(|e| Error::load(path, e.to_string()))?;
        let spec_text = meta.get("spec").ok_or_else(|| Error::load(path, "checkpoint has no model spec"))?;
        let spec: ModelSpec = serde_json::from_str(spec_text).map_err(|e| Error::load(path, e.to_string()))?;
        let mut m = build_model(&spec, 0)?;
        m.store.load_from(&src, false).map_err(|e| Error::load(path, e.to_string()))?;
        Ok(m)
    }
}

/// Mean absolute error over both angle components of an `[N, 2]` prediction.
pub fn gaze_loss<S: Scalar>(g: &Graph<'_, S>, pred: Var, gt: &[GazeAngles<f64>]) -> Result<Var> {
    let shape = g.shape(pred);
    ensure!(
        shape.len() == 2 && shape[1] == 2 && shape[0] == gt.len(),
        "prediction shape {shape:?} does not match {} labels",
        gt.len()
    );
    ensure!(!gt.is_empty(), "gaze_loss on an empty batch");
    let target = gt.iter().flat_map(|a| [S::of(a.pitch), S::of(a.yaw)]).collect();
    Ok(g.l1_loss(pred, target))
}

/// Inference-mode predictions, clamped to the valid angle ranges.
pub fn predict_gaze<S: Scalar, I: Borrow<ImageU8>>(model: &GazeRegressor<S>, images: &[I]) -> Result<Vec<GazeAngles<f64>>> {
    const BATCH: usize = 16;
    let size = model.input_size();
    for img in images {
        let img = img.borrow();
        ensure!(
            img.height() == size && img.width() == size && img.channels() == 3,
            "model expects {size}x{size} rgb images, got {}x{}x{}",
            img.height(),
            img.width(),
            img.channels()
        );
    }
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(BATCH) {
        let refs: Vec<&ImageU8> = chunk.iter().map(|i| i.borrow()).collect();
        let (x, shape) = batch_chw::<S>(&refs)?;
        let g = Graph::new(&model.store);
        let xv = g.input(x, &shape);
        let y = g.to_vec(model.forward(&g, xv));
        out.extend(
            y.chunks(2).map(|p| GazeAngles { pitch: p[0].as_f64(), yaw: p[1].as_f64() }.clamped()),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sr::SrInit;
    use gazesr_tensor::{AdamW, AdamWConfig};

    fn small(kind: RegressorKind, size: usize) -> GazeRegressorConfig {
        GazeRegressorConfig { kind, input_size: size, head_hidden: 16, dropout: 0.0, width: 4 }
    }

    fn tiny_supervision(fusion: bool) -> SuperVisionConfig {
        SuperVisionConfig {
            sr: SrBackboneConfig {
                scale: 2,
                embed_dim: 8,
                num_groups: 1,
                blocks_per_group: 1,
                window_size: 4,
                init: SrInit::Random,
                ..Default::default()
            },
            lr_size: 28,
            fusion,
            head: small(RegressorKind::Resnet18, 56),
            ..Default::default()
        }
    }

    fn noise_batch(n: usize, size: usize, seed: u64) -> Vec<f32> {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n * 3 * size * size).map(|_| r.random::<f32>()).collect()
    }

    fn run(m: &GazeRegressor<f32>, x: &[f32], n: usize) -> Vec<f32> {
        let s = m.input_size();
        let g = Graph::new(&m.store);
        let xv = g.input(x.to_vec(), &[n, 3, s, s]);
        g.to_vec(m.forward(&g, xv))
    }

    #[test]
    fn output_shape_is_n_by_2() {
        for (kind, size) in [(RegressorKind::SimpleCnn, 56), (RegressorKind::Resnet18, 224), (RegressorKind::SimpleCnn, 112)] {
            let m = build_regressor::<f32>(&small(kind, size), 1).unwrap();
            let g = Graph::new(&m.store);
            let x = g.input(noise_batch(2, size, 0), &[2, 3, size, size]);
            assert_eq!(g.shape(m.forward(&g, x)), vec![2, 2]);
        }
    }

    #[test]
    fn invalid_configs_are_domain_errors() {
        assert!(matches!(build_regressor::<f32>(&small(RegressorKind::SimpleCnn, 64), 0), Err(Error::Domain(_))));
        assert!(build_regressor::<f32>(&small(RegressorKind::Supervision, 56), 0).is_err());
        let mut c = tiny_supervision(true);
        c.lr_size = 16;
        assert!(matches!(build_supervision::<f32>(&c, 0), Err(Error::Domain(_))));
        let mut c = tiny_supervision(true);
        c.head.kind = RegressorKind::SimpleCnn;
        assert!(build_supervision::<f32>(&c, 0).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let c = small(RegressorKind::Resnet18, 56);
        let a = build_regressor::<f32>(&c, 9).unwrap();
        let b = build_regressor::<f32>(&c, 9).unwrap();
        let d = build_regressor::<f32>(&c, 10).unwrap();
        assert_eq!(a.store.content_hash(), b.store.content_hash());
        assert_ne!(a.store.content_hash(), d.store.content_hash());
    }

    #[test]
    fn gaze_loss_values_and_shape_errors() {
        let ps = ParamStore::<f64>::new();
        let g = Graph::new(&ps);
        let gt = vec![GazeAngles { pitch: 0.1, yaw: -0.2 }, GazeAngles { pitch: -0.3, yaw: 0.05 }];
        let flat: Vec<f64> = gt.iter().flat_map(|a| [a.pitch, a.yaw]).collect();
        let exact = g.input(flat.clone(), &[2, 2]);
        assert_eq!(g.scalar(gaze_loss(&g, exact, &gt).unwrap()), 0.0);
        let shifted = g.input(flat.iter().map(|v| v + 0.1).collect(), &[2, 2]);
        assert!((g.scalar(gaze_loss(&g, shifted, &gt).unwrap()) - 0.1).abs() < 1e-12);
        let bad = g.input(vec![0.0; 6], &[3, 2]);
        assert!(matches!(gaze_loss(&g, bad, &gt), Err(Error::Domain(_))));
    }

    #[test]
    fn gaze_loss_gradient_matches_finite_differences() {
        let gt = vec![
            GazeAngles { pitch: 0.1, yaw: -0.2 },
            GazeAngles { pitch: -0.3, yaw: 0.05 },
            GazeAngles { pitch: 0.0, yaw: 0.4 },
        ];
        let pred = vec![0.3, -0.25, -0.1, 0.5, -0.2, 0.1];
        let ps = ParamStore::<f64>::new();
        let loss_at = |p: &[f64]| {
            let g = Graph::new(&ps);
            let v = g.input(p.to_vec(), &[3, 2]);
            g.scalar(gaze_loss(&g, v, &gt).unwrap())
        };
        let g = Graph::new(&ps);
        let v = g.input_with_grad(pred.clone(), &[3, 2]);
        let grads = g.backward(gaze_loss(&g, v, &gt).unwrap());
        let analytic = grads.input(v).unwrap();
        let h = 1e-6;
        for i in 0..pred.len() {
            let (mut up, mut dn) = (pred.clone(), pred.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (loss_at(&up) - loss_at(&dn)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-8, "component {i}: fd {fd} vs {}", analytic[i]);
            let target = if i % 2 == 0 { gt[i / 2].pitch } else { gt[i / 2].yaw };
            let expected = (pred[i] - target).signum() / (2.0 * 3.0);
            assert!((fd - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn predictions_are_clamped_deterministic_and_batch_independent() {
        let m = build_regressor::<f32>(&small(RegressorKind::SimpleCnn, 56), 4).unwrap();
        let mk = |k: u8| {
            let d = (0..56 * 56 * 3).map(|i| ((i * 7 + k as usize * 31) % 251) as u8).collect();
            ImageU8::new(56, 56, 3, d).unwrap()
        };
        let imgs = vec![mk(0), mk(1), mk(0)];
        let p = predict_gaze(&m, &imgs).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], p[2]);
        assert!(p.iter().all(|a| a.in_range()));
        assert_eq!(predict_gaze(&m, &imgs[1..2]).unwrap()[0], p[1]);
        let wrong = ImageU8::filled(112, 112, 3, 0).unwrap();
        assert!(matches!(predict_gaze(&m, &[wrong]), Err(Error::Domain(_))));
    }

    #[test]
    fn fusion_ablation_wiring() {
        let mut on = build_supervision::<f32>(&tiny_supervision(true), 5).unwrap();
        let mut off = build_supervision::<f32>(&tiny_supervision(false), 5).unwrap();
        let x = noise_batch(2, 28, 1);
        // untrained, the projections are zero and both builds agree
        assert_eq!(run(&on, &x, 2), run(&off, &x, 2));
        // the ablation's parameters are exactly the fused model's minus the projections
        for (_, p) in off.store.iter() {
            let q = on.store.get(on.store.id(&p.name).unwrap());
            assert_eq!(p.value, q.value, "{}", p.name);
        }
        one_step(&mut on, &x, 2);
        let shared: Vec<(String, Vec<f32>)> = off.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        for (name, _) in shared {
            let v = on.store.get(on.store.id(&name).unwrap()).value.clone();
            let id = off.store.id(&name).unwrap();
            off.store.get_mut(id).value = v;
        }
        let (yo, yf) = (run(&on, &x, 2), run(&off, &x, 2));
        assert_ne!(yo, yf);
        let mut zeroed = on;
        zeroed.zero_fusion().unwrap();
        assert_eq!(run(&zeroed, &x, 2), yf);
        assert!(build_regressor::<f32>(&small(RegressorKind::SimpleCnn, 56), 0).unwrap().zero_fusion().is_err());
    }

    #[test]
    fn traced_shapes_follow_the_sr_hand_off() {
        let m = build_supervision::<f32>(&tiny_supervision(true), 0).unwrap();
        let names: Vec<(&str, Vec<usize>)> = m.trace_shapes(2);
        assert_eq!(
            names,
            vec![
                ("input", vec![2, 3, 28, 28]),
                ("sr_output", vec![2, 3, 56, 56]),
                ("trunk_input", vec![2, 3, 56, 56]),
                ("output", vec![2, 2]),
            ]
        );
        let r = build_regressor::<f32>(&small(RegressorKind::SimpleCnn, 56), 0).unwrap();
        assert_eq!(r.trace_shapes(1), vec![("input", vec![1, 3, 56, 56]), ("output", vec![1, 2])]);
    }

    #[test]
    fn concat_fusion_runs() {
        let mut c = tiny_supervision(true);
        c.fusion_mode = FusionMode::ProjectConcat;
        c.fusion_stage = 2;
        let m = build_supervision::<f32>(&c, 5).unwrap();
        let off = build_supervision::<f32>(&SuperVisionConfig { fusion: false, ..c }, 5).unwrap();
        let x = noise_batch(1, 28, 2);
        let y = run(&m, &x, 1);
        assert_eq!(y.len(), 2);
        let yf = run(&off, &x, 1);
        assert!(y.iter().zip(&yf).all(|(a, b)| (a - b).abs() < 1e-5), "{y:?} vs {yf:?}");
    }

    fn one_step(m: &mut GazeRegressor<f32>, x: &[f32], n: usize) {
        let s = m.input_size();
        let gt: Vec<GazeAngles<f64>> = (0..n).map(|i| GazeAngles { pitch: 0.1 * i as f64, yaw: -0.2 }).collect();
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() }, &m.store);
        let grads = {
            let g = Graph::training(&m.store, 0);
            let xv = g.input(x.to_vec(), &[n, 3, s, s]);
            let loss = gaze_loss(&g, m.forward(&g, xv), &gt).unwrap();
            g.backward(loss)
        };
        m.store.zero_grad();
        grads.accumulate_into(&mut m.store);
        opt.step(&mut m.store);
    }

    #[test]
    fn frozen_backbone_stays_fixed() {
        let mut c = tiny_supervision(true);
        c.freeze_sr = true;
        let mut m = build_supervision::<f32>(&c, 2).unwrap();
        let (sr0, head0) = (m.store.content_hash_prefix(SR_PREFIX), m.store.content_hash_prefix(GAZE_PREFIX));
        one_step(&mut m, &noise_batch(2, 28, 3), 2);
        assert_eq!(m.store.content_hash_prefix(SR_PREFIX), sr0);
        assert_ne!(m.store.content_hash_prefix(GAZE_PREFIX), head0);
    }

    #[test]
    fn gradient_reaches_the_backbone() {
        let m = build_supervision::<f32>(&tiny_supervision(true), 2).unwrap();
        let g = Graph::new(&m.store);
        let xv = g.input(noise_batch(2, 28, 4), &[2, 3, 28, 28]);
        let gt = [GazeAngles { pitch: 0.2, yaw: 0.1 }, GazeAngles { pitch: -0.1, yaw: 0.3 }];
        let grads = g.backward(gaze_loss(&g, m.forward(&g, xv), &gt).unwrap());
        let id = m.store.id(&m.sr_first_param().unwrap()).unwrap();
        assert!(grads.param(id).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_supervision::<f32>(&tiny_supervision(true), 8).unwrap();
        let p = dir.path().join("m.safetensors");
        m.save(&p).unwrap();
        let back = GazeRegressor::<f32>::load(&p).unwrap();
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.store.content_hash(), m.store.content_hash());
    }

    #[test]
    fn sr_weights_transfer_into_supervision() {
        let c = tiny_supervision(true);
        let sr = SrModel::<f32>::new(&c.sr, 77).unwrap();
        let mut m = build_supervision::<f32>(&c, 1).unwrap();
        let n = m.load_sr_weights(&sr).unwrap();
        assert_eq!(n, sr.store.len());
        let id = m.store.id("sr.conv_first.weight").unwrap();
        assert_eq!(m.store.get(id).value, sr.store.get(sr.store.id("conv_first.weight").unwrap()).value);
        let other = SrModel::<f32>::new(&SrBackboneConfig { embed_dim: 16, ..c.sr.clone() }, 0).unwrap();
        assert!(m.load_sr_weights(&other).is_err());
    }
}
