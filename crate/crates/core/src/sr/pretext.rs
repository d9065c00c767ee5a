//! Self-supervised restoration training on (degraded low-res, clean) pairs.

use gazesr_tensor::{AdamW, AdamWConfig, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SrModel;
use crate::degrade::{complex_degrade, sample_recipe, DegradationRanges};
use crate::error::{ensure, Error, Result};
use crate::image::{batch_chw, ImageU8};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub degradation: DegradationRanges,
    /// Steps between evaluations of the fixed probe batch.
    pub eval_every: usize,
    /// Number of images in the fixed probe batch.
    pub probe_size: usize,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            steps: 500,
            batch_size: 4,
            lr: 5e-4,
            weight_decay: 0.0,
            seed: 0,
            degradation: DegradationRanges::default(),
            eval_every: 25,
            probe_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextReport {
    /// Mini-batch L1 loss of every step.
    pub step_losses: Vec<f64>,
    /// `(step, loss)` on the fixed probe batch, starting before the first update.
    pub curve: Vec<(usize, f64)>,
}

impl PretextReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,probe_l1\n");
        for (step, l) in &self.curve {
            s.push_str(&format!("{step},{l}\n"));
        }
        s
    }
}

/// Degraded low-resolution input for `hr`, deterministic in `(seed, key)`.
pub fn degraded_pair_input(
    hr: &ImageU8,
    ranges: &DegradationRanges,
    scale: usize,
    seed: u64,
    key: &str,
) -> Result<ImageU8> {
    ensure!(
        hr.height() % scale == 0 && hr.width() % scale == 0,
        "image {}x{} is not divisible by the sr scale {scale}",
        hr.height(),
        hr.width()
    );
    let recipe = sample_recipe(ranges, derive_seed(seed, &["pretext", key]))?;
    complex_degrade(hr, &recipe, Some((hr.height() / scale, hr.width() / scale)))
}

fn l1_step(model: &SrModel<f32>, lr: &[&ImageU8], hr: &[&ImageU8], grad: bool) -> Result<(f64, Option<gazesr_tensor::Gradients<f32>>)> {
    let (x, shape) = batch_chw::<f32>(lr)?;
    let (y, _) = batch_chw::<f32>(hr)?;
    let g = Graph::new(&model.store);
    let xv = g.input(x, &shape);
    let out = model.net.forward(&g, xv);
    let loss = g.l1_loss(out.image, y);
    let value = g.scalar(loss) as f64;
    Ok((value, grad.then(|| g.backward(loss))))
}

/// Trains `model` in place to restore clean images from degraded, downscaled copies.
///
/// Pairs are re-degraded every step with seeds derived from `cfg.seed`, the
/// step and the slot, so runs are reproducible. The returned curve is the loss
/// on a fixed probe batch and therefore constant when `lr = 0`.
pub fn train_sr_pretext(model: &mut SrModel<f32>, images: &[ImageU8], cfg: &PretextConfig) -> Result<PretextReport> {
    ensure!(!images.is_empty(), "pretext training needs at least one image");
    ensure!(cfg.batch_size >= 1 && cfg.eval_every >= 1, "batch_size and eval_every must be positive");
    cfg.degradation.validate()?;
    let scale = model.config().scale;
    let probe_n = cfg.probe_size.clamp(1, images.len());
    let probe_lr: Vec<ImageU8> = images[..probe_n]
        .iter()
        .enumerate()
        .map(|(i, im)| degraded_pair_input(im, &cfg.degradation, scale, cfg.seed, &format!("probe{i}")))
        .collect::<Result<_>>()?;
    let probe_hr: Vec<&ImageU8> = images[..probe_n].iter().collect();
    let probe_lr_refs: Vec<&ImageU8> = probe_lr.iter().collect();

    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["pretext-batches"]));
    let mut report = PretextReport { step_losses: Vec::with_capacity(cfg.steps), curve: Vec::new() };
    report.curve.push((0, l1_step(model, &probe_lr_refs, &probe_hr, false)?.0));

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..images.len())).collect();
        let lr_imgs: Vec<ImageU8> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| degraded_pair_input(&images[i], &cfg.degradation, scale, cfg.seed, &format!("{step}/{k}")))
            .collect::<Result<_>>()?;
        let hr: Vec<&ImageU8> = idx.iter().map(|&i| &images[i]).collect();
        let lr_refs: Vec<&ImageU8> = lr_imgs.iter().collect();
        let (loss, grads) = l1_step(model, &lr_refs, &hr, true)?;
        if !loss.is_finite() {
            return Err(Error::Training { step, msg: format!("non-finite loss {loss}") });
        }
        report.step_losses.push(loss);
        model.store.zero_grad();
        grads.expect("gradients requested").accumulate_into(&mut model.store);
        opt.step(&mut model.store);
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let probe = l1_step(model, &probe_lr_refs, &probe_hr, false)?.0;
            if !probe.is_finite() {
                return Err(Error::Training { step, msg: format!("non-finite probe loss {probe}") });
            }
            report.curve.push((step + 1, probe));
        }
    }
    Ok(report)
}
