//! Turning a dataset into model inputs: low-resolution (optionally degraded)
//! copies, then interpolation, SR, SR plus downsampling or the centring stub.

use std::path::PathBuf;

use gazesr_tensor::ResampleMethod;
use serde::{Deserialize, Serialize};

use super::cache::materialize;
use crate::data::Dataset;
use crate::degrade::{complex_degrade, resize, sample_recipe, DegradationRanges};
use crate::error::{ensure, Error, Result};
use crate::image::ImageU8;
use crate::models::{GazeRegressorConfig, ModelSpec, RegressorKind};
use crate::sr::{center_gaze_stub, sr_upscale_all, SrModel};
use crate::util::{derive_seed, sha256_hex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// The low-resolution images themselves.
    None,
    /// Resampled up by `scale`.
    Interpolate,
    /// Super-resolved by `scale`.
    Sr,
    /// Super-resolved, then shrunk to the model input.
    SrDownsample,
    /// Upscaled with irises redrawn at the eye centre.
    CenterStub,
}

impl Preprocess {
    pub fn name(self) -> &'static str {
        match self {
            Preprocess::None => "none",
            Preprocess::Interpolate => "interpolate",
            Preprocess::Sr => "sr",
            Preprocess::SrDownsample => "sr_downsample",
            Preprocess::CenterStub => "center_stub",
        }
    }

    pub fn needs_sr(self) -> bool {
        matches!(self, Preprocess::Sr | Preprocess::SrDownsample)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSpec {
    pub preprocess: Preprocess,
    /// Side of the low-resolution copies made from the dataset images.
    pub lr_size: usize,
    pub scale: usize,
    pub interpolation: ResampleMethod,
    /// Applied while downsizing to `lr_size`; `None` uses plain area downsampling.
    pub degradation: Option<DegradationRanges>,
    pub model: ModelSpec,
    /// Percentage of each training subject's samples used for training.
    pub fraction: u32,
    /// Externally pretrained gaze weights loaded before training.
    pub pretrained_gaze: Option<PathBuf>,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            preprocess: Preprocess::Interpolate,
            lr_size: 112,
            scale: 2,
            interpolation: ResampleMethod::Bicubic,
            degradation: None,
            model: ModelSpec::Regressor(GazeRegressorConfig::default()),
            fraction: 100,
            pretrained_gaze: None,
        }
    }
}

impl PipelineSpec {
    pub fn model_input_size(&self) -> usize {
        match &self.model {
            ModelSpec::Regressor(c) => c.input_size,
            ModelSpec::Supervision(c) => c.lr_size,
        }
    }

    /// Side of the images this pipeline hands to the model.
    pub fn output_size(&self) -> usize {
        match self.preprocess {
            Preprocess::None => self.lr_size,
            Preprocess::SrDownsample => self.model_input_size(),
            _ => self.lr_size * self.scale,
        }
    }

    /// Short human-readable description, e.g. `sr x2 28->56, degraded, 20%`.
    pub fn describe(&self) -> String {
        let kind = match &self.model {
            ModelSpec::Regressor(c) => c.kind.name(),
            ModelSpec::Supervision(_) => "supervision",
        };
        format!(
            "{} x{} {}->{}, {}, {}%, {kind}",
            self.preprocess.name(),
            self.scale,
            self.lr_size,
            self.output_size(),
            if self.degradation.is_some() { "degraded" } else { "clean" },
            self.fraction
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr_size >= crate::image::MIN_PIPELINE_SIDE, "lr_size {} is too small", self.lr_size);
        ensure!(self.scale >= 1, "scale must be at least 1");
        ensure!((1..=100).contains(&self.fraction), "fraction must be 1..=100 percent, got {}", self.fraction);
        if let Some(d) = &self.degradation {
            d.validate()?;
        }
        match &self.model {
            ModelSpec::Regressor(c) => {
                c.validate()?;
                ensure!(c.kind != RegressorKind::Supervision, "supervision models need a supervision model spec");
            }
            ModelSpec::Supervision(c) => {
                c.validate()?;
                ensure!(self.preprocess == Preprocess::None, "supervision consumes low-resolution images; use preprocess none");
            }
        }
        if self.preprocess == Preprocess::SrDownsample {
            ensure!(
                self.lr_size * self.scale >= self.model_input_size(),
                "sr output {} is smaller than the model input {}",
                self.lr_size * self.scale,
                self.model_input_size()
            );
        }
        ensure!(
            self.output_size() == self.model_input_size(),
            "pipeline produces {}px images but the model expects {}px",
            self.output_size(),
            self.model_input_size()
        );
        Ok(())
    }
}

/// Model-ready images for every dataset sample, in dataset order.
#[derive(Debug, Clone)]
pub struct PreparedInputs {
    pub images: Vec<ImageU8>,
    pub lr_key: String,
    pub key: String,
    pub warnings: Vec<String>,
}

fn lr_key(dataset_hash: &str, spec: &PipelineSpec, seed: u64) -> Result<String> {
    let deg = serde_json::to_string(&spec.degradation)?;
    let seed_part = if spec.degradation.is_some() { seed.to_string() } else { String::new() };
    Ok(format!("lr-{}", &sha256_hex(format!("{dataset_hash}|{}|{deg}|{seed_part}", spec.lr_size).as_bytes())[..24]))
}

/// Builds (or reuses from `cache_dir`) the pipeline's inputs for the whole
/// dataset. Keys depend only on the dataset content, the preprocessing
/// settings, the degradation seed and the SR weights, never on a fold.
pub fn prepare_inputs(
    dataset: &Dataset,
    spec: &PipelineSpec,
    seed: u64,
    cache_dir: &std::path::Path,
    sr: Option<&SrModel<f32>>,
) -> Result<PreparedInputs> {
    spec.validate()?;
    ensure!(
        spec.lr_size <= dataset.image_size,
        "lr_size {} exceeds the dataset image size {}",
        spec.lr_size,
        dataset.image_size
    );
    let n = dataset.samples.len();
    let dataset_hash = dataset.content_hash()?;
    let mut warnings = Vec::new();

    let lr_key = lr_key(&dataset_hash, spec, seed)?;
    let (lr, outcome) = materialize(cache_dir, &lr_key, n, || {
        let hr = dataset.load_images()?;
        hr.iter()
            .zip(&dataset.samples)
            .map(|(img, s)| match &spec.degradation {
                Some(ranges) => {
                    let recipe = sample_recipe(ranges, derive_seed(seed, &["degrade", &s.subject_id, &s.file_name()]))?;
                    complex_degrade(img, &recipe, Some((spec.lr_size, spec.lr_size)))
                }
                None if spec.lr_size == img.height() => Ok(img.clone()),
                None => resize(img, spec.lr_size, spec.lr_size, ResampleMethod::Area),
            })
            .collect()
    })?;
    warnings.extend(outcome.warning(&lr_key));
    if spec.preprocess == Preprocess::None {
        return Ok(PreparedInputs { images: lr, key: lr_key.clone(), lr_key, warnings });
    }

    let sr_hash = match (spec.preprocess.needs_sr(), sr) {
        (true, Some(m)) => {
            ensure!(
                m.config().scale == spec.scale,
                "sr model upscales x{} but the pipeline asks for x{}",
                m.config().scale,
                spec.scale
            );
            m.store.content_hash()
        }
        (true, None) => return Err(Error::domain(format!("pipeline {} needs an sr model", spec.preprocess.name()))),
        (false, _) => String::new(),
    };
    let out = spec.output_size();
    let key = format!(
        "{}-{}",
        spec.preprocess.name(),
        &sha256_hex(format!("{lr_key}|{}|{}|{}|{out}|{sr_hash}", spec.preprocess.name(), spec.scale, spec.interpolation).as_bytes())
            [..24]
    );
    let (images, outcome) = materialize(cache_dir, &key, n, || {
        let up = spec.lr_size * spec.scale;
        match spec.preprocess {
            Preprocess::Interpolate => lr.iter().map(|im| resize(im, up, up, spec.interpolation)).collect(),
            Preprocess::CenterStub => lr
                .iter()
                .zip(&dataset.samples)
                .map(|(im, s)| center_gaze_stub(im, s.geometry.as_ref(), spec.scale))
                .collect(),
            Preprocess::Sr | Preprocess::SrDownsample => {
                let model = sr.expect("checked above");
                let ups = sr_upscale_all(model, &lr, 16)?;
                if out == up {
                    Ok(ups)
                } else {
                    ups.iter().map(|im| resize(im, out, out, ResampleMethod::Area)).collect()
                }
            }
            Preprocess::None => unreachable!(),
        }
    })?;
    warnings.extend(outcome.warning(&key));
    Ok(PreparedInputs { images, lr_key, key, warnings })
}
