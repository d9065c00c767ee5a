//! Experiment runners that reproduce the structure of the published result
//! tables at a configurable scale. Every row is a full LOSO run; full-scale
//! reference errors are attached as metadata.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gazesr_tensor::ResampleMethod;
use serde::{Deserialize, Serialize};

use super::loso::{run_loso, EvalReport, RunResources};
use super::pipeline::{PipelineSpec, Preprocess};
use super::TrainConfig;
use crate::data::{synthesize, Dataset, SynthParams};
use crate::degrade::DegradationRanges;
use crate::error::{ensure, Result};
use crate::image::ImageU8;
use crate::models::{FusionMode, GazeRegressorConfig, ModelSpec, RegressorKind, SuperVisionConfig};
use crate::sr::{train_sr_pretext, PretextConfig, PretextReport, SrBackboneConfig, SrModel};
use crate::util::{sha256_hex, write_atomic};

/// How the SR backbone used by a table is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrSetup {
    pub backbone: SrBackboneConfig,
    pub pretext: PretextConfig,
    /// Unlabeled images for the pretext task; `image_size` must be the SR output size.
    pub unlabeled: SynthParams,
    /// Use these weights instead of pretext training.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SrSetup {
    fn default() -> Self {
        SrSetup {
            backbone: SrBackboneConfig::default(),
            pretext: PretextConfig::default(),
            unlabeled: SynthParams { n_subjects: 4, per_subject: 25, image_size: 56, seed: 1001 },
            checkpoint: None,
        }
    }
}

/// Loads `setup.checkpoint`, or pretext-trains a backbone and caches it in
/// `cache_dir` under the hash of the setup. The report is `None` when nothing was trained.
pub fn train_or_load_sr(setup: &SrSetup, cache_dir: &Path) -> Result<(SrModel<f32>, Option<PretextReport>)> {
    setup.backbone.validate()?;
    if let Some(p) = &setup.checkpoint {
        let m = SrModel::<f32>::load(p)?;
        ensure!(
            m.config().scale == setup.backbone.scale,
            "checkpoint {} upscales x{}, config asks for x{}",
            p.display(),
            m.config().scale,
            setup.backbone.scale
        );
        return Ok((m, None));
    }
    let key = &sha256_hex(serde_json::to_string(setup)?.as_bytes())[..24];
    let dir = cache_dir.join(format!("sr-{key}"));
    let (ckpt, curve) = (dir.join("model.ckpt"), dir.join("pretext.json"));
    if ckpt.exists() && curve.exists() {
        let report: PretextReport = serde_json::from_slice(&std::fs::read(&curve)?)?;
        return Ok((SrModel::load(&ckpt)?, Some(report)));
    }
    let images: Vec<ImageU8> = synthesize(&setup.unlabeled)?.into_iter().map(|s| s.image).collect();
    let mut model = SrModel::<f32>::new(&setup.backbone, setup.pretext.seed)?;
    let report = train_sr_pretext(&mut model, &images, &setup.pretext)?;
    std::fs::create_dir_all(&dir)?;
    model.save(&ckpt)?;
    write_atomic(&curve, &serde_json::to_vec(&report)?)?;
    Ok((model, Some(report)))
}

fn save_row(out_dir: Option<&Path>, r: &EvalReport) -> Result<()> {
    if let Some(d) = out_dir {
        r.save(&d.join(format!("{}.json", r.experiment_id)))?;
    }
    Ok(())
}

fn resources<'a>(cache_dir: &Path, sr: Option<&'a SrModel<f32>>, out_dir: Option<&Path>, id: &str) -> RunResources<'a> {
    RunResources {
        cache_dir: cache_dir.to_path_buf(),
        sr,
        report_path: out_dir.map(|d| d.join(format!("{id}.partial.json"))),
    }
}

fn finish(mut r: EvalReport, reference: Option<f64>, axes: &[(&str, String)], out_dir: Option<&Path>) -> Result<EvalReport> {
    r.reference_pog = reference;
    r.axes = axes.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    save_row(out_dir, &r)?;
    if let Some(d) = out_dir {
        let _ = std::fs::remove_file(d.join(format!("{}.partial.json", r.experiment_id)));
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    Clean,
    Degraded,
}

impl Track {
    fn name(self) -> &'static str {
        match self {
            Track::Clean => "clean",
            Track::Degraded => "degraded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table1Config {
    pub lr_size: usize,
    pub scale: usize,
    pub interpolation: ResampleMethod,
    pub degradation: DegradationRanges,
    pub tracks: Vec<Track>,
    pub pipelines: Vec<Preprocess>,
    /// Regressor; its `input_size` is set to `lr_size * scale`.
    pub model: GazeRegressorConfig,
    pub train: TrainConfig,
    pub sr: SrSetup,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config {
            lr_size: 28,
            scale: 2,
            interpolation: ResampleMethod::Bicubic,
            degradation: DegradationRanges::default(),
            tracks: vec![Track::Clean, Track::Degraded],
            pipelines: vec![Preprocess::Interpolate, Preprocess::Sr, Preprocess::CenterStub],
            model: GazeRegressorConfig { kind: RegressorKind::SimpleCnn, input_size: 56, ..Default::default() },
            train: TrainConfig::default(),
            sr: SrSetup::default(),
        }
    }
}

/// Full-scale reference errors for the first table, degrees.
pub fn table1_reference(track: Track, p: Preprocess) -> Option<f64> {
    match (track, p) {
        (Track::Clean, Preprocess::Interpolate) => Some(4.20),
        (Track::Clean, Preprocess::Sr) => Some(4.11),
        (Track::Degraded, Preprocess::Interpolate) => Some(5.47),
        (Track::Degraded, Preprocess::Sr) => Some(5.10),
        _ => None,
    }
}

/// SR methods against interpolation (and the centring stub) on clean and degraded low-resolution inputs.
pub fn run_table1_style(
    dataset: &Dataset,
    cfg: &Table1Config,
    cache_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    ensure!(cfg.sr.backbone.scale == cfg.scale, "sr backbone scale must equal the table scale {}", cfg.scale);
    let model = GazeRegressorConfig { input_size: cfg.lr_size * cfg.scale, ..cfg.model.clone() };
    let sr = if cfg.pipelines.iter().any(|p| p.needs_sr()) { Some(train_or_load_sr(&cfg.sr, cache_dir)?.0) } else { None };
    let mut rows = Vec::new();
    for &track in &cfg.tracks {
        for &p in &cfg.pipelines {
            ensure!(
                matches!(p, Preprocess::Interpolate | Preprocess::Sr | Preprocess::CenterStub),
                "table1 pipelines are interpolate, sr and center_stub"
            );
            let spec = PipelineSpec {
                preprocess: p,
                lr_size: cfg.lr_size,
                scale: cfg.scale,
                interpolation: cfg.interpolation,
                degradation: (track == Track::Degraded).then(|| cfg.degradation.clone()),
                model: ModelSpec::Regressor(model.clone()),
                fraction: 100,
                pretrained_gaze: None,
            };
            let id = format!("table1-{}-{}", track.name(), p.name());
            let r = run_loso(&id, dataset, &spec, &cfg.train, &resources(cache_dir, sr.as_ref(), out_dir, &id))?;
            rows.push(finish(
                r,
                table1_reference(track, p),
                &[("table", "table1".into()), ("track", track.name().into()), ("pipeline", p.name().into())],
                out_dir,
            )?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table3Config {
    /// Low-resolution input sides; each is upscaled by the SR backbone's scale.
    pub lr_sizes: Vec<usize>,
    pub interpolation: ResampleMethod,
    pub degradation: Option<DegradationRanges>,
    pub model: GazeRegressorConfig,
    /// Gaze weights loaded before training every fold (the "pretrained" rows).
    pub pretrained_gaze: Option<PathBuf>,
    pub train: TrainConfig,
    pub sr: SrSetup,
}

impl Default for Table3Config {
    fn default() -> Self {
        Table3Config {
            lr_sizes: vec![56, 112],
            interpolation: ResampleMethod::Bicubic,
            degradation: None,
            model: GazeRegressorConfig::default(),
            pretrained_gaze: None,
            train: TrainConfig::default(),
            sr: SrSetup { backbone: SrBackboneConfig { scale: 4, ..Default::default() }, ..Default::default() },
        }
    }
}

/// Full-scale reference errors for the third table (x4, clean), degrees.
pub fn table3_reference(lr_size: usize, pretrained: bool, p: Preprocess) -> Option<f64> {
    match (lr_size, pretrained, p) {
        (56, false, Preprocess::Interpolate) => Some(4.81),
        (56, false, Preprocess::Sr) => Some(4.76),
        (112, false, Preprocess::Interpolate) => Some(4.53),
        (112, false, Preprocess::Sr) => Some(4.48),
        (56, true, Preprocess::Interpolate) => Some(4.31),
        (56, true, Preprocess::Sr) => Some(4.22),
        (112, true, Preprocess::Interpolate) => Some(4.24),
        (112, true, Preprocess::Sr) => Some(4.21),
        _ => None,
    }
}

/// Interpolation against SR at several low input resolutions.
pub fn run_table3_style(
    dataset: &Dataset,
    cfg: &Table3Config,
    cache_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    ensure!(!cfg.lr_sizes.is_empty(), "table3 needs at least one lr size");
    let scale = cfg.sr.backbone.scale;
    let (sr, _) = train_or_load_sr(&cfg.sr, cache_dir)?;
    let pretrained = cfg.pretrained_gaze.is_some();
    let mut rows = Vec::new();
    for &lr in &cfg.lr_sizes {
        for p in [Preprocess::Interpolate, Preprocess::Sr] {
            let spec = PipelineSpec {
                preprocess: p,
                lr_size: lr,
                scale,
                interpolation: cfg.interpolation,
                degradation: cfg.degradation.clone(),
                model: ModelSpec::Regressor(GazeRegressorConfig { input_size: lr * scale, ..cfg.model.clone() }),
                fraction: 100,
                pretrained_gaze: cfg.pretrained_gaze.clone(),
            };
            let id = format!("table3-{lr}-{}{}", p.name(), if pretrained { "-pretrained" } else { "" });
            let r = run_loso(&id, dataset, &spec, &cfg.train, &resources(cache_dir, Some(&sr), out_dir, &id))?;
            let reference = if scale == 4 && cfg.degradation.is_none() { table3_reference(lr, pretrained, p) } else { None };
            rows.push(finish(
                r,
                reference,
                &[
                    ("table", "table3".into()),
                    ("input", lr.to_string()),
                    ("gaze_input", (lr * scale).to_string()),
                    ("pretrained", pretrained.to_string()),
                    ("pipeline", p.name().into()),
                ],
                out_dir,
            )?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table5Pipeline {
    Interpolate,
    SrDownsample,
    Supervision,
}

impl Table5Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Table5Pipeline::Interpolate => "interpolate",
            Table5Pipeline::SrDownsample => "sr_downsample",
            Table5Pipeline::Supervision => "supervision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table5Config {
    pub lr_size: usize,
    pub interpolation: ResampleMethod,
    pub degradation: DegradationRanges,
    pub fractions: Vec<u32>,
    pub pipelines: Vec<Table5Pipeline>,
    /// ResNet-18 regressor shared by all pipelines; its input size must be a multiple of `lr_size`.
    pub head: GazeRegressorConfig,
    pub freeze_sr: bool,
    pub fusion_stage: usize,
    pub fusion_mode: FusionMode,
    pub fusion: bool,
    pub train: TrainConfig,
    pub sr: SrSetup,
}

impl Default for Table5Config {
    fn default() -> Self {
        let sv = SuperVisionConfig::default();
        Table5Config {
            lr_size: 112,
            interpolation: ResampleMethod::Bicubic,
            degradation: DegradationRanges::default(),
            fractions: vec![5, 10, 20],
            pipelines: vec![Table5Pipeline::Interpolate, Table5Pipeline::SrDownsample, Table5Pipeline::Supervision],
            head: sv.head,
            freeze_sr: sv.freeze_sr,
            fusion_stage: sv.fusion_stage,
            fusion_mode: sv.fusion_mode,
            fusion: sv.fusion,
            train: TrainConfig::default(),
            sr: SrSetup { backbone: sv.sr, ..Default::default() },
        }
    }
}

/// Full-scale reference errors for the fifth table, degrees.
pub fn table5_reference(p: Table5Pipeline, fraction: u32) -> Option<f64> {
    let row = match p {
        Table5Pipeline::Interpolate => [6.26, 6.06, 6.04],
        Table5Pipeline::SrDownsample => [6.20, 6.01, 5.91],
        Table5Pipeline::Supervision => [6.17, 5.90, 4.54],
    };
    match fraction {
        5 => Some(row[0]),
        10 => Some(row[1]),
        20 => Some(row[2]),
        _ => None,
    }
}

impl Table5Config {
    pub fn pipeline_spec(&self, p: Table5Pipeline, fraction: u32) -> Result<PipelineSpec> {
        let head = self.head.input_size;
        ensure!(
            head % self.lr_size == 0,
            "head input {head} is not a multiple of lr_size {}",
            self.lr_size
        );
        let base = PipelineSpec {
            lr_size: self.lr_size,
            interpolation: self.interpolation,
            degradation: Some(self.degradation.clone()),
            fraction,
            ..PipelineSpec::default()
        };
        Ok(match p {
            Table5Pipeline::Interpolate => PipelineSpec {
                preprocess: Preprocess::Interpolate,
                scale: head / self.lr_size,
                model: ModelSpec::Regressor(self.head.clone()),
                ..base
            },
            Table5Pipeline::SrDownsample => PipelineSpec {
                preprocess: Preprocess::SrDownsample,
                scale: self.sr.backbone.scale,
                model: ModelSpec::Regressor(self.head.clone()),
                ..base
            },
            Table5Pipeline::Supervision => PipelineSpec {
                preprocess: Preprocess::None,
                scale: 1,
                model: ModelSpec::Supervision(SuperVisionConfig {
                    sr: self.sr.backbone.clone(),
                    lr_size: self.lr_size,
                    freeze_sr: self.freeze_sr,
                    fusion_stage: self.fusion_stage,
                    fusion_mode: self.fusion_mode,
                    fusion: self.fusion,
                    head: self.head.clone(),
                }),
                ..base
            },
        })
    }
}

/// Label-fraction study: every pipeline at every training fraction. Fractions
/// are nested subsets under the shared training seed.
pub fn run_table5_style(
    dataset: &Dataset,
    cfg: &Table5Config,
    cache_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    ensure!(!cfg.fractions.is_empty() && !cfg.pipelines.is_empty(), "table5 needs fractions and pipelines");
    let specs: Vec<(Table5Pipeline, u32, PipelineSpec)> = cfg
        .pipelines
        .iter()
        .flat_map(|&p| cfg.fractions.iter().map(move |&f| (p, f)))
        .map(|(p, f)| Ok((p, f, cfg.pipeline_spec(p, f)?)))
        .collect::<Result<_>>()?;
    for (_, _, s) in &specs {
        s.validate()?;
    }
    let needs_sr = cfg.pipelines.iter().any(|p| *p != Table5Pipeline::Interpolate);
    let sr = if needs_sr { Some(train_or_load_sr(&cfg.sr, cache_dir)?.0) } else { None };
    let mut rows = Vec::new();
    for (p, f, spec) in specs {
        let id = format!("table5-{}-{f}pct", p.name());
        let r = run_loso(&id, dataset, &spec, &cfg.train, &resources(cache_dir, sr.as_ref(), out_dir, &id))?;
        rows.push(finish(
            r,
            table5_reference(p, f),
            &[("table", "table5".into()), ("pipeline", p.name().into()), ("fraction", f.to_string())],
            out_dir,
        )?);
    }
    Ok(rows)
}

/// Groups report means by one axis for quick comparisons, e.g. `pipeline`.
pub fn means_by(reports: &[EvalReport], axis: &str) -> BTreeMap<String, Vec<f64>> {
    let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        let k = r.axes.get(axis).cloned().unwrap_or_default();
        m.entry(k).or_default().push(r.mean_pog);
    }
    m
}
