//! Leave-one-subject-out runs and their self-describing reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{prepare_inputs, PipelineSpec};
use super::{train_gaze, EpochRecord, EpochSelection, Labeled, TrainConfig};
use crate::data::{fraction_subset, loso_splits, Dataset};
use crate::degrade::JPEG_CODEC;
use crate::error::{ensure, Error, Result};
use crate::models::{build_model, ModelSpec};
use crate::sr::SrModel;
use crate::util::{derive_seed, write_atomic};

/// Everything besides the dataset and configs that a run needs.
pub struct RunResources<'a> {
    pub cache_dir: PathBuf,
    /// SR weights for `sr`/`sr_downsample` preprocessing and for initialising SuperVision.
    pub sr: Option<&'a SrModel<f32>>,
    /// Where the report is (re)written after every fold, so an interrupted run leaves a valid partial report.
    pub report_path: Option<PathBuf>,
}

impl<'a> RunResources<'a> {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        RunResources { cache_dir: cache_dir.into(), sr: None, report_path: None }
    }

    pub fn with_sr(mut self, sr: Option<&'a SrModel<f32>>) -> Self {
        self.sr = sr;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub jpeg_codec: String,
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub seed: u64,
}

impl Fingerprint {
    pub fn current(seed: u64) -> Self {
        Fingerprint {
            jpeg_codec: JPEG_CODEC.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_subject: String,
    pub train_subjects: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub best_pog: f64,
    pub final_epoch: usize,
    pub final_pog: f64,
    /// Error of the epoch kept under the run's selection policy, degrees.
    pub pog: f64,
    pub curve: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment_id: String,
    pub description: String,
    pub pipeline: PipelineSpec,
    pub train: TrainConfig,
    pub dataset_root: PathBuf,
    pub dataset_size: usize,
    /// Content hashes of every input: dataset, SR weights, cache entries.
    pub inputs: BTreeMap<String, String>,
    pub folds: Vec<FoldReport>,
    /// Mean of the per-fold errors under the selection policy.
    pub mean_pog: f64,
    pub mean_pog_best_test: f64,
    pub mean_pog_final: f64,
    /// Full-scale reference error for the matching published configuration, when one exists.
    pub reference_pog: Option<f64>,
    /// Table axes (e.g. `track`, `fraction`) for report rendering.
    pub axes: BTreeMap<String, String>,
    pub fingerprint: Fingerprint,
    pub warnings: Vec<String>,
    pub complete: bool,
    pub total_folds: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Mean of `folds[..].pog`, recomputed.
    pub fn recomputed_mean(&self) -> f64 {
        mean(self.folds.iter().map(|f| f.pog))
    }

    fn refresh_means(&mut self) {
        self.mean_pog = self.recomputed_mean();
        self.mean_pog_best_test = mean(self.folds.iter().map(|f| f.best_pog));
        self.mean_pog_final = mean(self.folds.iter().map(|f| f.final_pog));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
    }

    /// CSV with one row per fold.
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,test_subject,n_train,n_test,pog,best_epoch,best_pog,final_epoch,final_pog\n");
        for f in &self.folds {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                f.fold, f.test_subject, f.n_train, f.n_test, f.pog, f.best_epoch, f.best_pog, f.final_epoch, f.final_pog
            ));
        }
        s
    }
}

/// Trains and evaluates one model per leave-one-subject-out fold.
///
/// Inputs are prepared once for the whole dataset (see [`prepare_inputs`]);
/// the training fraction is drawn per subject, independently of the fold.
/// Fold `i` initialises and shuffles with seeds derived from `(cfg.seed, i)`.
pub fn run_loso(
    experiment_id: &str,
    dataset: &Dataset,
    spec: &PipelineSpec,
    cfg: &TrainConfig,
    res: &RunResources<'_>,
) -> Result<EvalReport> {
    spec.validate()?;
    cfg.validate()?;
    let folds = loso_splits(dataset)?;
    let prepared = prepare_inputs(dataset, spec, cfg.seed, &res.cache_dir, res.sr)?;
    let in_fraction: std::collections::BTreeSet<usize> =
        fraction_subset(&dataset.samples, spec.fraction, cfg.seed)?.into_iter().collect();

    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".into(), dataset.content_hash()?);
    inputs.insert("lr_cache".into(), prepared.lr_key.clone());
    inputs.insert("input_cache".into(), prepared.key.clone());
    if let Some(sr) = res.sr {
        inputs.insert("sr_weights".into(), sr.store.content_hash());
    }
    if let Some(p) = &spec.pretrained_gaze {
        inputs.insert("pretrained_gaze".into(), crate::util::sha256_hex(&std::fs::read(p).map_err(|e| Error::load(p, e.to_string()))?));
    }
    let mut report = EvalReport {
        experiment_id: experiment_id.to_string(),
        description: spec.describe(),
        pipeline: spec.clone(),
        train: cfg.clone(),
        dataset_root: dataset.root.clone(),
        dataset_size: dataset.samples.len(),
        inputs,
        folds: Vec::new(),
        mean_pog: f64::NAN,
        mean_pog_best_test: f64::NAN,
        mean_pog_final: f64::NAN,
        reference_pog: None,
        axes: BTreeMap::new(),
        fingerprint: Fingerprint::current(cfg.seed),
        warnings: prepared.warnings.clone(),
        complete: false,
        total_folds: folds.len(),
    };

    for fold in &folds {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in dataset.samples.iter().enumerate() {
            let item = Labeled { image: &prepared.images[i], gaze: s.gaze, subject: &s.subject_id };
            if s.subject_id == fold.test_subject {
                test.push(item);
            } else if in_fraction.contains(&i) {
                train.push(item);
            }
        }
        ensure!(!train.is_empty() && !test.is_empty(), "fold {} has an empty split", fold.index);
        let fold_seed = derive_seed(cfg.seed, &["fold", &fold.index.to_string()]);
        let mut model = build_model::<f32>(&spec.model, fold_seed)?;
        if let (ModelSpec::Supervision(_), Some(sr)) = (&spec.model, res.sr) {
            model.load_sr_weights(sr)?;
        }
        if let Some(p) = &spec.pretrained_gaze {
            model.load_pretrained(p)?;
        }
        let fold_cfg = TrainConfig { seed: fold_seed, ..cfg.clone() };
        let out = train_gaze(&mut model, &train, &test, &fold_cfg)?;
        let pog = match cfg.epoch_selection {
            EpochSelection::BestTest => out.pog_at(out.best_epoch),
            EpochSelection::Final => out.pog_at(out.final_epoch),
        };
        log::info!("{experiment_id} fold {} (test {}): {pog:.3} deg", fold.index, fold.test_subject);
        report.folds.push(FoldReport {
            fold: fold.index,
            test_subject: fold.test_subject.clone(),
            train_subjects: fold.train_subjects.clone(),
            n_train: train.len(),
            n_test: test.len(),
            best_epoch: out.best_epoch,
            best_pog: out.pog_at(out.best_epoch),
            final_epoch: out.final_epoch,
            final_pog: out.pog_at(out.final_epoch),
            pog,
            curve: out.curve,
        });
        report.refresh_means();
        report.complete = report.folds.len() == folds.len();
        if let Some(p) = &res.report_path {
            report.save(p)?;
        }
    }
    Ok(report)
}

/// Re-runs the configuration echoed in `report`. The dataset and SR weights
/// must hash to the values the report recorded.
pub fn rerun_report(report: &EvalReport, dataset: &Dataset, res: &RunResources<'_>) -> Result<EvalReport> {
    let hash = dataset.content_hash()?;
    ensure!(report.inputs.get("dataset") == Some(&hash), "dataset content differs from the one in the report");
    ensure!(
        report.inputs.get("sr_weights") == res.sr.map(|m| m.store.content_hash()).as_ref(),
        "sr weights differ from the ones in the report"
    );
    let mut again = run_loso(&report.experiment_id, dataset, &report.pipeline, &report.train, res)?;
    again.reference_pog = report.reference_pog;
    again.axes = report.axes.clone();
    Ok(again)
}
