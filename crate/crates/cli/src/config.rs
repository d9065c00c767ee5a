//! The run configuration document and its resolution.

use std::path::{Path, PathBuf};

use gazesr::data::SynthParams;
use gazesr::degrade::DegradationRanges;
use gazesr::harness::{PipelineSpec, SrSetup, Table1Config, Table3Config, Table5Config, TrainConfig};
use gazesr::util::derive_seed;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Dataset directory (`subjects/<id>/{images/, labels.csv}`).
    pub root: PathBuf,
    /// When present, the dataset is (re)generated at `root` before use.
    pub synthetic: Option<SynthParams>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { root: PathBuf::from("data"), synthetic: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainGazeConfig {
    /// Subject used as the test set; defaults to the last subject.
    pub holdout: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restoration {
    /// The originals themselves.
    Identity,
    /// Downscale, then upscale with the configured interpolation.
    Interpolate,
    /// Downscale, then super-resolve with the `[sr]` backbone.
    Sr,
    /// Downscale, then upscale with irises redrawn at the eye centre.
    CenterStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Gaze checkpoint from `train-gaze`; when absent one is trained on clean data with `[pipeline.model]` and `[train]`.
    pub gaze_model: Option<PathBuf>,
    pub restoration: Restoration,
    /// Side of the low-resolution copies that are restored.
    pub lr_size: usize,
    /// Number of samples probed (0 = all).
    pub limit: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { gaze_model: None, restoration: Restoration::CenterStub, lr_size: 28, limit: 100 }
    }
}

/// Every setting of every subcommand. Keys not listed here are rejected.
///
/// Section-level `seed` keys are overwritten by values derived from the
/// master `seed`, so `--seed` and the config-file seed are interchangeable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    /// Preprocessed-image and SR-weight cache; defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub degradation: DegradationRanges,
    pub sr: SrSetup,
    pub pipeline: PipelineSpec,
    pub train: TrainConfig,
    pub train_gaze: TrainGazeConfig,
    pub table1: Table1Config,
    pub table3: Table3Config,
    pub table5: Table5Config,
    pub probe: ProbeConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn seed_sr(sr: &mut SrSetup, seed: u64) {
    sr.pretext.seed = derive_seed(seed, &["pretext"]);
    sr.unlabeled.seed = derive_seed(seed, &["unlabeled"]);
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (line {})", line_of(text, s.start))).unwrap_or_default();
            CliError::user(format!("config {}: {}{at}", origin.display(), e.message().trim()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies command-line overrides and propagates the master seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if out.is_some() {
            self.out_dir = out;
        }
        let seed = self.seed;
        if let Some(p) = &mut self.dataset.synthetic {
            p.seed = derive_seed(seed, &["synth"]);
        }
        seed_sr(&mut self.sr, seed);
        self.train.seed = seed;
        for (train, sr) in [
            (&mut self.table1.train, &mut self.table1.sr),
            (&mut self.table3.train, &mut self.table3.sr),
            (&mut self.table5.train, &mut self.table5.sr),
        ] {
            train.seed = seed;
            seed_sr(sr, seed);
        }
        self
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out_dir.as_deref().ok_or_else(|| CliError::user("no output directory: pass --out or set out_dir"))
    }

    pub fn cache_dir(&self) -> Result<PathBuf, CliError> {
        Ok(match &self.cache_dir {
            Some(c) => c.clone(),
            None => self.out_dir()?.join("cache"),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
