//! Gaze datasets: sample records, on-disk layout, splits and subsets.
//!
//! On disk a dataset is
//!
//! ```text
//! <root>/subjects/<id>/images/<file>.png|jpg
//! <root>/subjects/<id>/labels.csv        filename,pitch_rad,yaw_rad
//! <root>/subjects/<id>/geometry.jsonl    optional, one {"filename", "geometry"} per line
//! ```

mod layout;
pub mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::geometry::GazeAngles;
use crate::image::ImageU8;
use crate::util::derive_seed;

pub use layout::{load_mpii_layout, write_layout, LayoutWriter};
pub use synth::{current_synthetic, generate_synthetic, synthesize, EyeMeta, GeometryMeta, SynthParams, SynthSample};

/// Where a sample's pixels came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Synthetic { seed: u64 },
    /// Derived by a preprocessing pipeline, identified by its cache key.
    Derived { pipeline: String, key: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub image_path: PathBuf,
    pub gaze: GazeAngles<f64>,
    pub subject_id: String,
    pub geometry: Option<GeometryMeta>,
    pub provenance: Provenance,
}

impl GazeSample {
    pub fn file_name(&self) -> String {
        self.image_path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    }
}

/// Samples sorted by subject id then path; every image is `image_size` square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub root: PathBuf,
    pub image_size: usize,
    pub samples: Vec<GazeSample>,
}

impl Dataset {
    pub fn new(root: impl Into<PathBuf>, image_size: usize, mut samples: Vec<GazeSample>) -> Result<Self> {
        ensure!(!samples.is_empty(), "dataset has no samples");
        samples.sort_by(|a, b| (&a.subject_id, &a.image_path).cmp(&(&b.subject_id, &b.image_path)));
        Ok(Dataset { root: root.into(), image_size, samples })
    }

    pub fn subjects(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn load_images(&self) -> Result<Vec<ImageU8>> {
        self.samples.iter().map(|s| ImageU8::load(&s.image_path)).collect()
    }

    /// SHA-256 over labels, subjects, file names and image bytes.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update((self.image_size as u64).to_le_bytes());
        for s in &self.samples {
            h.update(s.subject_id.as_bytes());
            h.update([0]);
            h.update(s.file_name().as_bytes());
            h.update([0]);
            h.update(s.gaze.pitch.to_le_bytes());
            h.update(s.gaze.yaw.to_le_bytes());
            h.update(Sha256::digest(std::fs::read(&s.image_path)?));
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            root: self.root.clone(),
            image_size: self.image_size,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn root_path(&self) -> &Path {
        &self.root
    }
}

/// One leave-one-subject-out fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub test_subject: String,
    pub train_subjects: Vec<String>,
}

/// One fold per subject, in sorted subject order.
pub fn loso_splits(dataset: &Dataset) -> Result<Vec<Fold>> {
    let subjects = dataset.subjects();
    ensure!(subjects.len() >= 2, "leave-one-subject-out needs at least 2 subjects, found {}", subjects.len());
    Ok(subjects
        .iter()
        .enumerate()
        .map(|(index, t)| Fold {
            index,
            test_subject: t.clone(),
            train_subjects: subjects.iter().filter(|s| *s != t).cloned().collect(),
        })
        .collect())
}

/// Indices of a per-subject `pct`% subset.
///
/// Each subject's samples are shuffled once with a seed derived from `seed`
/// and the subject id, and the first `round(n * pct / 100)` are kept, so
/// smaller fractions are prefixes of larger ones. The result keeps dataset
/// order; `pct = 100` returns every index.
pub fn fraction_subset(samples: &[GazeSample], pct: u32, seed: u64) -> Result<Vec<usize>> {
    ensure!((1..=100).contains(&pct), "fraction must be in 1..=100 percent, got {pct}");
    if pct == 100 {
        return Ok((0..samples.len()).collect());
    }
    let subjects: BTreeSet<&str> = samples.iter().map(|s| s.subject_id.as_str()).collect();
    let mut keep = Vec::new();
    for subj in subjects {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].subject_id == subj).collect();
        idx.sort_by(|&a, &b| samples[a].image_path.cmp(&samples[b].image_path));
        let n = idx.len();
        let k = (n * pct as usize + 50) / 100;
        ensure!(k > 0, "{pct}% of subject {subj}'s {n} samples is empty");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["fraction", subj]));
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    Ok(keep)
}
