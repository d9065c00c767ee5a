//! Measures whether a restoration step preserves the gaze a model reads from an image.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{angular_error_deg, GazeAngles};
use crate::image::ImageU8;
use crate::models::{predict_gaze, GazeRegressor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub n: usize,
    /// Mean angle between predictions on original and restored images, degrees.
    pub mean_shift_deg: f64,
    /// Mean angle of the predictions from straight ahead, degrees.
    pub mean_magnitude_original: f64,
    pub mean_magnitude_restored: f64,
    /// `1 - restored / original` magnitude: 0 when restoration keeps gaze, 1 when every output looks straight ahead.
    pub centering: f64,
    pub shifts: Vec<(String, f64)>,
    pub histogram: Vec<HistogramBin>,
}

const BINS: usize = 10;

fn histogram(values: &[f64]) -> Vec<HistogramBin> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let width = if max > 0.0 { max / BINS as f64 } else { 1.0 };
    let mut bins: Vec<HistogramBin> =
        (0..BINS).map(|i| HistogramBin { lo: i as f64 * width, hi: (i + 1) as f64 * width, count: 0 }).collect();
    for &v in values {
        let i = ((v / width) as usize).min(BINS - 1);
        bins[i].count += 1;
    }
    bins
}

/// Compares `model`'s predictions on `original` images with those on their
/// `restored` counterparts. Both sets are `(key, image)` lists paired by key;
/// the model should have been trained on clean data.
pub fn gaze_preservation_probe(
    model: &GazeRegressor<f32>,
    original: &[(String, ImageU8)],
    restored: &[(String, ImageU8)],
) -> Result<ProbeReport> {
    ensure!(!original.is_empty(), "probe needs at least one sample");
    let by_key: BTreeMap<&str, &ImageU8> = restored.iter().map(|(k, im)| (k.as_str(), im)).collect();
    ensure!(by_key.len() == restored.len(), "restored set has duplicate keys");
    ensure!(
        original.len() == restored.len(),
        "unpaired sets: {} originals vs {} restored",
        original.len(),
        restored.len()
    );
    let paired: Vec<&ImageU8> = original
        .iter()
        .map(|(k, _)| by_key.get(k.as_str()).copied().ok_or_else(|| Error::domain(format!("no restored image for {k}"))))
        .collect::<Result<_>>()?;
    let orig_imgs: Vec<&ImageU8> = original.iter().map(|(_, im)| im).collect();
    let p_orig = predict_gaze(model, &orig_imgs)?;
    let p_rest = predict_gaze(model, &paired)?;

    let zero = GazeAngles::<f64>::zero();
    let n = original.len() as f64;
    let shifts: Vec<f64> = p_orig.iter().zip(&p_rest).map(|(a, b)| angular_error_deg(*a, *b)).collect();
    let mag_o = p_orig.iter().map(|p| angular_error_deg(*p, zero)).sum::<f64>() / n;
    let mag_r = p_rest.iter().map(|p| angular_error_deg(*p, zero)).sum::<f64>() / n;
    ensure!(mag_o > 0.0, "model predicts straight ahead for every original; centering is undefined");
    Ok(ProbeReport {
        n: original.len(),
        mean_shift_deg: shifts.iter().sum::<f64>() / n,
        mean_magnitude_original: mag_o,
        mean_magnitude_restored: mag_r,
        centering: 1.0 - mag_r / mag_o,
        histogram: histogram(&shifts),
        shifts: original.iter().map(|(k, _)| k.clone()).zip(shifts).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_regressor, GazeRegressorConfig, RegressorKind};

    fn model() -> GazeRegressor<f32> {
        let cfg = GazeRegressorConfig { kind: RegressorKind::SimpleCnn, input_size: 56, width: 8, head_hidden: 16, ..Default::default() };
        build_regressor(&cfg, 3).unwrap()
    }

    fn set(n: usize) -> Vec<(String, ImageU8)> {
        (0..n)
            .map(|i| {
                let data = (0..56 * 56 * 3).map(|k| ((k * (i + 3) + k / 168 * 7) % 256) as u8).collect();
                let img = ImageU8::new(56, 56, 3, data).unwrap();
                (format!("s{i}"), img)
            })
            .collect()
    }

    #[test]
    fn identity_restoration_has_zero_shift_and_centering() {
        let m = model();
        let a = set(5);
        let mut b = a.clone();
        b.reverse();
        let r = gaze_preservation_probe(&m, &a, &b).unwrap();
        assert_eq!(r.mean_shift_deg, 0.0);
        assert_eq!(r.centering, 0.0);
        assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), 5);
    }

    #[test]
    fn unpaired_sets_are_rejected() {
        let m = model();
        let a = set(3);
        let mut b = a.clone();
        b[1].0 = "other".into();
        assert!(matches!(gaze_preservation_probe(&m, &a, &b), Err(Error::Domain(_))));
        assert!(gaze_preservation_probe(&m, &a, &a[..2]).is_err());
    }
}
