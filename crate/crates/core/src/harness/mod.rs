//! Training, leave-one-subject-out evaluation and the table-style experiment runners.

mod cache;
mod loso;
mod pipeline;
mod probe;
mod tables;

use std::collections::BTreeSet;

use gazesr_tensor::{AdamW, AdamWConfig, Graph, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{mean_angular_error, GazeAngles};
use crate::image::{batch_chw, ImageU8};
use crate::models::{gaze_loss, predict_gaze, GazeRegressor};
use crate::util::derive_seed;

pub use cache::{materialize, CacheOutcome};
pub use loso::{rerun_report, run_loso, EvalReport, Fingerprint, FoldReport, RunResources};
pub use pipeline::{prepare_inputs, PipelineSpec, Preprocess, PreparedInputs};
pub use probe::{gaze_preservation_probe, HistogramBin, ProbeReport};
pub use tables::{
    means_by, run_table1_style, run_table3_style, run_table5_style, table1_reference, table3_reference,
    table5_reference, train_or_load_sr, SrSetup, Table1Config, Table3Config, Table5Config, Table5Pipeline, Track,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adamw,
}

/// Which epoch's weights a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochSelection {
    /// The epoch with the lowest test error (uses test labels for model selection).
    BestTest,
    /// The last epoch.
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub seed: u64,
    pub epoch_selection: EpochSelection,
    /// Free-form hints for other runtimes; ignored here.
    pub device: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adamw,
            weight_decay: 1e-4,
            seed: 0,
            epoch_selection: EpochSelection::Final,
            device: None,
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is accepted as the frozen limit (evaluation only).
    pub fn validate(&self) -> Result<()> {
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(
            self.learning_rate >= 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be a finite non-negative number, got {}",
            self.learning_rate
        );
        ensure!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        Ok(())
    }
}

/// One labelled image borrowed from a prepared dataset.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub image: &'a ImageU8,
    pub gaze: GazeAngles<f64>,
    pub subject: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss; `None` for the untrained epoch 0.
    pub train_loss: Option<f64>,
    /// Mean angular error on the test set, degrees.
    pub test_pog: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub final_epoch: usize,
    /// Epoch whose weights the model holds on return.
    pub selected_epoch: usize,
}

impl TrainOutcome {
    pub fn pog_at(&self, epoch: usize) -> f64 {
        self.curve[epoch].test_pog
    }
}

/// Mean angular error (degrees) of the model's clamped predictions.
pub fn evaluate_pog<S: Scalar>(model: &GazeRegressor<S>, set: &[Labeled<'_>]) -> Result<f64> {
    ensure!(!set.is_empty(), "evaluation set is empty");
    let images: Vec<&ImageU8> = set.iter().map(|s| s.image).collect();
    let pred = predict_gaze(model, &images)?;
    let gt: Vec<GazeAngles<f64>> = set.iter().map(|s| s.gaze).collect();
    mean_angular_error(&pred, &gt)
}

/// Trains `model` on `train`, recording the test error after every epoch
/// (epoch 0 is the untrained model), and leaves it holding the weights of the
/// epoch chosen by `cfg.epoch_selection`.
///
/// Every mini-batch is checked against the test subjects; a hit is a
/// [`Error::Leakage`].
pub fn train_gaze<S: Scalar>(
    model: &mut GazeRegressor<S>,
    train: &[Labeled<'_>],
    test: &[Labeled<'_>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(!test.is_empty(), "test set is empty");
    let test_subjects: BTreeSet<&str> = test.iter().map(|s| s.subject).collect();
    if let Some(s) = train.iter().find(|s| test_subjects.contains(s.subject)) {
        return Err(Error::Leakage(format!("subject {} is in both the training and the test set", s.subject)));
    }

    let mut opt = AdamW::new(
        AdamWConfig { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
        &model.store,
    );
    let mut curve = vec![EpochRecord { epoch: 0, train_loss: None, test_pog: evaluate_pog(model, test)? }];
    let mut best: Option<(usize, f64, Vec<Vec<S>>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["epoch", &epoch.to_string()]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Labeled<'_>> = chunk.iter().map(|&i| &train[i]).collect();
            if let Some(s) = batch.iter().find(|s| test_subjects.contains(s.subject)) {
                return Err(Error::Leakage(format!("test subject {} reached a training batch", s.subject)));
            }
            let imgs: Vec<&ImageU8> = batch.iter().map(|s| s.image).collect();
            let labels: Vec<GazeAngles<f64>> = batch.iter().map(|s| s.gaze).collect();
            let (x, shape) = batch_chw::<S>(&imgs)?;
            let (loss, grads) = {
                let g = Graph::training(&model.store, derive_seed(cfg.seed, &["dropout", &global_step.to_string()]));
                let xv = g.input(x, &shape);
                let l = gaze_loss(&g, model.forward(&g, xv), &labels)?;
                (g.scalar(l).as_f64(), g.backward(l))
            };
            if !loss.is_finite() {
                return Err(Error::Training { step: global_step, msg: format!("non-finite loss {loss} in epoch {epoch}") });
            }
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store);
            opt.step(&mut model.store);
            loss_sum += loss;
            batches += 1;
            global_step += 1;
        }
        let pog = evaluate_pog(model, test)?;
        log::debug!("epoch {epoch}: loss {:.5} test {pog:.3} deg", loss_sum / batches as f64);
        curve.push(EpochRecord { epoch, train_loss: Some(loss_sum / batches as f64), test_pog: pog });
        if cfg.epoch_selection == EpochSelection::BestTest && best.as_ref().map_or(true, |b| pog < b.1) {
            best = Some((epoch, pog, model.store.snapshot()));
        }
    }

    let best_epoch = (1..curve.len())
        .min_by(|&a, &b| curve[a].test_pog.total_cmp(&curve[b].test_pog).then(a.cmp(&b)))
        .expect("at least one epoch");
    let selected_epoch = match (cfg.epoch_selection, best) {
        (EpochSelection::BestTest, Some((e, _, snap))) => {
            model.store.restore(&snap);
            e
        }
        _ => cfg.epochs,
    };
    Ok(TrainOutcome { curve, best_epoch, final_epoch: cfg.epochs, selected_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthParams};
    use crate::models::{build_regressor, GazeRegressorConfig, RegressorKind};

    fn tiny_model(seed: u64) -> GazeRegressor<f32> {
        let c = GazeRegressorConfig { kind: RegressorKind::SimpleCnn, input_size: 56, head_hidden: 16, dropout: 0.0, width: 4 };
        build_regressor(&c, seed).unwrap()
    }

    fn data() -> Vec<crate::data::SynthSample> {
        synthesize(&SynthParams { n_subjects: 2, per_subject: 12, image_size: 56, seed: 1 }).unwrap()
    }

    fn split(d: &[crate::data::SynthSample]) -> (Vec<Labeled<'_>>, Vec<Labeled<'_>>) {
        let all: Vec<Labeled<'_>> =
            d.iter().map(|s| Labeled { image: &s.image, gaze: s.gaze, subject: &s.subject_id }).collect();
        let (tr, te): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| s.subject == "s00");
        (tr, te)
    }

    #[test]
    fn zero_learning_rate_leaves_weights_and_curve_flat() {
        let d = data();
        let (tr, te) = split(&d);
        let mut m = tiny_model(0);
        let h = m.store.content_hash();
        let cfg = TrainConfig { epochs: 3, batch_size: 5, learning_rate: 0.0, ..Default::default() };
        let out = train_gaze(&mut m, &tr, &te, &cfg).unwrap();
        assert_eq!(m.store.content_hash(), h);
        assert_eq!(out.curve.len(), 4);
        assert!(out.curve.iter().all(|e| e.test_pog == out.curve[0].test_pog));
    }

    #[test]
    fn selection_policies_return_the_promised_epoch() {
        let d = data();
        let (tr, te) = split(&d);
        let base = TrainConfig { epochs: 4, batch_size: 4, learning_rate: 3e-3, ..Default::default() };
        let mut fin = tiny_model(1);
        let out_f = train_gaze(&mut fin, &tr, &te, &base).unwrap();
        assert_eq!(out_f.selected_epoch, 4);
        assert!((evaluate_pog(&fin, &te).unwrap() - out_f.pog_at(4)).abs() < 1e-9);

        let mut best = tiny_model(1);
        let cfg = TrainConfig { epoch_selection: EpochSelection::BestTest, ..base };
        let out_b = train_gaze(&mut best, &tr, &te, &cfg).unwrap();
        assert_eq!(out_b.curve, out_f.curve);
        let argmin = (1..=4).min_by(|&a, &b| out_b.pog_at(a).total_cmp(&out_b.pog_at(b))).unwrap();
        assert_eq!(out_b.selected_epoch, argmin);
        assert_eq!(out_b.best_epoch, argmin);
        assert!((evaluate_pog(&best, &te).unwrap() - out_b.pog_at(argmin)).abs() < 1e-9);
    }

    #[test]
    fn overlapping_subjects_are_leakage() {
        let d = data();
        let (tr, mut te) = split(&d);
        te.push(tr[0]);
        let err = train_gaze(&mut tiny_model(0), &tr, &te, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Leakage(_)));
        assert!(train_gaze(&mut tiny_model(0), &[], &te, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_reports_the_step() {
        let d = data();
        let (tr, te) = split(&d);
        let mut m = tiny_model(0);
        let id = m.store.id("head.fc2.bias").unwrap();
        m.store.get_mut(id).value[0] = f32::NAN;
        let err = train_gaze(&mut m, &tr, &te, &TrainConfig { epochs: 1, ..Default::default() }).unwrap_err();
        assert!(matches!(err, Error::Training { step: 0, .. }), "{err}");
    }
}
