use std::collections::BTreeMap;
use std::path::Path;

use gazesr::data::{current_synthetic, generate_synthetic, load_mpii_layout, Dataset, LayoutWriter};
use gazesr::degrade::{complex_degrade, resize, sample_recipe};
use gazesr::harness::{
    gaze_preservation_probe, prepare_inputs, run_loso, run_table1_style, run_table3_style, run_table5_style,
    train_gaze, train_or_load_sr, EvalReport, Fingerprint, Labeled, PipelineSpec, Preprocess,
};
use gazesr::image::ImageU8;
use gazesr::models::{build_model, GazeRegressor, ModelSpec};
use gazesr::report::{plot_pretext_curve, plot_probe_histogram, render_dir, reports_markdown};
use gazesr::sr::{center_gaze_stub, sr_upscale_all, SrModel};
use gazesr::util::{derive_seed, sha256_hex, write_atomic};
use gazesr_tensor::ResampleMethod;
use serde::Serialize;

use crate::config::{Restoration, RunConfig};
use crate::{Cli, CliError, Command};

type Res<T = ()> = Result<T, CliError>;

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("serialisable")
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    fingerprint: Fingerprint,
    inputs: BTreeMap<String, String>,
}

/// Writes the resolved config and the run record (fingerprint and input hashes) into `out`.
fn record(out: &Path, cfg: &RunConfig, command: Command, inputs: BTreeMap<String, String>) -> Res {
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("resolved_config.toml"), cfg.to_toml().as_bytes())?;
    let name = format!("{command:?}").to_lowercase();
    let rec = RunRecord { command: &name, fingerprint: Fingerprint::current(cfg.seed), inputs };
    write_atomic(&out.join("run.json"), &json(&rec))?;
    Ok(())
}

fn dataset(cfg: &RunConfig) -> Res<Dataset> {
    Ok(match &cfg.dataset.synthetic {
        Some(p) => generate_synthetic(p, &cfg.dataset.root)?,
        None => load_mpii_layout(&cfg.dataset.root)?,
    })
}

fn dataset_inputs(ds: &Dataset) -> Res<BTreeMap<String, String>> {
    Ok(BTreeMap::from([("dataset".to_string(), ds.content_hash()?)]))
}

fn sr_for(cfg: &RunConfig, needed: bool, cache: &Path) -> Res<Option<SrModel<f32>>> {
    Ok(if needed { Some(train_or_load_sr(&cfg.sr, cache)?.0) } else { None })
}

pub fn run(cli: &Cli) -> Res {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed, cli.out.clone());
    match cli.command {
        Command::Synth => synth(&cfg),
        Command::Degrade => degrade(&cfg),
        Command::TrainSr => train_sr(&cfg),
        Command::TrainGaze => train_gaze_cmd(&cfg),
        Command::Loso => loso(&cfg),
        Command::Table1 | Command::Table3 | Command::Table5 => table(&cfg, cli.command),
        Command::Probe => probe(&cfg),
        Command::Report => report(&cfg),
    }
}

fn synth(cfg: &RunConfig) -> Res {
    let out = cfg.out_dir()?;
    let params = cfg
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| CliError::user("synth needs a [dataset.synthetic] section"))?;
    if let Some(ds) = current_synthetic(params, out) {
        println!("{} already holds this dataset (content hash {}); nothing to do", out.display(), ds.content_hash()?);
        return Ok(());
    }
    let ds = generate_synthetic(params, out)?;
    let inputs = dataset_inputs(&ds)?;
    record(out, cfg, Command::Synth, inputs.clone())?;
    println!("wrote {} samples from {} subjects to {} (content hash {})", ds.samples.len(), ds.subjects().len(), out.display(), inputs["dataset"]);
    Ok(())
}

fn degrade(cfg: &RunConfig) -> Res {
    let out = cfg.out_dir()?;
    let ds = dataset(cfg)?;
    let size = cfg.pipeline.lr_size;
    let images = ds.load_images()?;
    let mut writer = LayoutWriter::new(&out.join("degraded"));
    let mut recipes = String::new();
    for (img, s) in images.iter().zip(&ds.samples) {
        let recipe = sample_recipe(&cfg.degradation, derive_seed(cfg.seed, &["degrade", &s.subject_id, &s.file_name()]))?;
        let lr = complex_degrade(img, &recipe, Some((size, size)))?;
        writer.add(&s.subject_id, &s.file_name(), &lr, s.gaze, s.geometry.as_ref())?;
        let line = serde_json::json!({ "subject": s.subject_id, "file": s.file_name(), "recipe": recipe });
        recipes.push_str(&format!("{line}\n"));
    }
    writer.finish()?;
    write_atomic(&out.join("recipes.jsonl"), recipes.as_bytes())?;
    record(out, cfg, Command::Degrade, dataset_inputs(&ds)?)?;
    println!("wrote {} degraded {size}px images to {}", images.len(), out.join("degraded").display());
    Ok(())
}

fn train_sr(cfg: &RunConfig) -> Res {
    let out = cfg.out_dir()?;
    let (model, report) = train_or_load_sr(&cfg.sr, &cfg.cache_dir()?)?;
    std::fs::create_dir_all(out)?;
    model.save(&out.join("sr.ckpt"))?;
    if let Some(r) = &report {
        write_atomic(&out.join("pretext.json"), &json(r))?;
        write_atomic(&out.join("pretext.csv"), r.to_csv().as_bytes())?;
        plot_pretext_curve(r, &out.join("pretext.png"))?;
    }
    let hash = model.store.content_hash();
    record(out, cfg, Command::TrainSr, BTreeMap::from([("sr_weights".to_string(), hash.clone())]))?;
    println!("sr backbone saved to {} (weights hash {hash})", out.join("sr.ckpt").display());
    Ok(())
}

/// Builds and trains `spec.model` on prepared inputs, testing on `holdout`.
fn fit(
    cfg: &RunConfig,
    ds: &Dataset,
    spec: &PipelineSpec,
    holdout: Option<&str>,
) -> Res<(GazeRegressor<f32>, gazesr::harness::TrainOutcome, BTreeMap<String, String>)> {
    let cache = cfg.cache_dir()?;
    let needs_sr = spec.preprocess.needs_sr() || matches!(spec.model, ModelSpec::Supervision(_));
    let sr = sr_for(cfg, needs_sr, &cache)?;
    let prepared = prepare_inputs(ds, spec, cfg.seed, &cache, sr.as_ref())?;
    let subjects = ds.subjects();
    let test_subject = match holdout {
        Some(h) if subjects.iter().any(|s| s == h) => h.to_string(),
        Some(h) => return Err(CliError::user(format!("holdout subject {h} is not in the dataset"))),
        None => subjects.last().cloned().ok_or_else(|| CliError::user("dataset has no subjects"))?,
    };
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (img, s) in prepared.images.iter().zip(&ds.samples) {
        let item = Labeled { image: img, gaze: s.gaze, subject: &s.subject_id };
        if s.subject_id == test_subject {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    let mut model = build_model::<f32>(&spec.model, cfg.seed)?;
    if let (ModelSpec::Supervision(_), Some(m)) = (&spec.model, &sr) {
        model.load_sr_weights(m)?;
    }
    if let Some(p) = &spec.pretrained_gaze {
        model.load_pretrained(p)?;
    }
    let outcome = train_gaze(&mut model, &train, &test, &cfg.train)?;
    let mut inputs = dataset_inputs(ds)?;
    inputs.insert("input_cache".into(), prepared.key);
    if let Some(m) = &sr {
        inputs.insert("sr_weights".into(), m.store.content_hash());
    }
    inputs.insert("holdout".into(), test_subject);
    Ok((model, outcome, inputs))
}

fn train_gaze_cmd(cfg: &RunConfig) -> Res {
    let out = cfg.out_dir()?;
    let ds = dataset(cfg)?;
    let (model, outcome, inputs) = fit(cfg, &ds, &cfg.pipeline, cfg.train_gaze.holdout.as_deref())?;
    std::fs::create_dir_all(out)?;
    model.save(&out.join("gaze.ckpt"))?;
    write_atomic(&out.join("train_gaze.json"), &json(&outcome))?;
    let mut csv = String::from("epoch,train_loss,test_pog\n");
    for e in &outcome.curve {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss.map(|v| v.to_string()).unwrap_or_default(), e.test_pog));
    }
    write_atomic(&out.join("curve.csv"), csv.as_bytes())?;
    record(out, cfg, Command::TrainGaze, inputs)?;
    println!(
        "held-out POG {:.3} deg at epoch {} (best {:.3} at epoch {}); model saved to {}",
        outcome.pog_at(outcome.selected_epoch),
        outcome.selected_epoch,
        outcome.pog_at(outcome.best_epoch),
        outcome.best_epoch,
        out.join("gaze.ckpt").display()
    );
    Ok(())
}

fn loso(cfg: &RunConfig) -> Res {
    let out = cfg.out_dir()?;
    let ds = dataset(cfg)?;
    let cache = cfg.cache_dir()?;
    let spec = &cfg.pipeline;
    let sr = sr_for(cfg, spec.preprocess.needs_sr() || matches!(spec.model, ModelSpec::Supervision(_)), &cache)?;
    std::fs::create_dir_all(out)?;
    let partial = out.join("loso.partial.json");
    let res = gazesr::harness::RunResources { cache_dir: cache, sr: sr.as_ref(), report_path: Some(partial.clone()) };
    let report = run_loso("loso", &ds, spec, &cfg.train, &res)?;
    report.save(&out.join("loso.json"))?;
    let _ = std::fs::remove_file(&partial);
    write_atomic(&out.join("loso_folds.csv"), report.folds_csv().as_bytes())?;
    record(out, cfg, Command::Loso, report.inputs.clone())?;
    render_dir(out)?;
    println!("{}", reports_markdown(std::slice::from_ref(&report)));
    Ok(())
}

fn table(cfg: &RunConfig, which: Command) -> Res {
    let out = cfg.out_dir()?;
    let ds = dataset(cfg)?;
    let cache = cfg.cache_dir()?;
    std::fs::create_dir_all(out)?;
    let rows: Vec<EvalReport> = match which {
        Command::Table1 => run_table1_style(&ds, &cfg.table1, &cache, Some(out))?,
        Command::Table3 => run_table3_style(&ds, &cfg.table3, &cache, Some(out))?,
        _ => run_table5_style(&ds, &cfg.table5, &cache, Some(out))?,
    };
    let mut inputs = dataset_inputs(&ds)?;
    for r in &rows {
        for (k, v) in &r.inputs {
            inputs.insert(format!("{}/{k}", r.experiment_id), v.clone());
        }
    }
    record(out, cfg, which, inputs)?;
    render_dir(out)?;
    println!("{}", reports_markdown(&rows));
    Ok(())
}

fn probe(cfg: &RunConfig) -> Res {
    let out = cfg.out_dir()?;
    let ds = dataset(cfg)?;
    let pc = &cfg.probe;
    let (model, mut inputs) = match &pc.gaze_model {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::user(format!("cannot read {}: {e}", p.display())))?;
            let mut inputs = dataset_inputs(&ds)?;
            inputs.insert("gaze_model".into(), sha256_hex(&bytes));
            (GazeRegressor::<f32>::load(p)?, inputs)
        }
        None => {
            let size = match &cfg.pipeline.model {
                ModelSpec::Regressor(c) => c.input_size,
                ModelSpec::Supervision(_) => return Err(CliError::user("probe trains a plain regressor; set [pipeline.model.regressor]")),
            };
            let spec = PipelineSpec { preprocess: Preprocess::None, lr_size: size, degradation: None, ..cfg.pipeline.clone() };
            let (m, _, inputs) = fit(cfg, &ds, &spec, cfg.train_gaze.holdout.as_deref())?;
            (m, inputs)
        }
    };
    if matches!(model.spec(), ModelSpec::Supervision(_)) {
        return Err(CliError::user("the probe needs a plain gaze regressor"));
    }
    let size = model.input_size();
    if size % pc.lr_size != 0 {
        return Err(CliError::user(format!("probe lr_size {} must divide the model input {size}", pc.lr_size)));
    }
    let scale = size / pc.lr_size;
    let n = if pc.limit == 0 { ds.samples.len() } else { pc.limit.min(ds.samples.len()) };
    let samples = &ds.samples[..n];
    let originals: Vec<ImageU8> = ds.load_images()?[..n]
        .iter()
        .map(|im| if im.height() == size { Ok(im.clone()) } else { resize(im, size, size, ResampleMethod::Area) })
        .collect::<Result<_, _>>()?;
    let lows = || -> Res<Vec<ImageU8>> {
        Ok(originals.iter().map(|im| resize(im, pc.lr_size, pc.lr_size, ResampleMethod::Area)).collect::<Result<_, _>>()?)
    };
    let restored: Vec<ImageU8> = match pc.restoration {
        Restoration::Identity => originals.clone(),
        Restoration::Interpolate => {
            lows()?.iter().map(|im| resize(im, size, size, cfg.pipeline.interpolation)).collect::<Result<_, _>>()?
        }
        Restoration::CenterStub => lows()?
            .iter()
            .zip(samples)
            .map(|(im, s)| center_gaze_stub(im, s.geometry.as_ref(), scale))
            .collect::<Result<_, _>>()?,
        Restoration::Sr => {
            let sr = train_or_load_sr(&cfg.sr, &cfg.cache_dir()?)?.0;
            if sr.config().scale != scale {
                return Err(CliError::user(format!("sr upscales x{} but the probe needs x{scale}", sr.config().scale)));
            }
            inputs.insert("sr_weights".into(), sr.store.content_hash());
            sr_upscale_all(&sr, &lows()?, 16)?
        }
    };
    let key = |s: &gazesr::data::GazeSample| format!("{}/{}", s.subject_id, s.file_name());
    let orig: Vec<(String, ImageU8)> = samples.iter().map(key).zip(originals).collect();
    let rest: Vec<(String, ImageU8)> = samples.iter().map(key).zip(restored).collect();
    let report = gaze_preservation_probe(&model, &orig, &rest)?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("probe.json"), &json(&report))?;
    plot_probe_histogram(&report, &out.join("probe.png"))?;
    record(out, cfg, Command::Probe, inputs)?;
    println!(
        "{} samples: mean shift {:.3} deg, centering {:.3} (mean gaze magnitude {:.2} -> {:.2} deg)",
        report.n, report.mean_shift_deg, report.centering, report.mean_magnitude_original, report.mean_magnitude_restored
    );
    Ok(())
}

fn report(cfg: &RunConfig) -> Res {
    let out = cfg.out_dir()?;
    let written = render_dir(out)?;
    if written.is_empty() {
        return Err(CliError::user(format!("no reports found in {}", out.display())));
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
