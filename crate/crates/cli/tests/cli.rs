use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset.synthetic]
n_subjects = 2
per_subject = 10
image_size = 56
"#;

const TINY_TABLE5: &str = r#"
[table5]
lr_size = 14
fractions = [5, 10, 20]

[table5.head]
kind = "resnet18"
input_size = 56
width = 8
head_hidden = 16

[table5.train]
epochs = 1
batch_size = 4

[table5.sr.backbone]
scale = 4
embed_dim = 8
num_groups = 1
blocks_per_group = 1
window_size = 7
num_heads = 2

[table5.sr.pretext]
steps = 2
batch_size = 2
probe_size = 2
eval_every = 1

[table5.sr.unlabeled]
n_subjects = 2
per_subject = 10
image_size = 56
"#;

fn gazesr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gazesr")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn dataset_hash(out: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    v["inputs"]["dataset"].as_str().expect("dataset hash recorded").to_string()
}

#[test]
fn synth_rerun_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", TINY);
    let first = gazesr(&["synth", "--config", "c.toml", "--out", "d"], dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    let labels = dir.path().join("d/subjects/s00/labels.csv");
    let modified = std::fs::metadata(&labels).unwrap().modified().unwrap();
    let second = gazesr(&["synth", "--config", "c.toml", "--out", "d"], dir.path());
    assert!(second.status.success());
    let stdout = String::from_utf8_lossy(&second.stdout);
    assert!(stdout.contains("nothing to do"), "{stdout}");
    assert_eq!(std::fs::metadata(&labels).unwrap().modified().unwrap(), modified);
}

#[test]
fn unknown_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", "seed = 1\n[train]\nepocs = 3\n");
    let o = gazesr(&["loso", "--config", "c.toml", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("epocs"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn bad_subcommand_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = gazesr(&["bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn internal_failure_exits_2_with_traceback() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", TINY);
    std::fs::write(dir.path().join("blocker"), b"a file, not a directory").unwrap();
    let o = gazesr(&["synth", "--config", "c.toml", "--out", "blocker/d"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    let path = err.trim_end().rsplit("traceback written to ").next().unwrap();
    assert!(Path::new(path).is_file(), "{err}");
    std::fs::remove_file(path).ok();
}

#[test]
fn seed_flag_matches_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY.replace("seed = 3\n", "");
    write_config(dir.path(), "flag.toml", &body);
    write_config(dir.path(), "file.toml", &format!("seed = 7\n{body}"));
    let a = gazesr(&["synth", "--config", "flag.toml", "--seed", "7", "--out", "a"], dir.path());
    let b = gazesr(&["synth", "--config", "file.toml", "--out", "b"], dir.path());
    assert!(a.status.success() && b.status.success());
    assert_eq!(dataset_hash(&dir.path().join("a")), dataset_hash(&dir.path().join("b")));
    let c = gazesr(&["synth", "--config", "file.toml", "--seed", "8", "--out", "c"], dir.path());
    assert!(c.status.success());
    assert_ne!(dataset_hash(&dir.path().join("a")), dataset_hash(&dir.path().join("c")));
}

#[test]
fn artifact_dirs_hold_config_fingerprint_and_hashes() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", TINY);
    let o = gazesr(&["synth", "--config", "c.toml", "--out", "d"], dir.path());
    assert!(o.status.success());
    let resolved = std::fs::read_to_string(dir.path().join("d/resolved_config.toml")).unwrap();
    assert!(resolved.contains("[table5.sr.pretext]"), "resolved config is complete");
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("d/run.json")).unwrap()).unwrap();
    assert!(run["fingerprint"]["jpeg_codec"].is_string());
    assert_eq!(run["inputs"]["dataset"].as_str().unwrap().len(), 64);
}

#[test]
fn table5_smoke_emits_nine_rows() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "c.toml", &format!("{TINY}{TINY_TABLE5}"));
    let o = gazesr(&["table5", "--config", "c.toml", "--out", "t5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("t5");
    let rows: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("table5-") && n.ends_with(".json") && !n.contains("partial"))
        .collect();
    assert_eq!(rows.len(), 9, "{rows:?}");
    let md = std::fs::read_to_string(out.join("summary.md")).unwrap();
    assert_eq!(md.lines().count(), 2 + 9);
    assert!(out.join("curves.png").is_file());
}
