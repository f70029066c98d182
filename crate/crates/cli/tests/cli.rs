use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 5

[synth]
clip_duration_s = 1.0

[synth.branching]
classes = 1
orders_per_class = 2
families_per_order = 2
genera_per_family = 2
species_per_genus = 3

[synth.clips_per_species]
min = 4
max = 8

[split]
test_species_count = 4

[front_end]
sample_rate_hz = 16000
crop_s = 1.0
train_views = 2

[train]
epochs = 2
batch_size = 8
clips_per_species = 4
"#;

// 8 species, 4 clips each, everything in train; 125 epochs of 4 batches
const OVERFIT: &str = r#"
seed = 1

[synth]
clip_duration_s = 1.0

[synth.branching]
classes = 1
orders_per_class = 1
families_per_order = 1
genera_per_family = 4
species_per_genus = 2

[synth.clips_per_species]
min = 4
max = 4

[split]
test_species_count = 0
val_ratio = 0.0

[front_end]
sample_rate_hz = 16000
crop_s = 1.0
train_views = 1

[train]
epochs = 125
batch_size = 8
clips_per_species = 4
template_mode = "Sci"

[train.adamw]
lr = 0.003
weight_decay = 0.0
"#;

fn taxoclap(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taxoclap"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn pipeline(config: &Path, out: &Path) {
    for step in ["synth", "split", "train", "eval", "hierarchy", "probe", "export-emb"] {
        ok(&taxoclap(config, out, &[step]));
    }
}

#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    pipeline(&config, &a);
    pipeline(&config, &b);
    for file in [
        "splits.csv",
        "model.txcl",
        "model.json",
        "loss.csv",
        "reports/eval.json",
        "reports/hierarchy.json",
        "reports/traits.json",
        "reports/projection.csv",
        "corpus/manifest.csv",
        "corpus/wav/sp0000_c000.wav",
    ] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 5);
    assert_eq!(report["zero_shot"].as_object().unwrap().len(), 5);
    let loss = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,epoch,loss,gamma\n"));
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("model.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 5);
}

#[test]
fn synth_counts_species() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    ok(&taxoclap(&config, dir.path(), &["synth"]));
    let taxonomy = std::fs::read_to_string(dir.path().join("corpus/taxonomy.csv")).unwrap();
    assert_eq!(taxonomy.lines().count(), 1 + 24);
}

#[test]
fn eval_before_train_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    ok(&taxoclap(&config, dir.path(), &["synth"]));
    ok(&taxoclap(&config, dir.path(), &["split"]));
    let o = taxoclap(&config, dir.path(), &["eval"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.txcl"));
}

#[test]
fn split_before_synth_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let o = taxoclap(&config, dir.path(), &["split"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing input"));
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    // a regular file where a directory is expected
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"x").unwrap();
    let o = taxoclap(&config, &blocker.join("out"), &["synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot create"));
}

#[test]
fn tampered_splits_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    ok(&taxoclap(&config, dir.path(), &["synth"]));
    ok(&taxoclap(&config, dir.path(), &["split"]));
    let path = dir.path().join("splits.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    // move one test clip into train: its species now straddles two splits
    let line = text.lines().find(|l| l.ends_with(",test")).unwrap().to_string();
    std::fs::write(&path, text.replacen(&line, &line.replace(",test", ",train"), 1)).unwrap();
    let o = taxoclap(&config, dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("split post-conditions"));
}

#[test]
fn bad_flag_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_taxoclap"))
        .args(["eval", "--template", "Latin"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overfit_fixture_scores_perfectly_on_train() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), OVERFIT);
    for step in ["synth", "split", "train"] {
        ok(&taxoclap(&config, dir.path(), &[step]));
    }
    ok(&taxoclap(&config, dir.path(), &["eval", "--template", "Sci", "--split", "train"]));
    let report: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join("reports/eval_train.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["zero_shot"]["Sci"]["top1"], 1.0);
}
