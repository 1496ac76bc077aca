use std::path::Path;
use std::process::{Command, Output};

fn gems(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gems"))
        .args(args)
        .args(["--dir", dir.to_str().unwrap(), "--profile", "toy", "--deterministic"])
        .args(["--set", "data.users=40", "--set", "train.steps=[3,4,2,2]"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = gems(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn full_pipeline_writes_manifested_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["datagen"]);
    ok(d, &["quantize"]);
    ok(d, &["compress"]);
    ok(d, &["train"]);
    ok(d, &["eval"]);
    let first = std::fs::read_to_string(d.join("eval.jsonl")).unwrap();
    ok(d, &["eval"]);
    assert_eq!(std::fs::read_to_string(d.join("eval.jsonl")).unwrap(), first);
    for f in ["events.tsv", "catalog.tsv", "users.tsv", "config.toml", "sids.tsv", "losses.jsonl", "eval.jsonl", "eval.txt"] {
        let text = std::fs::read_to_string(d.join(f)).unwrap();
        assert!(text.starts_with("# gems format=1 command="), "{f}");
    }
    for f in ["codebook.bin", "stage0.ckpt", "memories.bin", "stage1.ckpt", "stage3.ckpt", "model.ckpt"] {
        let bytes = std::fs::read(d.join(f)).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains("# gems format=1 command="), "{f}");
    }
}

#[test]
fn train_without_compress_names_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["datagen"]);
    ok(d, &["quantize"]);
    let o = gems(d, &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gems compress"));
}

#[test]
fn missing_data_names_datagen() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gems(tmp.path(), &["quantize"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("gems datagen"));
}

#[test]
fn invalid_config_exits_one_with_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = gems(tmp.path(), &["datagen", "--set", "model.fusion=e"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.fusion"));
}

#[test]
fn ablate_emits_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["ablate"]);
    let text = std::fs::read_to_string(d.join("ablate.jsonl")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    for (row, want) in rows.iter().zip(["recent+mid+lifecycle", "recent+mid", "recent+lifecycle", "recent"]) {
        assert!(row.contains(&format!("\"label\":\"{want} (seed")), "{row}");
    }
}

#[test]
fn bench_indexer_reports_each_length() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ok(tmp.path(), &["bench-indexer", "--lengths", "16,32", "--k", "4", "--reps", "1"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
}
