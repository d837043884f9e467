use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evocomp::commands::RunManifest;
use evocomp::container::{read_dataset, write_dataset};
use evocomp::label::read_labels;
use evocomp::validate_sample;

fn evocomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evocomp"))
        .current_dir(dir)
        .env_remove("EVOCOMP_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = evocomp(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["gen", "--n-samples", "12", "--tokens", "9", "--groups", "3", "--dim", "16", "--extra-anchors", "2"];

fn gen_small(dir: &Path, out: &str) {
    let mut args = SMALL.to_vec();
    args.extend(["--out", out]);
    ok(dir, &args);
}

#[test]
fn gen_is_valid_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--family", "planted", "--n-samples", "512", "--tokens", "24", "--groups", "6", "--dim", "64", "--seed", "1", "--out", "a"]);
    ok(dir.path(), &["gen", "--family", "planted", "--n-samples", "512", "--tokens", "24", "--groups", "6", "--dim", "64", "--seed", "1", "--out", "b"]);
    let samples = read_dataset(&dir.path().join("a/samples.evc")).unwrap();
    assert_eq!(samples.len(), 512);
    samples.iter().for_each(|s| validate_sample(s).unwrap());
    for f in ["samples.evc", "samples.evc.json", "anchors.evc", "planted.jsonl", "groups.jsonl"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(evocomp(d, &["gen", "--groups", "0", "--out", "x"]).status.code(), Some(2));
    assert_eq!(evocomp(d, &["gen", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(evocomp(d, &["train", "--loss", "mse"]).status.code(), Some(2));
    assert_eq!(evocomp(d, &["eval", "--params", "missing.evp"]).status.code(), Some(3));
    gen_small(d, "data");
    let remote = evocomp(d, &["label", "--dataset", "data/samples.evc", "--anchors", "data/anchors.evc", "--scorer", "remote", "--cmd", "exit 1"]);
    assert_eq!(remote.status.code(), Some(4), "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(evocomp(d, &["render"]).status.code(), Some(2));
}

#[test]
fn show_defaults_marks_published_values() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["label", "--show-defaults"]);
    assert!(text.contains("population_size = 48  # published default"), "{text}");
    assert!(text.contains("workers = 1  # local default"));
    let text = ok(dir.path(), &["train", "--show-defaults"]);
    assert!(text.contains("lr0 = 0.003  # published default"));
    assert!(text.contains("epochs = 30  # published default"));
}

#[test]
fn seed_env_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "plain");
    let seeded = Command::new(env!("CARGO_BIN_EXE_evocomp"))
        .current_dir(d)
        .env("EVOCOMP_SEED", "5")
        .args(SMALL)
        .args(["--out", "env"])
        .output()
        .unwrap();
    assert!(seeded.status.success());
    ok(d, &[SMALL, &["--seed", "5", "--out", "flag"]].concat());
    let bytes = |p: &str| fs::read(d.join(p).join("samples.evc")).unwrap();
    assert_ne!(bytes("plain"), bytes("env"));
    assert_eq!(bytes("env"), bytes("flag"));
    let m = RunManifest::read(&d.join("env/gen.manifest.json")).unwrap();
    assert_eq!(m.seeds["gen"], 5);

    fs::write(d.join("gen.toml"), "out = \"cfg\"\n[gen]\nn_samples = 5\ntokens = 9\ngroups = 3\ndim = 16\nextra_anchors = 2\n").unwrap();
    ok(d, &["gen", "--config", "gen.toml"]);
    assert_eq!(read_dataset(&d.join("cfg/samples.evc")).unwrap().len(), 5);
    ok(d, &["gen", "--config", "gen.toml", "--n-samples", "3", "--out", "both"]);
    assert_eq!(read_dataset(&d.join("both/samples.evc")).unwrap().len(), 3);
}

#[test]
fn one_manifest_per_command_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "data");
    ok(d, &["label", "--dataset", "data/samples.evc", "--anchors", "data/anchors.evc", "--out", "labels.jsonl", "--workers", "3"]);
    let manifests: Vec<_> = fs::read_dir(d).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().ends_with("manifest.json")).collect();
    assert_eq!(manifests.len(), 1);
    let m = RunManifest::read(&d.join("labels.jsonl.manifest.json")).unwrap();
    assert_eq!(m.command, "label");
    assert_eq!(m.tool_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(m.outputs.len(), 1);
    ok(d, &["--config", "labels.jsonl.manifest.json", "label", "--out", "again.jsonl", "--workers", "1"]);
    assert_eq!(fs::read(d.join("labels.jsonl")).unwrap(), fs::read(d.join("again.jsonl")).unwrap());
}

#[test]
fn train_eval_compress_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "data");
    let common = ["--dataset", "data/samples.evc"];
    ok(d, &[&["train"][..], &common, &["--labels", "data/planted.jsonl", "--out", "c.evp", "--d-model", "16", "--epochs", "3", "--loss", "ce", "--no-text"]].concat());
    let history = fs::read_to_string(d.join("c.evp.csv")).unwrap();
    assert!(history.starts_with("epoch,step,ghm,cs,total,lr,val_total\n"));
    assert_eq!(history.lines().count(), 4);

    let table = ok(d, &[&["eval"][..], &common, &["--labels", "data/planted.jsonl", "--params", "c.evp", "--r", "9", "--out", "eval.json"]].concat());
    assert!(table.contains("trained"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["trained"]["recall"], 1.0);

    ok(d, &[&["compress"][..], &common, &["--params", "c.evp", "--ratio", "0.3333333333", "--out", "small.evc"]].concat());
    let small = read_dataset(&d.join("small.evc")).unwrap();
    assert!(small.iter().all(|s| s.n_visual() == 3));
    let kept = fs::read_to_string(d.join("small.evc.kept.jsonl")).unwrap();
    assert_eq!(kept.lines().count(), 12);
}

#[test]
fn remote_label_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--family", "pooled", "--n-samples", "4", "--tokens", "9", "--groups", "3", "--dim", "16", "--out", "data"]);
    let inputs = ["--dataset", "data/samples.evc", "--anchors", "data/anchors.evc"];
    ok(d, &[&["label"][..], &inputs, &["--scorer", "pooled", "--scorer-seed", "2", "--out", "local.jsonl"]].concat());
    let cmd = format!("{} serve-scorer --adapter pooled --seed 2", env!("CARGO_BIN_EXE_evocomp"));
    ok(d, &[&["label"][..], &inputs, &["--scorer", "remote", "--cmd", &cmd, "--out", "remote.jsonl"]].concat());
    let a = read_labels(&d.join("local.jsonl")).unwrap();
    let b = read_labels(&d.join("remote.jsonl")).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((&x.mask, x.loss), (&y.mask, y.loss));
        assert!(y.scorer_id.starts_with("remote:"));
    }
}

#[test]
fn oracle_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d, "data");
    ok(d, &["label", "--dataset", "data/samples.evc", "--anchors", "data/anchors.evc", "--oracle", "--out", "oracle.jsonl"]);
    let oracle = read_labels(&d.join("oracle.jsonl")).unwrap();
    let planted = read_labels(&d.join("data/planted.jsonl")).unwrap();
    for (o, p) in oracle.iter().zip(&planted) {
        assert_eq!(o.mask, p.mask);
    }
}

#[test]
fn render_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(ok(d, &["render", "--bits", "1,0,0,1", "--width", "2"]), "#.\n.#\n");
    assert_eq!(ok(d, &["render", "--bits", "1,1,1,1", "--width", "2"]), "##\n##\n");
    ok(d, &["render", "--bits", "1,0,1", "--width", "2", "--out", "a.ppm", "--cell", "4"]);
    ok(d, &["render", "--bits", "1,0,1", "--width", "2", "--out", "b.ppm", "--cell", "4"]);
    let a = fs::read(d.join("a.ppm")).unwrap();
    assert!(a.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(a, fs::read(d.join("b.ppm")).unwrap());
}

#[test]
fn bench_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_dataset(&d.join("empty.evc"), &[]).unwrap();
    let table = ok(d, &["bench", "--dataset", "empty.evc", "--anchors", "none.evc", "--workers", "1,2"]);
    assert_eq!(table.lines().count(), 3);

    gen_small(d, "data");
    let args = ["bench", "--dataset", "data/samples.evc", "--anchors", "data/anchors.evc", "--max-samples", "2", "--iters", "3", "--workers", "1,4", "--out", "bench.json", "--order-log", "order.tsv"];
    ok(d, &args);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("bench.json")).unwrap()).unwrap();
    let rate = |i: usize| report["runs"][i]["masks_per_second"].as_f64().unwrap();
    assert!(rate(1) >= 3.0 * rate(0), "{} vs {}", rate(1), rate(0));
    let first = fs::read(d.join("order.tsv")).unwrap();
    ok(d, &args);
    assert_eq!(first, fs::read(d.join("order.tsv")).unwrap());
}

#[test]
fn grad_check_command() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["grad-check", "--draws", "3"]);
    assert!(text.contains("pass"), "{text}");
}
