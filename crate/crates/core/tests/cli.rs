use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avsr::checkpoint::read_manifest;
use avsr::config::RunConfig;

fn avsr(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsr"))
        .arg("--work")
        .arg(work)
        .args(args)
        .env("AVX_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A configuration small enough to run every stage in seconds.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut c = RunConfig::with_seed(3);
    c.train_size = 12;
    c.test_size = 3;
    c.pretrain_size = 6;
    c.val_size = 2;
    c.noise_clips_per_category = 10;
    c.base.steps = 4;
    c.base.batch_size = 4;
    c.base.warmup = 1;
    c.schedule.scale_ratio = 5e-5;
    c.schedule.batch_size = 2;
    c.classifier.steps = 2;
    c.classifier.batch_size = 4;
    c.classifier.channels = 8;
    c.classifier_train_size = 8;
    c.classifier_val_size = 4;
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    path
}

#[test]
fn synth_is_byte_identical_and_counts_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for w in [&a, &b] {
        ok(&avsr(w, &["--config", cfg, "synth", "--train", "7", "--test", "4"]));
    }
    let ma = fs::read(a.join("corpus/manifest.jsonl")).unwrap();
    let mb = fs::read(b.join("corpus/manifest.jsonl")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 11);
    assert_eq!(fs::read(a.join("noise/manifest.jsonl")).unwrap(), fs::read(b.join("noise/manifest.jsonl")).unwrap());
    assert!(a.join("run.json").exists());
}

#[test]
fn missing_prerequisites_and_bad_arguments_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    let out = avsr(&empty, &["train", "base"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.json"));

    let cfg = tiny_config(dir.path());
    let w = dir.path().join("w");
    ok(&avsr(&w, &["--config", cfg.to_str().unwrap(), "synth"]));
    let out = avsr(&w, &["train", "adapters", "--scenario", "full"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("base"));

    assert_eq!(avsr(&w, &["train", "adapters", "--scenario", "loud"]).status.code(), Some(2));
    assert_eq!(avsr(&w, &["eval", "--report", "pdf"]).status.code(), Some(2));
    assert_eq!(avsr(&w, &["--scale-ratio", "-1", "params"]).status.code(), Some(2));
}

fn adapter_hashes(dir: &Path) -> Vec<String> {
    read_manifest(dir).unwrap().tensors.into_iter().map(|t| t.sha256).collect()
}

#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let w = dir.path().join("w");
    ok(&avsr(&w, &["--config", cfg.to_str().unwrap(), "synth"]));
    ok(&avsr(&w, &["train", "base"]));
    assert!(w.join("base/manifest.json").exists() && w.join("base/metrics.json").exists());

    ok(&avsr(&w, &["train", "adapters", "--scenario", "babble", "--seed", "1"]));
    let first = adapter_hashes(&w.join("adapters/babble"));
    ok(&avsr(&w, &["train", "adapters", "--scenario", "babble", "--seed", "1"]));
    assert_eq!(adapter_hashes(&w.join("adapters/babble")), first);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join("adapters/babble/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 1);
    assert!(run["git_describe"].is_string());

    ok(&avsr(&w, &["train", "adapters", "--scenario", "full,music,natural,sidespeaker"]));
    let params = avsr(&w, &["params", "--system", "full"]);
    ok(&params);
    let line = String::from_utf8(params.stdout).unwrap();
    let nums: Vec<usize> = line
        .split(|c: char| c == '(' || c == ')')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    assert_eq!(nums.len(), 2, "{line}");
    assert!(nums[0] < nums[1]);

    ok(&avsr(&w, &["train", "classifier", "--head", "category"]));
    ok(&avsr(&w, &["eval", "--system", "base,babble,music,natural,sidespeaker", "--report", "csv"]));
    let direct = avsr::evalkit::WerReport::read_csv(fs::File::open(w.join("reports/wer.csv")).unwrap()).unwrap();
    assert_eq!(direct.rows.iter().filter(|r| r.model_id == "babble").count(), 16);

    ok(&avsr(&w, &["eval", "--mode", "routed-category", "--oracle", "--report", "csv"]));
    let routed = avsr::evalkit::WerReport::read_csv(fs::File::open(w.join("reports/wer.csv")).unwrap()).unwrap();
    for r in &routed.rows {
        assert_eq!(r.model_id, "routed-category-oracle");
        let spec = direct.get(r.category.name(), r.category, r.snr_db).unwrap();
        assert_eq!((r.n_errors, r.n_words), (spec.n_errors, spec.n_words));
    }
    assert!(w.join("reports/decisions-routed-category-oracle.jsonl").exists());

    let md = avsr(&w, &["eval", "--mode", "routed-category", "--report", "md"]);
    ok(&md);
    let text = String::from_utf8(md.stdout).unwrap();
    assert!(text.starts_with("| Models | TrP | ToP | Babble -10 |"));
}
